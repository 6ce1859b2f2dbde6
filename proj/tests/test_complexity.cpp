#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "edmips/complexity.hpp"
#include "edmips/mps_layer.hpp"
#include "test_util.hpp"

using namespace edmips;
using edmips::testing::numeric_grad;
using edmips::testing::relative_error;

namespace {

const FilterCost k3x3{3 * 3 * 16 * 32, 8, 8, 1};

std::vector<Real> simplex(std::size_t n, std::mt19937_64& rng) {
  return arch_probs(edmips::testing::random_vector(n, rng, 1.5));
}

std::vector<Real> one_hot(std::size_t n, std::size_t i) {
  std::vector<Real> v(n, 0);
  v[i] = 1;
  return v;
}

// A three-layer cost model with the stem-like normalizer first.
ComplexityModel three_layers(Real eta = 0) {
  return ComplexityModel({{"a", {3 * 3 * 8 * 16, 28, 28, 2}, {}},
                          {"b", {3 * 3 * 16 * 32, 14, 14, 2}, {}},
                          {"c", {1 * 1 * 16 * 32, 7, 7, 1}, BitPool{{2, 4, 8}, {4, 8}}}},
                         eta);
}

std::vector<LayerProbs> random_probs(const ComplexityModel& cm, std::mt19937_64& rng) {
  std::vector<LayerProbs> out;
  for (const auto& L : cm.layers()) {
    out.push_back({simplex(L.pool.weight_bits.size(), rng), simplex(L.pool.activation_bits.size(), rng)});
  }
  return out;
}

}  // namespace

TEST(Flops, ExamplesFromFilterGeometry) {
  EXPECT_EQ(flops(k3x3), 294912);
  EXPECT_EQ(flops({4608, 8, 8, 2}), 73728);
  EXPECT_EQ(flops({16 * 32, 8, 8, 1}), 32768);
  EXPECT_THROW(flops({0, 8, 8, 1}), Error);
  EXPECT_THROW(flops({1, 8, 8, 0}), Error);
}

TEST(Bitops, ScalesFlopsByBitProduct) {
  EXPECT_EQ(bitops(k3x3, 2, 2), 1179648);
  EXPECT_EQ(bitops(k3x3, 1, 1), flops(k3x3));
  EXPECT_EQ(bitops(k3x3, 4, 2), bitops(k3x3, 2, 4));
  EXPECT_THROW(bitops(k3x3, 0, 2), Error);
}

TEST(ExpectedBits, Examples) {
  std::vector<int> bits{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(expected_bits(std::vector<Real>{0.25, 0.25, 0.25, 0.25}, bits), 2.5);
  EXPECT_NEAR(expected_bits(std::vector<Real>{0.1, 0.2, 0.3, 0.4}, bits), 3.0, 1e-15);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(expected_bits(one_hot(4, i), bits), bits[i]);
  EXPECT_THROW(expected_bits(std::vector<Real>{0.5, 0.5}, bits), Error);
}

TEST(ExpectedCost, Examples) {
  BitPool pool;
  EXPECT_NEAR(expected_cost(k3x3, std::vector<Real>{0.25, 0.25, 0.25, 0.25},
                            std::vector<Real>{1.0 / 3, 1.0 / 3, 1.0 / 3}, pool),
              2211840, 1e-6);
  // E[b_f]=2.5, E[b_a]=3.0 from the uniform pool probabilities
  EXPECT_NEAR(2.5 * 3.0 * flops(k3x3), 2211840, 0);
  EXPECT_THROW(expected_cost(k3x3, one_hot(3, 0), one_hot(3, 0), pool), Error);
}

TEST(ExpectedCost, OneHotEqualsBitopsExactly) {
  BitPool pool;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_EQ(expected_cost(k3x3, one_hot(4, i), one_hot(3, j), pool),
                bitops(k3x3, pool.weight_bits[i], pool.activation_bits[j]));
    }
  }
}

TEST(ExpectedCost, MultilinearInEachSimplex) {
  std::mt19937_64 rng(1);
  BitPool pool;
  for (int k = 0; k < 50; ++k) {
    auto a1 = simplex(4, rng), a2 = simplex(4, rng), b = simplex(3, rng);
    std::uniform_real_distribution<Real> u(0, 1);
    const Real t = u(rng);
    std::vector<Real> am(4);
    for (int i = 0; i < 4; ++i) am[i] = t * a1[i] + (1 - t) * a2[i];
    const Real lhs = expected_cost(k3x3, am, b, pool);
    const Real rhs = t * expected_cost(k3x3, a1, b, pool) + (1 - t) * expected_cost(k3x3, a2, b, pool);
    EXPECT_NEAR(lhs, rhs, 1e-9 * std::abs(rhs));
    auto b1 = simplex(3, rng), b2 = simplex(3, rng);
    std::vector<Real> bm(3);
    for (int i = 0; i < 3; ++i) bm[i] = t * b1[i] + (1 - t) * b2[i];
    EXPECT_NEAR(expected_cost(k3x3, a1, bm, pool),
                t * expected_cost(k3x3, a1, b1, pool) + (1 - t) * expected_cost(k3x3, a1, b2, pool),
                1e-9 * expected_cost(k3x3, a1, b1, pool));
  }
}

TEST(NetworkCost, SingleLayerMinimumBitsIsOne) {
  ComplexityModel cm({{"only", k3x3, BitPool{{1, 2}, {1, 2}}}}, 0);
  std::vector<LayerProbs> p{{one_hot(2, 0), one_hot(2, 0)}};
  EXPECT_EQ(cm.network_cost(p), 1.0);
  EXPECT_EQ(cm.normalizer(), flops(k3x3));
}

TEST(NetworkCost, OneHotMatchesDiscreteSum) {
  auto cm = three_layers();
  std::mt19937_64 rng(2);
  for (int k = 0; k < 20; ++k) {
    std::vector<LayerProbs> p;
    std::vector<std::pair<int, int>> bits;
    Real oracle = 0;
    for (const auto& L : cm.layers()) {
      std::uniform_int_distribution<std::size_t> wi(0, L.pool.weight_bits.size() - 1),
          ai(0, L.pool.activation_bits.size() - 1);
      const std::size_t i = wi(rng), j = ai(rng);
      p.push_back({one_hot(L.pool.weight_bits.size(), i), one_hot(L.pool.activation_bits.size(), j)});
      bits.emplace_back(L.pool.weight_bits[i], L.pool.activation_bits[j]);
      // |f| w h / s^2 * b_w * b_a by hand
      oracle += static_cast<Real>(L.cost.cardinality * L.cost.input_width * L.cost.input_height /
                                  (L.cost.stride * L.cost.stride) * bits.back().first * bits.back().second);
    }
    EXPECT_EQ(cm.discrete_bitops(bits), oracle);
    EXPECT_NEAR(cm.network_cost(p), oracle / cm.normalizer(), 1e-12 * oracle / cm.normalizer());
  }
}

TEST(NetworkCost, LayerCountMismatchRejected) {
  auto cm = three_layers();
  std::vector<LayerProbs> p(2);
  EXPECT_THROW(cm.network_cost(p), Error);
  EXPECT_THROW(ComplexityModel({}, 0), Error);
  EXPECT_THROW(three_layers(-1), Error);
}

TEST(NetworkCost, TapeAndPureFormsAgree) {
  auto cm = three_layers();
  std::mt19937_64 rng(3);
  std::vector<Tensor> alphas, betas;
  std::vector<LayerProbs> p;
  for (const auto& L : cm.layers()) {
    alphas.push_back(edmips::testing::random_tensor({L.pool.weight_bits.size()}, rng));
    betas.push_back(edmips::testing::random_tensor({L.pool.activation_bits.size()}, rng));
    p.push_back({arch_probs(alphas.back().data()), arch_probs(betas.back().data())});
  }
  Tape tape(false);
  EXPECT_NEAR(cm.network_cost(tape, alphas, betas).item(), cm.network_cost(p), 1e-12 * cm.network_cost(p));
}

TEST(NetworkCost, GradientThreeWaysAgree) {
  auto cm = three_layers();
  std::mt19937_64 rng(4);
  std::vector<Tensor> alphas, betas;
  for (const auto& L : cm.layers()) {
    alphas.push_back(edmips::testing::random_tensor({L.pool.weight_bits.size()}, rng).set_requires_grad());
    betas.push_back(edmips::testing::random_tensor({L.pool.activation_bits.size()}, rng).set_requires_grad());
  }
  Tape tape;
  tape.backward(cm.network_cost(tape, alphas, betas));
  auto pure = [&] {
    std::vector<LayerProbs> p;
    for (std::size_t k = 0; k < alphas.size(); ++k) {
      p.push_back({arch_probs(alphas[k].data()), arch_probs(betas[k].data())});
    }
    return p;
  };
  auto f = [&] { return cm.network_cost(pure()); };
  for (std::size_t k = 0; k < alphas.size(); ++k) {
    const auto p = pure();
    const auto ga = cm.alpha_gradient(k, p[k]);
    const auto gb = cm.beta_gradient(k, p[k]);
    EXPECT_LT(relative_error(alphas[k].grad(), ga), 1e-12);
    EXPECT_LT(relative_error(betas[k].grad(), gb), 1e-12);
    EXPECT_LT(relative_error(ga, numeric_grad(alphas[k], f, 1e-5)), 1e-6);
    EXPECT_LT(relative_error(gb, numeric_grad(betas[k], f, 1e-5)), 1e-6);
  }
}

TEST(NetworkCost, LogitShiftInvariant) {
  auto cm = three_layers();
  std::mt19937_64 rng(5);
  std::vector<Tensor> alphas, betas;
  for (const auto& L : cm.layers()) {
    alphas.push_back(edmips::testing::random_tensor({L.pool.weight_bits.size()}, rng));
    betas.push_back(edmips::testing::random_tensor({L.pool.activation_bits.size()}, rng));
  }
  Tape tape(false);
  const Real base = cm.network_cost(tape, alphas, betas).item();
  for (auto& a : alphas[1].data()) a += 17;
  for (auto& b : betas[2].data()) b -= 4;
  EXPECT_NEAR(cm.network_cost(tape, alphas, betas).item(), base, 1e-12 * base);
}

TEST(Lagrangian, Examples) {
  EXPECT_NEAR(lagrangian(1.2, 3.0, 0.001), 1.203, 1e-15);
  EXPECT_EQ(lagrangian(1.2, 3.0, 0), 1.2);
  EXPECT_THROW(lagrangian(1.0, 1.0, -1), Error);
}

// CE through a searchable layer plus eta * cost, differentiated wrt alpha.
TEST(Lagrangian, AlphaGradientIsTaskPlusWeightedCost) {
  std::mt19937_64 rng(6);
  MpsConvLayer layer({3, 2, 3, 3, 1, 1}, BitPool{}, WeightSharing::shared, rng);
  for (auto& v : layer.alpha().data()) v = std::normal_distribution<Real>(0, 1)(rng);
  Tensor x = edmips::testing::random_tensor({4, 2, 4, 4}, rng, 1.2);
  std::vector<int> labels{0, 2, 1, 2};
  ComplexityModel cm({{"l", {3 * 2 * 9, 4, 4, 1}, BitPool{}}}, 0.05);
  auto task = [&](Tape& t) {
    Tensor y = forward(t, layer, x);
    return cross_entropy(t, reshape(t, avg_pool2d(t, y, {4, 4}), {4, 3}), labels);
  };
  auto total = [&](Tape& t, Real eta) {
    Tensor cost = cm.network_cost(t, std::span<const Tensor>(&layer.alpha(), 1),
                                  std::span<const Tensor>(&layer.beta(), 1));
    return lagrangian(t, task(t), cost, eta);
  };
  auto grad_of = [&](Real eta) {
    layer.alpha().drop_grad();
    Tape t;
    t.backward(total(t, eta));
    return std::vector<Real>(layer.alpha().grad().begin(), layer.alpha().grad().end());
  };
  const auto g = grad_of(cm.eta());
  auto fd = numeric_grad(layer.alpha(), [&] {
    Tape t(false);
    return total(t, cm.eta()).item();
  });
  EXPECT_LT(relative_error(g, fd), 1e-4);
  // decomposition: task gradient plus eta times the closed-form cost gradient
  const auto g_task = grad_of(0);
  const auto g_cost = cm.alpha_gradient(0, {layer.alpha_probs(), layer.beta_probs()});
  std::vector<Real> sum(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) sum[i] = g_task[i] + cm.eta() * g_cost[i];
  EXPECT_LT(relative_error(g, sum), 1e-10);
}

TEST(Lagrangian, ZeroEtaLeavesCostOffTheGraph) {
  std::mt19937_64 rng(7);
  Tensor ce = Tensor::scalar(0.7).set_requires_grad();
  Tensor alpha = edmips::testing::random_tensor({4}, rng).set_requires_grad();
  ComplexityModel cm({{"l", k3x3, BitPool{}}}, 0);
  Tensor beta = Tensor::zeros({3});
  Tape tape;
  Tensor cost = cm.network_cost(tape, std::span<const Tensor>(&alpha, 1), std::span<const Tensor>(&beta, 1));
  Tensor l = lagrangian(tape, ce, cost, 0);
  EXPECT_TRUE(l.same_storage(ce));
  EXPECT_GT(cost.item(), 0);  // still computable for logging
  tape.backward(l);
  for (Real g : alpha.grad()) EXPECT_EQ(g, 0);
}

TEST(CostReport, RowsPerLayer) {
  auto cm = three_layers();
  std::mt19937_64 rng(8);
  auto p = random_probs(cm, rng);
  std::ostringstream os;
  cm.write_cost_report(os, p);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "# schema=edmips.cost_report/1");
  std::getline(is, line);
  EXPECT_EQ(line, "layer_id,flops,E_bf,E_ba,expected_cost,normalized_cost");
  Real sum = 0;
  int rows = 0;
  while (std::getline(is, line)) {
    std::vector<Real> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(std::stod(c));
    ASSERT_EQ(cols.size(), 6u);
    EXPECT_EQ(cols[0], rows);
    EXPECT_DOUBLE_EQ(cols[4], cols[1] * cols[2] * cols[3]);
    sum += cols[5];
    ++rows;
  }
  EXPECT_EQ(rows, 3);
  EXPECT_NEAR(sum, cm.network_cost(p), 1e-12 * sum);
}
