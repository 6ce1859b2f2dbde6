#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "edmips/checkpoint.hpp"
#include "edmips/ops.hpp"
#include "edmips/optim.hpp"
#include "edmips/tensor.hpp"
#include "test_util.hpp"

using namespace edmips;
using edmips::testing::numeric_grad;
using edmips::testing::Probe;
using edmips::testing::random_tensor;
using edmips::testing::relative_error;

namespace {

// Direct six-loop cross-correlation.
Tensor conv_oracle(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor y({N, O, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          Real s = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < kh; ++a)
              for (std::size_t b = 0; b < kw; ++b) {
                const long yy = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                s += x[((n * C + c) * H + yy) * W + xx] * w[((o * C + c) * kh + a) * kw + b];
              }
          y[((n * O + o) * Ho + i) * Wo + j] = s;
        }
  return y;
}

// Gradient of probe(f(param)) both ways: analytic via the tape, numeric via
// central differences.
template <class F>
Real grad_check(Tensor param, F&& forward, std::uint64_t seed = 11) {
  Tape probe_tape(false);
  const std::size_t n = forward(probe_tape).numel();
  Probe probe(n, seed);
  param.set_requires_grad();
  param.drop_grad();
  Tape tape;
  Tensor y = forward(tape);
  Tensor loss = dot_const(tape, reshape(tape, y, {y.numel()}), probe.weights);
  tape.backward(loss);
  std::vector<Real> analytic(param.grad().begin(), param.grad().end());
  auto numeric = numeric_grad(param, [&] {
    Tape t(false);
    return probe(forward(t));
  });
  return relative_error(analytic, numeric);
}

}  // namespace

// ------------------------------------------------------------------ tensor

TEST(Tensor, ShapeAndDataAgree) {
  Tensor t({2, 3, 4}, 1.5);
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_FALSE(t.has_grad());
  t.ensure_grad();
  EXPECT_EQ(t.grad().size(), t.numel());
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<Real>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor(Shape{}), ShapeError);
}

TEST(Tensor, CloneDoesNotAlias) {
  Tensor a({3}, 1);
  Tensor b = a.clone();
  b[0] = 5;
  EXPECT_EQ(a[0], 1);
  EXPECT_FALSE(a.same_storage(b));
}

TEST(Tape, BackwardPopulatesEveryRequiringTensor) {
  Tensor a = Tensor::vector({1, 2}).set_requires_grad();
  Tensor unused = Tensor::vector({3, 4}).set_requires_grad();
  Tape tape;
  Tensor s = sum(tape, mul(tape, a, a));
  Tensor dead = scale(tape, unused, 2);  // never reaches the loss
  (void)dead;
  tape.backward(s);
  ASSERT_TRUE(a.has_grad());
  EXPECT_DOUBLE_EQ(a.grad()[0], 2);
  EXPECT_DOUBLE_EQ(a.grad()[1], 4);
  ASSERT_TRUE(unused.has_grad());
  EXPECT_EQ(unused.grad()[0], 0);
}

TEST(Tape, ReusedTensorAccumulatesBothPaths) {
  Tensor a = Tensor::vector({3}).set_requires_grad();
  Tape tape;
  Tensor y = add(tape, scale(tape, a, 2), mul(tape, a, a));  // 2a + a^2
  tape.backward(y);
  EXPECT_DOUBLE_EQ(a.grad()[0], 2 + 2 * 3);
}

TEST(Tape, NonScalarLossRejected) {
  Tensor a({2}, 1);
  a.set_requires_grad();
  Tape tape;
  Tensor y = scale(tape, a, 2);
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Tape, NotRecordingKeepsTapeEmpty) {
  Tensor a({2}, 1);
  a.set_requires_grad();
  Tape tape(false);
  scale(tape, a, 2);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, ReplayIsDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng).set_requires_grad();
    Tape tape;
    Tensor y = relu(tape, conv2d(tape, x, w, {1, 1}));
    Tensor l = sum(tape, mul(tape, y, y));
    tape.backward(l);
    return std::make_pair(l.item(), std::vector<Real>(w.grad().begin(), w.grad().end()));
  };
  EXPECT_EQ(run(), run());
}

// ------------------------------------------------------------------ conv2d

TEST(Conv2d, OnesGiveNine) {
  Tape tape(false);
  Tensor y = conv2d(tape, Tensor::ones({1, 1, 3, 3}), Tensor::ones({1, 1, 3, 3}));
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
}

TEST(Conv2d, ZeroWeightsGiveZeroOutputAndZeroInputGrad) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({2, 3, 5, 5}, rng).set_requires_grad();
  Tensor w = Tensor::zeros({2, 3, 3, 3});
  Tape tape;
  Tensor y = conv2d(tape, x, w, {1, 1});
  for (Real v : y.data()) EXPECT_EQ(v, 0);
  Probe probe(y.numel(), 3);
  tape.backward(dot_const(tape, reshape(tape, y, {y.numel()}), probe.weights));
  for (Real g : x.grad()) EXPECT_EQ(g, 0);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({2, 3, 8, 8}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tape tape(false);
  for (auto [s, p] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}, {3, 2}}) {
    Tensor y = conv2d(tape, x, w, {s, p});
    Tensor ref = conv_oracle(x, w, s, p);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LT(relative_error(y.data(), ref.data()), 1e-10) << "stride " << s << " pad " << p;
  }
}

TEST(Conv2d, OddSizeStrideTwoUsesFloor) {
  Tape tape(false);
  Tensor y = conv2d(tape, Tensor::ones({1, 1, 32, 32}), Tensor::ones({1, 1, 3, 3}), {2, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 16, 16}));
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
  Tape tape(false);
  try {
    conv2d(tape, Tensor::ones({1, 2, 4, 4}), Tensor::ones({1, 3, 3, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1,2,4,4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[1,3,3,3]"), std::string::npos) << msg;
  }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  for (auto [s, p] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 0}}) {
    auto f = [&](Tape& t) { return conv2d(t, x, w, {s, p}); };
    EXPECT_LT(grad_check(x, f), 1e-4);
    EXPECT_LT(grad_check(w, f), 1e-4);
  }
}

// ------------------------------------------------------------------ linear

TEST(Linear, IdentityWeightsPassInput) {
  Tensor x({2, 3}, std::vector<Real>{1, 2, 3, 4, 5, 6});
  Tensor w({3, 3}, std::vector<Real>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tape tape(false);
  Tensor y = linear(tape, x, w, Tensor::zeros({3}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Linear, ZeroInputGivesBias) {
  Tensor b = Tensor::vector({0.5, -1.5});
  Tape tape(false);
  Tensor y = linear(tape, Tensor::zeros({3, 4}), Tensor::ones({2, 4}), b);
  for (std::size_t n = 0; n < 3; ++n) {
    EXPECT_EQ(y[n * 2], 0.5);
    EXPECT_EQ(y[n * 2 + 1], -1.5);
  }
}

TEST(Linear, MatchesNestedLoopOracle) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({3, 5}, rng), w = random_tensor({2, 5}, rng), b = random_tensor({2}, rng);
  Tape tape(false);
  Tensor y = linear(tape, x, w, b);
  std::vector<Real> ref(6);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t o = 0; o < 2; ++o) {
      Real s = b[o];
      for (std::size_t k = 0; k < 5; ++k) s += x[n * 5 + k] * w[o * 5 + k];
      ref[n * 2 + o] = s;
    }
  EXPECT_LT(relative_error(y.data(), ref), 1e-10);
}

TEST(Linear, ShapeMismatchRejected) {
  Tape tape(false);
  EXPECT_THROW(linear(tape, Tensor::ones({2, 3}), Tensor::ones({2, 4}), Tensor::zeros({2})), ShapeError);
  EXPECT_THROW(linear(tape, Tensor::ones({2, 4}), Tensor::ones({2, 4}), Tensor::zeros({3})), ShapeError);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3, 5}, rng), w = random_tensor({2, 5}, rng), b = random_tensor({2}, rng);
  auto f = [&](Tape& t) { return linear(t, x, w, b); };
  EXPECT_LT(grad_check(x, f), 1e-4);
  EXPECT_LT(grad_check(w, f), 1e-4);
  EXPECT_LT(grad_check(b, f), 1e-4);
}

// -------------------------------------------------------------- batch norm

TEST(BatchNorm, StandardizedBatchPassesThrough) {
  // Two samples per channel at +-1: zero mean, unit (population) variance.
  Tensor x({2, 2}, std::vector<Real>{1, -1, -1, 1});
  BatchNormStats st(2);
  Tape tape(false);
  Tensor y = batch_norm(tape, x, Tensor::ones({2}), Tensor::zeros({2}), st, Mode::train);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(BatchNorm, ConstantChannelNormalizesToZero) {
  Tensor x({3, 1, 2, 2}, 7.0);
  BatchNormStats st(1);
  Tape tape(false);
  Tensor y = batch_norm(tape, x, Tensor::ones({1}), Tensor::zeros({1}), st, Mode::train);
  for (Real v : y.data()) EXPECT_EQ(v, 0);
}

TEST(BatchNorm, RunningStatsUpdateAndEvalUsesThem) {
  Tensor x({4, 1}, std::vector<Real>{1, 2, 3, 4});
  BatchNormStats st(1);
  Tape tape(false);
  batch_norm(tape, x, Tensor::ones({1}), Tensor::zeros({1}), st, Mode::train);
  EXPECT_NEAR(st.running_mean[0], 0.1 * 2.5, 1e-12);
  const Real unbiased = (1.5 * 1.5 * 2 + 0.5 * 0.5 * 2) / 3;
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * unbiased, 1e-12);
  Tensor y = batch_norm(tape, x, Tensor::ones({1}), Tensor::zeros({1}), st, Mode::eval);
  EXPECT_NEAR(y[0], (1 - st.running_mean[0]) / std::sqrt(st.running_var[0] + 1e-5), 1e-12);
}

TEST(BatchNorm, ChannelMismatchRejected) {
  BatchNormStats st(3);
  Tape tape(false);
  EXPECT_THROW(batch_norm(tape, Tensor::ones({2, 2}), Tensor::ones({3}), Tensor::zeros({3}), st, Mode::train),
               ShapeError);
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({3, 2, 3, 3}, rng);
  Tensor g = random_tensor({2}, rng), b = random_tensor({2}, rng);
  for (Mode mode : {Mode::train, Mode::eval}) {
    auto f = [&](Tape& t) {
      BatchNormStats st(2);  // fresh stats: the forward is a pure function
      st.running_var[0] = 2;
      return batch_norm(t, x, g, b, st, mode);
    };
    EXPECT_LT(grad_check(g, f), 1e-4);
    EXPECT_LT(grad_check(b, f), 1e-4);
    EXPECT_LT(grad_check(x, f), 1e-4);
  }
  Tensor x2 = random_tensor({5, 3}, rng), g2 = random_tensor({3}, rng), b2 = random_tensor({3}, rng);
  auto f2 = [&](Tape& t) {
    BatchNormStats st(3);
    return batch_norm(t, x2, g2, b2, st, Mode::train);
  };
  EXPECT_LT(grad_check(x2, f2), 1e-4);
  EXPECT_LT(grad_check(g2, f2), 1e-4);
}

// ---------------------------------------------- pooling, softmax, and loss

TEST(Relu, ForwardAndGradient) {
  Tensor x = Tensor::vector({-1, 0.5, 2, -3}).set_requires_grad();
  Tape tape;
  Tensor y = relu(tape, x);
  EXPECT_EQ(y[0], 0);
  EXPECT_EQ(y[2], 2);
  tape.backward(sum(tape, y));
  EXPECT_EQ(x.grad()[0], 0);
  EXPECT_EQ(x.grad()[1], 1);
}

TEST(Relu, NanPassesThrough) {
  // a diverged input must stay visible to the loss check
  Tape tape(false);
  Tensor y = relu(tape, Tensor::vector({std::nan(""), -1}));
  EXPECT_TRUE(std::isnan(y[0]));
  EXPECT_EQ(y[1], 0);
}

TEST(Pooling, MaxAndAverageValues) {
  Tensor x({1, 1, 2, 4}, std::vector<Real>{1, 2, 3, 4, 5, 6, 7, 8});
  Tape tape(false);
  Tensor m = max_pool2d(tape, x, {2, 2});
  Tensor a = avg_pool2d(tape, x, {2, 2});
  EXPECT_EQ(m.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(m[0], 6);
  EXPECT_EQ(m[1], 8);
  EXPECT_DOUBLE_EQ(a[0], 3.5);
  EXPECT_DOUBLE_EQ(a[1], 5.5);
  EXPECT_THROW(max_pool2d(tape, Tensor::ones({1, 1, 1, 1}), {2, 2}), ShapeError);
}

TEST(Pooling, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({2, 2, 4, 4}, rng);
  EXPECT_LT(grad_check(x, [&](Tape& t) { return avg_pool2d(t, x, {2, 2}); }), 1e-4);
  EXPECT_LT(grad_check(x, [&](Tape& t) { return max_pool2d(t, x, {2, 2}); }), 1e-4);
}

TEST(Softmax, EqualLogitsAreUniform) {
  auto p = softmax(std::vector<Real>{3, 3, 3, 3});
  for (Real v : p) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, LargeLogitsStayFinite) {
  auto p = softmax(std::vector<Real>{1000, 0});
  EXPECT_DOUBLE_EQ(p[0], 1);
  EXPECT_TRUE(std::isfinite(p[1]));
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  Tensor z = random_tensor({5}, rng);
  EXPECT_LT(grad_check(z, [&](Tape& t) { return softmax_vec(t, z); }), 1e-4);
}

TEST(CrossEntropy, PerfectLogitsApproachZero) {
  std::vector<int> labels{1};
  Real prev = INFINITY;
  for (Real gap : {1.0, 5.0, 10.0, 30.0}) {
    Tape tape(false);
    Tensor logits({1, 3}, std::vector<Real>{0, gap, 0});
    const Real l = cross_entropy(tape, logits, labels).item();
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-12);
}

TEST(CrossEntropy, MeanOverBatch) {
  Tape tape(false);
  std::vector<int> labels{0, 1};
  Tensor logits({2, 2}, 0.0);
  EXPECT_NEAR(cross_entropy(tape, logits, labels).item(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, LabelOutOfRangeRejected) {
  Tape tape(false);
  std::vector<int> bad{4};
  EXPECT_THROW(cross_entropy(tape, Tensor::zeros({1, 4}), bad), Error);
  std::vector<int> neg{-1};
  EXPECT_THROW(cross_entropy(tape, Tensor::zeros({1, 4}), neg), Error);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  Tensor logits = random_tensor({2, 4}, rng);
  std::vector<int> labels{3, 1};
  EXPECT_LT(grad_check(logits, [&](Tape& t) { return cross_entropy(t, logits, labels); }), 1e-4);
}

TEST(ElementwiseOps, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  Tensor a = random_tensor({6}, rng), b = random_tensor({6}, rng);
  EXPECT_LT(grad_check(a, [&](Tape& t) { return add(t, a, b); }), 1e-4);
  EXPECT_LT(grad_check(a, [&](Tape& t) { return mul(t, a, b); }), 1e-4);
  EXPECT_LT(grad_check(b, [&](Tape& t) { return mul(t, a, b); }), 1e-4);
  EXPECT_LT(grad_check(a, [&](Tape& t) { return scale(t, a, -2.5); }), 1e-4);
  EXPECT_LT(grad_check(a, [&](Tape& t) { return sum(t, a); }), 1e-4);
  Tensor w = random_tensor({2}, rng);
  auto f = [&](Tape& t) { return mix(t, {a, b}, w); };
  EXPECT_LT(grad_check(a, f), 1e-4);
  EXPECT_LT(grad_check(w, f), 1e-4);
}

// --------------------------------------------------------------------- sgd

TEST(Sgd, ZeroLearningRateLeavesParams) {
  Tensor p = Tensor::vector({1, 2}).set_requires_grad();
  p.ensure_grad()[0] = 5;
  Sgd opt({p}, {0.9, 0.1});
  opt.step(0);
  EXPECT_EQ(p[0], 1);
  EXPECT_EQ(p[1], 2);
}

TEST(Sgd, PlainStepSubtractsScaledGrad) {
  Tensor p = Tensor::scalar(1).set_requires_grad();
  p.ensure_grad()[0] = 0.5;
  Sgd opt({p}, {0, 0});
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(p[0], 1 - 0.1 * 0.5);
}

TEST(Sgd, MomentumTwoSteps) {
  const Real lr = 0.1, g = 0.5;
  Tensor p = Tensor::scalar(0).set_requires_grad();
  p.ensure_grad()[0] = g;
  Sgd opt({p}, {0.9, 0});
  opt.step(lr);
  opt.step(lr);
  EXPECT_NEAR(p[0], -lr * g * (1 + 1.9), 1e-15);
}

TEST(Sgd, WeightDecayAddsToGradient) {
  Tensor p = Tensor::scalar(2).set_requires_grad();
  p.ensure_grad()[0] = 0;
  Sgd opt({p}, {0, 0.5});
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(p[0], 2 - 0.1 * 0.5 * 2);
}

TEST(Sgd, MissingGradRejected) {
  Tensor p = Tensor::scalar(1).set_requires_grad();
  Sgd opt({p}, {});
  EXPECT_THROW(opt.step(0.1), Error);
}

// -------------------------------------------------------------- checkpoint

TEST(Checkpoint, RoundTripIsExact) {
  const auto path = (std::filesystem::temp_directory_path() / "edmips_ckpt_test.bin").string();
  std::mt19937_64 rng(12);
  std::vector<NamedTensor> in{{"a.weight", random_tensor({2, 3, 1, 4}, rng)},
                              {"b", Tensor::vector({1e-300, -0.0, 3.5})}};
  save_checkpoint(path, in);
  auto out = load_checkpoint(path);
  ASSERT_EQ(out.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(out[k].name, in[k].name);
    EXPECT_EQ(out[k].tensor.shape(), in[k].tensor.shape());
    for (std::size_t i = 0; i < in[k].tensor.numel(); ++i) {
      EXPECT_EQ(std::memcmp(&out[k].tensor[i], &in[k].tensor[i], sizeof(Real)), 0);
    }
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, LayoutStartsWithMagicVersionCount) {
  const auto path = (std::filesystem::temp_directory_path() / "edmips_ckpt_layout.bin").string();
  save_checkpoint(path, {{"x", Tensor::scalar(2)}});
  std::ifstream is(path, std::ios::binary);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  // magic, version, count, name length, "x", rank, extent, one f64
  ASSERT_EQ(b.size(), 4u + 4 + 8 + 4 + 1 + 4 + 8 + 8);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "EDMP");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[8], 1);
  EXPECT_EQ(b[16], 1);
  EXPECT_EQ(b[20], 'x');
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesRejected) {
  const auto path = (std::filesystem::temp_directory_path() / "edmips_ckpt_bad.bin").string();
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE1234";
  }
  EXPECT_THROW(load_checkpoint(path), Error);
  save_checkpoint(path, {{"x", Tensor::vector({1, 2, 3})}});
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("x"), std::string::npos);
  }
  std::filesystem::remove(path);
}
