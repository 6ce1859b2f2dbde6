#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "edmips/bit_pool.hpp"
#include "edmips/ops.hpp"
#include "edmips/tensor.hpp"

namespace edmips {

/// Geometry that determines the cost of one filter.
struct FilterCost {
  std::uint64_t cardinality = 1;  // number of weights |f|
  std::uint64_t input_width = 1;
  std::uint64_t input_height = 1;
  std::uint64_t stride = 1;
};

/// |f| * w_x * h_x / s^2
inline Real flops(const FilterCost& fc) {
  if (fc.cardinality == 0 || fc.input_width == 0 || fc.input_height == 0 || fc.stride == 0) {
    throw Error("filter cost fields must be positive");
  }
  const Real num = static_cast<Real>(fc.cardinality) * static_cast<Real>(fc.input_width) *
                   static_cast<Real>(fc.input_height);
  return num / static_cast<Real>(fc.stride * fc.stride);
}

inline Real bitops(const FilterCost& fc, int weight_bits, int activation_bits) {
  if (weight_bits < 1 || activation_bits < 1) throw Error("bit-widths must be >= 1");
  return static_cast<Real>(weight_bits) * static_cast<Real>(activation_bits) * flops(fc);
}

inline Real expected_bits(std::span<const Real> probs, std::span<const int> bits) {
  if (probs.size() != bits.size()) {
    throw Error("expected_bits: " + std::to_string(probs.size()) + " probabilities for " +
                std::to_string(bits.size()) + " bit-widths");
  }
  Real e = 0;
  for (std::size_t i = 0; i < bits.size(); ++i) e += probs[i] * static_cast<Real>(bits[i]);
  return e;
}

/// E[b_f] * E[b_a] * flops. Same multiplication order as bitops(), so
/// one-hot probabilities reproduce it exactly.
inline Real expected_cost(const FilterCost& fc, std::span<const Real> pi_alpha,
                          std::span<const Real> pi_beta, const BitPool& pool) {
  return expected_bits(pi_alpha, pool.weight_bits) * expected_bits(pi_beta, pool.activation_bits) *
         flops(fc);
}

struct CostedLayer {
  std::string name;
  FilterCost cost;
  BitPool pool;
};

/// Architecture probabilities for one searchable layer.
struct LayerProbs {
  std::vector<Real> alpha;
  std::vector<Real> beta;
};

/// Complexity risk of a network's searchable layers, normalized by the FLOPs
/// of the first searchable layer, plus the Lagrange multiplier that weighs it.
class ComplexityModel {
 public:
  ComplexityModel(std::vector<CostedLayer> layers, Real eta)
      : layers_(std::move(layers)), eta_(eta) {
    if (layers_.empty()) throw Error("complexity model needs at least one searchable layer");
    if (eta_ < 0) throw Error("eta must be nonnegative");
    normalizer_ = flops(layers_.front().cost);
  }

  Real eta() const { return eta_; }
  Real normalizer() const { return normalizer_; }
  const std::vector<CostedLayer>& layers() const { return layers_; }

  /// Budget target; carried for reporting only, the optimizer sees eta.
  std::optional<Real> gamma;

  Real network_cost(std::span<const LayerProbs> probs) const {
    check_count(probs.size());
    Real total = 0;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      total += expected_cost(layers_[k].cost, probs[k].alpha, probs[k].beta, layers_[k].pool);
    }
    return total / normalizer_;
  }

  /// Differentiable cost built from the layers' logit tensors.
  Tensor network_cost(Tape& tape, std::span<const Tensor> alphas,
                      std::span<const Tensor> betas) const {
    check_count(alphas.size());
    check_count(betas.size());
    std::vector<Real> wbits, abits;
    Tensor total;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& pool = layers_[k].pool;
      wbits.assign(pool.weight_bits.begin(), pool.weight_bits.end());
      abits.assign(pool.activation_bits.begin(), pool.activation_bits.end());
      Tensor ebf = dot_const(tape, softmax_vec(tape, alphas[k]), wbits);
      Tensor eba = dot_const(tape, softmax_vec(tape, betas[k]), abits);
      Tensor term = scale(tape, mul(tape, ebf, eba), flops(layers_[k].cost) / normalizer_);
      total = total ? add(tape, total, term) : term;
    }
    return total;
  }

  /// Closed-form d(network_cost)/d(alpha_k) through the softmax Jacobian:
  ///   flops_k/norm * E[b_a] * pi_i * (b_i - E[b_f]).
  std::vector<Real> alpha_gradient(std::size_t k, const LayerProbs& p) const {
    const auto& L = layers_.at(k);
    const Real ebf = expected_bits(p.alpha, L.pool.weight_bits);
    const Real eba = expected_bits(p.beta, L.pool.activation_bits);
    const Real c = flops(L.cost) / normalizer_ * eba;
    std::vector<Real> g(p.alpha.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = c * p.alpha[i] * (static_cast<Real>(L.pool.weight_bits[i]) - ebf);
    }
    return g;
  }

  std::vector<Real> beta_gradient(std::size_t k, const LayerProbs& p) const {
    const auto& L = layers_.at(k);
    const Real ebf = expected_bits(p.alpha, L.pool.weight_bits);
    const Real eba = expected_bits(p.beta, L.pool.activation_bits);
    const Real c = flops(L.cost) / normalizer_ * ebf;
    std::vector<Real> g(p.beta.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = c * p.beta[i] * (static_cast<Real>(L.pool.activation_bits[i]) - eba);
    }
    return g;
  }

  /// Total discrete BitOps for per-layer (weight, activation) bit-widths.
  Real discrete_bitops(std::span<const std::pair<int, int>> bits) const {
    check_count(bits.size());
    Real total = 0;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      total += bitops(layers_[k].cost, bits[k].first, bits[k].second);
    }
    return total;
  }

  /// One row per layer: layer_id,flops,E_bf,E_ba,expected_cost,normalized_cost.
  void write_cost_report(std::ostream& os, std::span<const LayerProbs> probs) const {
    check_count(probs.size());
    os << "# schema=edmips.cost_report/1\n";
    os << "layer_id,flops,E_bf,E_ba,expected_cost,normalized_cost\n";
    char buf[256];
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& L = layers_[k];
      const Real ebf = expected_bits(probs[k].alpha, L.pool.weight_bits);
      const Real eba = expected_bits(probs[k].beta, L.pool.activation_bits);
      const Real ec = expected_cost(L.cost, probs[k].alpha, probs[k].beta, L.pool);
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", k, flops(L.cost),
                    ebf, eba, ec, ec / normalizer_);
      os << buf;
    }
  }

 private:
  void check_count(std::size_t n) const {
    if (n != layers_.size()) {
      throw Error("complexity model has " + std::to_string(layers_.size()) +
                  " layers, got " + std::to_string(n) + " entries");
    }
  }

  std::vector<CostedLayer> layers_;
  Real eta_;
  Real normalizer_ = 1;
};

inline Real lagrangian(Real classification_risk, Real complexity_risk, Real eta) {
  if (eta < 0) throw Error("eta must be nonnegative");
  return classification_risk + eta * complexity_risk;
}

/// R_E + eta * R_C on the tape. With eta == 0 the cost is left off the graph.
inline Tensor lagrangian(Tape& tape, const Tensor& classification_risk,
                         const Tensor& complexity_risk, Real eta) {
  if (eta < 0) throw Error("eta must be nonnegative");
  if (eta == 0) return classification_risk;
  return add(tape, classification_risk, scale(tape, complexity_risk, eta));
}

}  // namespace edmips
