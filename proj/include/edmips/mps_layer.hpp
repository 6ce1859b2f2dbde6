#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "edmips/bit_pool.hpp"
#include "edmips/ops.hpp"
#include "edmips/quantizer.hpp"
#include "edmips/tensor.hpp"

namespace edmips {

struct ConvGeometry {
  std::size_t out_channels = 1;
  std::size_t in_channels = 1;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  Shape weight_shape() const { return {out_channels, in_channels, kernel_h, kernel_w}; }
  std::size_t fan_in() const { return in_channels * kernel_h * kernel_w; }
};

enum class WeightSharing { shared, unshared };

inline std::vector<const LloydQuantizer*> quantizers_for(std::span<const int> bits,
                                                         QuantizerKind kind) {
  std::vector<const LloydQuantizer*> out;
  out.reserve(bits.size());
  for (int b : bits) out.push_back(&unit_gaussian_quantizer(b, kind));
  return out;
}

/// He-normal initialization with a caller-owned generator.
inline Tensor he_normal(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(shape);
  std::normal_distribution<Real> dist(0, std::sqrt(Real{2} / static_cast<Real>(fan_in)));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

/// One searchable filter: a weight tensor (or one per weight branch) plus the
/// architecture logits alpha (weight bit-widths) and beta (activation
/// bit-widths). The layer quantizes its own input, so it also plays the role
/// of the activation function.
class MpsConvLayer {
 public:
  MpsConvLayer(ConvGeometry geometry, BitPool pool, WeightSharing sharing,
               std::mt19937_64& rng, Real arch_init = 0.01)
      : geometry_(geometry), pool_(std::move(pool)), sharing_(sharing) {
    pool_.validate();
    Tensor w = he_normal(geometry_.weight_shape(), geometry_.fan_in(), rng);
    w.set_requires_grad();
    weights_.push_back(w);
    if (sharing_ == WeightSharing::unshared) {
      for (std::size_t i = 1; i < pool_.weight_bits.size(); ++i) {
        weights_.push_back(w.clone().set_requires_grad());
      }
    }
    alpha_ = Tensor(Shape{pool_.weight_bits.size()}, arch_init).set_requires_grad();
    beta_ = Tensor(Shape{pool_.activation_bits.size()}, arch_init).set_requires_grad();
    weight_q_ = quantizers_for(pool_.weight_bits, QuantizerKind::weight);
    act_q_ = quantizers_for(pool_.activation_bits, QuantizerKind::activation);
  }

  const ConvGeometry& geometry() const { return geometry_; }
  const BitPool& pool() const { return pool_; }
  WeightSharing sharing() const { return sharing_; }

  /// Shared mode holds one tensor; unshared mode holds one per weight branch.
  std::vector<Tensor>& weights() { return weights_; }
  const std::vector<Tensor>& weights() const { return weights_; }
  Tensor& alpha() { return alpha_; }
  const Tensor& alpha() const { return alpha_; }
  Tensor& beta() { return beta_; }
  const Tensor& beta() const { return beta_; }

  const std::vector<const LloydQuantizer*>& weight_quantizers() const { return weight_q_; }
  const std::vector<const LloydQuantizer*>& activation_quantizers() const { return act_q_; }

  std::vector<Real> alpha_probs() const { return softmax(alpha_.data()); }
  std::vector<Real> beta_probs() const { return softmax(beta_.data()); }

  Conv2dParams conv_params() const { return {geometry_.stride, geometry_.pad}; }

 private:
  ConvGeometry geometry_;
  BitPool pool_;
  WeightSharing sharing_;
  std::vector<Tensor> weights_;
  Tensor alpha_;
  Tensor beta_;
  std::vector<const LloydQuantizer*> weight_q_;
  std::vector<const LloydQuantizer*> act_q_;
};

/// Softmax of architecture logits (pure form).
inline std::vector<Real> arch_probs(std::span<const Real> logits) { return softmax(logits); }

/// Softmax of architecture logits, recorded on the tape.
inline Tensor arch_probs(Tape& tape, const Tensor& logits) { return softmax_vec(tape, logits); }

namespace detail {

inline void check_quantizers(std::span<const int> bits,
                             std::span<const LloydQuantizer* const> quantizers,
                             QuantizerKind kind, const char* op) {
  if (bits.size() != quantizers.size()) {
    throw Error(std::string(op) + ": " + std::to_string(bits.size()) + " pool entries but " +
                std::to_string(quantizers.size()) + " quantizers");
  }
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (!quantizers[i] || quantizers[i]->kind() != kind || quantizers[i]->bits() != bits[i]) {
      throw Error(std::string(op) + ": quantizer " + std::to_string(i) +
                  " does not match pool bit-width " + std::to_string(bits[i]));
    }
  }
}

/// sum_j probs[j] * a_j(x) as a single node over (x, probs).
inline Tensor mixed_activation(Tape& tape, const Tensor& x, const Tensor& probs,
                               std::vector<const LloydQuantizer*> qs) {
  Tensor y(x.shape());
  const std::size_t n = qs.size();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Real v = 0;
    for (std::size_t j = 0; j < n; ++j) v += probs[j] * qs[j]->apply(x[i]);
    y[i] = v;
  }
  if (tape.wants({&x, &probs})) {
    tape.record("composite_activation", {x, probs}, y, [x, probs, y, qs, n]() {
      auto gy = y.grad();
      std::vector<Real> gp(n, 0);
      std::span<Real> gx;
      if (x.requires_grad()) gx = x.ensure_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const Real g = gy[i];
        if (g == 0) continue;
        Real pass = 0;
        for (std::size_t j = 0; j < n; ++j) {
          gp[j] += g * qs[j]->apply(x[i]);
          if (qs[j]->passes(x[i])) pass += probs[j];
        }
        if (!gx.empty()) gx[i] += g * pass;
      }
      if (probs.requires_grad()) {
        auto dst = probs.ensure_grad();
        for (std::size_t j = 0; j < n; ++j) dst[j] += gp[j];
      }
    });
  }
  return y;
}

/// sum_i probs[i] * Q_i(W_i) as a single node over (W_0..W_k, probs). With one
/// shared tensor every branch reads W_0 and all branch gradients accumulate
/// into it.
inline Tensor mixed_weight(Tape& tape, const std::vector<Tensor>& weights, const Tensor& probs,
                           std::vector<const LloydQuantizer*> qs) {
  const std::size_t n = qs.size();
  const bool shared = weights.size() == 1;
  const Shape shape = weights.front().shape();
  std::vector<ScaledQuantizer> scaled(n);
  std::vector<Tensor> branch(n);
  Tensor y(shape);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& w = weights[shared ? 0 : i];
    scaled[i] = scaled_for(w, *qs[i]);
    branch[i] = Tensor(shape);
    for (std::size_t e = 0; e < w.numel(); ++e) {
      branch[i][e] = scaled[i].apply(w[e]);
      y[e] += probs[i] * branch[i][e];
    }
  }
  std::vector<Tensor> inputs(weights);
  inputs.push_back(probs);
  if (tape.wants(inputs)) {
    tape.record("composite_weight", inputs, y,
                [weights, probs, y, scaled, branch, n, shared]() {
      auto gy = y.grad();
      for (std::size_t i = 0; i < n; ++i) {
        const Tensor& w = weights[shared ? 0 : i];
        if (w.requires_grad()) {
          auto gw = w.ensure_grad();
          const Real p = probs[i];
          for (std::size_t e = 0; e < gw.size(); ++e) {
            if (scaled[i].passes(w[e])) gw[e] += p * gy[e];
          }
        }
        if (probs.requires_grad()) {
          Real dot = 0;
          for (std::size_t e = 0; e < gy.size(); ++e) dot += gy[e] * branch[i][e];
          probs.ensure_grad()[i] += dot;
        }
      }
    });
  }
  return y;
}

}  // namespace detail

/// Softmax-weighted mixture of half-wave quantized copies of x, one per
/// activation bit-width in the pool.
inline Tensor composite_activation(Tape& tape, const Tensor& x, const Tensor& beta,
                                   std::span<const int> pool_bits,
                                   std::span<const LloydQuantizer* const> quantizers) {
  detail::check_quantizers(pool_bits, quantizers, QuantizerKind::activation,
                           "composite_activation");
  if (beta.numel() != pool_bits.size()) {
    throw Error("composite_activation: " + std::to_string(beta.numel()) + " logits for " +
                std::to_string(pool_bits.size()) + " pool entries");
  }
  Tensor probs = arch_probs(tape, beta);
  return detail::mixed_activation(tape, x, probs, {quantizers.begin(), quantizers.end()});
}

inline Tensor composite_activation(Tape& tape, const MpsConvLayer& layer, const Tensor& x) {
  return composite_activation(tape, x, layer.beta(), layer.pool().activation_bits,
                              layer.activation_quantizers());
}

/// Composite filter sum_i pi_i Q_i(W) (shared) or sum_i pi_i Q_i(W_i) (unshared).
inline Tensor composite_weight(Tape& tape, const MpsConvLayer& layer,
                               std::span<const LloydQuantizer* const> quantizers) {
  detail::check_quantizers(layer.pool().weight_bits, quantizers, QuantizerKind::weight,
                           "composite_weight");
  const std::size_t expected =
      layer.sharing() == WeightSharing::shared ? 1 : layer.pool().weight_bits.size();
  if (layer.weights().size() != expected) {
    throw Error("composite_weight: " + std::to_string(layer.weights().size()) +
                " weight tensors for a layer expecting " + std::to_string(expected));
  }
  Tensor probs = arch_probs(tape, layer.alpha());
  return detail::mixed_weight(tape, layer.weights(), probs, {quantizers.begin(), quantizers.end()});
}

inline Tensor composite_weight(Tape& tape, const MpsConvLayer& layer) {
  return composite_weight(tape, layer, layer.weight_quantizers());
}

/// The efficient search forward: one convolution of the composite activation
/// with the composite filter.
inline Tensor forward(Tape& tape, const MpsConvLayer& layer, const Tensor& x) {
  Tensor a = composite_activation(tape, layer, x);
  Tensor w = composite_weight(tape, layer);
  return conv2d(tape, a, w, layer.conv_params());
}

/// Reference forward that runs every weight branch as its own convolution
/// against the composite activation and mixes the outputs. `alpha_weights`
/// replaces softmax(alpha) with arbitrary (possibly unnormalized) constants.
inline Tensor parallel_forward_reference(Tape& tape, const MpsConvLayer& layer, const Tensor& x,
                                         std::optional<std::vector<Real>> alpha_weights = {}) {
  Tensor a = composite_activation(tape, layer, x);
  const auto& qs = layer.weight_quantizers();
  std::vector<Tensor> outputs;
  for (std::size_t i = 0; i < qs.size(); ++i) {
    const Tensor& w = layer.weights()[layer.sharing() == WeightSharing::shared ? 0 : i];
    Tensor qw = quantize_weights(tape, w, *qs[i]);
    outputs.push_back(conv2d(tape, a, qw, layer.conv_params()));
  }
  Tensor probs;
  if (alpha_weights) {
    if (alpha_weights->size() != qs.size()) {
      throw Error("parallel_forward_reference: wrong number of branch weights");
    }
    probs = Tensor::vector(*alpha_weights);
  } else {
    probs = arch_probs(tape, layer.alpha());
  }
  return mix(tape, outputs, probs);
}

}  // namespace edmips
