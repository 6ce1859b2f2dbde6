#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "edmips/tensor.hpp"

namespace edmips {

struct SgdOptions {
  Real momentum = 0.9;
  Real weight_decay = 0;
};

/// Momentum SGD over a fixed parameter list.
///
///   v <- momentum * v + (g + weight_decay * p)
///   p <- p - lr * v
///
/// Each optimizer owns its own velocity buffers, so weights and architecture
/// logits can be stepped with separate instances and settings.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, SgdOptions opts)
      : params_(std::move(params)), opts_(opts) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), Real{0});
  }

  void step(Real lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k];
      if (!p.has_grad()) {
        throw Error("sgd_step: parameter " + std::to_string(k) + " of shape " +
                    shape_str(p.shape()) + " has no gradient");
      }
      auto data = p.data();
      auto g = p.grad();
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        const Real d = g[i] + opts_.weight_decay * data[i];
        v[i] = opts_.momentum * v[i] + d;
        data[i] -= lr * v[i];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Tensor>& params() const { return params_; }
  const SgdOptions& options() const { return opts_; }

 private:
  std::vector<Tensor> params_;
  SgdOptions opts_;
  std::vector<std::vector<Real>> velocity_;
};

}  // namespace edmips
