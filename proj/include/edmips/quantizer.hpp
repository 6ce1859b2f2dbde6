#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <limits>
#include <mutex>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "edmips/tensor.hpp"

namespace edmips {

enum class QuantizerKind { weight, activation };

inline const char* to_string(QuantizerKind k) {
  return k == QuantizerKind::weight ? "weight" : "activation";
}

inline constexpr int kMinBits = 1;
inline constexpr int kMaxBits = 8;

/// Uniform-step scalar quantizer for the unit Gaussian.
///
/// Weight quantizers have 2^b levels symmetric about zero,
/// q_i = (i - (2^b - 1)/2) * step. Activation quantizers have 2^b levels
/// {0, step, ..., (2^b - 1) * step} and send every non-positive input to 0.
/// Thresholds are level midpoints with t_0 = -inf and t_n = +inf; an input
/// lying exactly on a threshold goes to the upper cell.
class LloydQuantizer {
 public:
  static LloydQuantizer uniform(int bits, QuantizerKind kind, Real step) {
    if (bits < kMinBits || bits > kMaxBits) {
      throw Error("quantizer bit-width " + std::to_string(bits) + " outside [1,8]");
    }
    if (!(step > 0)) throw Error("quantizer step must be positive");
    LloydQuantizer q;
    q.bits_ = bits;
    q.kind_ = kind;
    q.step_ = step;
    const std::size_t n = std::size_t{1} << bits;
    q.levels_.resize(n);
    for (std::size_t i = 0; i < n; ++i) q.levels_[i] = q.level_value(i);
    q.thresholds_.resize(n + 1);
    q.thresholds_.front() = -std::numeric_limits<Real>::infinity();
    q.thresholds_.back() = std::numeric_limits<Real>::infinity();
    for (std::size_t i = 1; i < n; ++i) {
      q.thresholds_[i] = (q.levels_[i - 1] + q.levels_[i]) / 2;
    }
    return q;
  }

  int bits() const { return bits_; }
  QuantizerKind kind() const { return kind_; }
  Real step() const { return step_; }
  std::size_t level_count() const { return levels_.size(); }
  const std::vector<Real>& levels() const { return levels_; }
  const std::vector<Real>& thresholds() const { return thresholds_; }
  Real max_level() const { return levels_.back(); }
  /// Mean squared error of this quantizer under N(0,1).
  Real mse() const { return mse_; }

  std::size_t cell(Real u) const {
    const Real n = static_cast<Real>(levels_.size());
    Real pos;
    if (kind_ == QuantizerKind::weight) {
      pos = std::floor(u / step_ + n / 2);
    } else {
      if (u <= 0) return 0;
      pos = std::floor(u / step_ + Real{0.5});
    }
    if (!(pos > 0)) return 0;
    if (pos >= n - 1) return levels_.size() - 1;
    return static_cast<std::size_t>(pos);
  }

  Real apply(Real u) const { return std::isnan(u) ? u : levels_[cell(u)]; }

  /// Upper end of the straight-through band in unit scale. Weights pass
  /// gradients for |u| <= bound, activations for 0 < u <= bound.
  Real pass_bound() const {
    if (kind_ == QuantizerKind::weight) {
      return thresholds_[levels_.size() - 1] + step_ / 2;
    }
    return max_level() + step_ / 2;
  }

  bool passes(Real u) const {
    if (kind_ == QuantizerKind::weight) return std::abs(u) <= pass_bound();
    return u > 0 && u <= pass_bound();
  }

 private:
  friend LloydQuantizer design_unit_gaussian_quantizer(int, QuantizerKind);

  Real level_value(std::size_t i) const {
    if (kind_ == QuantizerKind::activation) return static_cast<Real>(i) * step_;
    const Real n = static_cast<Real>(std::size_t{1} << bits_);
    return (static_cast<Real>(i) - (n - 1) / 2) * step_;
  }

  int bits_ = 1;
  QuantizerKind kind_ = QuantizerKind::weight;
  Real step_ = 1;
  std::vector<Real> levels_;
  std::vector<Real> thresholds_;
  Real mse_ = 0;
};

namespace detail {

inline Real normal_pdf(Real x) {
  if (std::isinf(x)) return 0;
  return std::exp(-x * x / 2) / std::sqrt(2 * std::numbers::pi_v<Real>);
}

inline Real normal_cdf(Real x) { return std::erfc(-x / std::numbers::sqrt2_v<Real>) / 2; }

// Closed form of the integral of (x - q)^2 phi(x) over (a, b].
inline Real cell_sq_error(Real a, Real b, Real q) {
  auto x_pdf = [](Real x) { return std::isinf(x) ? Real{0} : x * normal_pdf(x); };
  return (1 + q * q) * (normal_cdf(b) - normal_cdf(a)) - (x_pdf(b) - x_pdf(a)) +
         2 * q * (normal_pdf(b) - normal_pdf(a));
}

}  // namespace detail

/// E[(x - Q(x))^2] for x ~ N(0,1), computed cell by cell in closed form. For
/// activation quantizers the reference signal is the half-wave max(x, 0).
inline Real uniform_quantizer_mse(int bits, QuantizerKind kind, Real step) {
  const LloydQuantizer q = LloydQuantizer::uniform(bits, kind, step);
  const auto& t = q.thresholds();
  const auto& lv = q.levels();
  Real total = 0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    Real lo = t[i];
    if (kind == QuantizerKind::activation && i == 0) lo = 0;
    total += detail::cell_sq_error(lo, t[i + 1], lv[i]);
  }
  return total;
}

/// MSE-optimal uniform-step quantizer for N(0,1) (weights) or its half-wave
/// rectification (activations). The step is found by a coarse scan over
/// [1e-3, 4] followed by golden-section refinement around the best bracket.
inline LloydQuantizer design_unit_gaussian_quantizer(int bits, QuantizerKind kind) {
  if (bits < kMinBits || bits > kMaxBits) {
    throw Error("quantizer bit-width " + std::to_string(bits) + " outside [1,8]");
  }
  constexpr Real lo = 1e-3, hi = 4;
  constexpr int scan = 400;
  auto f = [&](Real s) { return uniform_quantizer_mse(bits, kind, s); };
  int best = 0;
  Real best_val = f(lo);
  for (int k = 1; k <= scan; ++k) {
    const Real v = f(lo + (hi - lo) * k / scan);
    if (v < best_val) best_val = v, best = k;
  }
  Real a = lo + (hi - lo) * std::max(best - 1, 0) / scan;
  Real b = lo + (hi - lo) * std::min(best + 1, scan) / scan;
  const Real inv_phi = (std::sqrt(Real{5}) - 1) / 2;
  Real c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  Real fc = f(c), fd = f(d);
  for (int it = 0; it < 200 && (b - a) > 1e-13; ++it) {
    if (fc < fd) {
      b = d, d = c, fd = fc;
      c = b - inv_phi * (b - a), fc = f(c);
    } else {
      a = c, c = d, fc = fd;
      d = a + inv_phi * (b - a), fd = f(d);
    }
  }
  const Real step = (a + b) / 2;
  LloydQuantizer q = LloydQuantizer::uniform(bits, kind, step);
  q.mse_ = uniform_quantizer_mse(bits, kind, step);
  return q;
}

/// Designed quantizers are immutable; this table builds each one once.
inline const LloydQuantizer& unit_gaussian_quantizer(int bits, QuantizerKind kind) {
  if (bits < kMinBits || bits > kMaxBits) {
    throw Error("quantizer bit-width " + std::to_string(bits) + " outside [1,8]");
  }
  static std::array<std::array<LloydQuantizer, kMaxBits + 1>, 2> table;
  static std::array<std::array<std::once_flag, kMaxBits + 1>, 2> once;
  const int k = kind == QuantizerKind::weight ? 0 : 1;
  std::call_once(once[k][bits], [&] { table[k][bits] = design_unit_gaussian_quantizer(bits, kind); });
  return table[k][bits];
}

/// Population standard deviation of a weight tensor.
inline Real weight_sigma(std::span<const Real> w) {
  Real mean = 0;
  for (Real v : w) mean += v;
  mean /= static_cast<Real>(w.size());
  Real sq = 0;
  for (Real v : w) sq += (v - mean) * (v - mean);
  return std::sqrt(sq / static_cast<Real>(w.size()));
}

inline constexpr Real kDegenerateSigma = 1e-12;

/// A unit-Gaussian weight quantizer rescaled to levels sigma*q_i and
/// thresholds sigma*t_i.
struct ScaledQuantizer {
  const LloydQuantizer* base = nullptr;
  Real sigma = 1;

  bool degenerate() const { return sigma < kDegenerateSigma; }
  Real apply(Real x) const { return degenerate() ? Real{0} : sigma * base->apply(x / sigma); }
  bool passes(Real x) const { return degenerate() || base->passes(x / sigma); }
};

inline ScaledQuantizer scaled_for(const Tensor& w, const LloydQuantizer& q) {
  return {&q, weight_sigma(w.data())};
}

/// Weight quantization with a fixed scale. Backward is straight-through
/// inside the pass band and zero outside it.
inline Tensor quantize_weights(Tape& tape, const Tensor& w, const ScaledQuantizer& sq) {
  if (sq.base->kind() != QuantizerKind::weight) {
    throw Error("quantize_weights needs a weight quantizer");
  }
  Tensor y(w.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) y[i] = sq.apply(w[i]);
  if (tape.wants({&w})) {
    tape.record("quantize_weights", {w}, y, [w, y, sq]() {
      auto gw = w.ensure_grad();
      auto gy = y.grad();
      for (std::size_t i = 0; i < gw.size(); ++i) {
        if (sq.passes(w[i])) gw[i] += gy[i];
      }
    });
  }
  return y;
}

/// Weight quantization with sigma estimated from w itself.
inline Tensor quantize_weights(Tape& tape, const Tensor& w, const LloydQuantizer& q) {
  return quantize_weights(tape, w, scaled_for(w, q));
}

/// Half-wave activation quantization with a clipped-ReLU backward.
inline Tensor quantize_activations(Tape& tape, const Tensor& x, const LloydQuantizer& q) {
  if (q.kind() != QuantizerKind::activation) {
    throw Error("quantize_activations needs an activation quantizer");
  }
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = q.apply(x[i]);
  if (tape.wants({&x})) {
    const LloydQuantizer* qp = &q;
    tape.record("quantize_activations", {x}, y, [x, y, qp]() {
      auto gx = x.ensure_grad();
      auto gy = y.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (qp->passes(x[i])) gx[i] += gy[i];
      }
    });
  }
  return y;
}

/// Audit table with columns bits,kind,index,level,threshold. The threshold
/// column holds the lower boundary t_i of cell i.
inline void write_quantizer_table_csv(std::ostream& os,
                                      std::span<const LloydQuantizer* const> quantizers) {
  os << "# schema=edmips.quantizer_table/1\n";
  os << "bits,kind,index,level,threshold\n";
  char buf[64];
  auto num = [&](Real v) -> std::string {
    if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  };
  for (const auto* q : quantizers) {
    for (std::size_t i = 0; i < q->level_count(); ++i) {
      os << q->bits() << ',' << to_string(q->kind()) << ',' << i << ','
         << num(q->levels()[i]) << ',' << num(q->thresholds()[i]) << '\n';
    }
  }
}

}  // namespace edmips
