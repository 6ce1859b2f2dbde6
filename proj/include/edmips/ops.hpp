#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "edmips/gemm.hpp"
#include "edmips/tensor.hpp"

namespace edmips {

// ---------------------------------------------------------------------------
// Convolution via im2col lowering
// ---------------------------------------------------------------------------

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

namespace detail {

struct ConvDims {
  std::size_t n, cin, h, w, cout, kh, kw, ho, wo;
  std::size_t kdim() const { return cin * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
};

inline ConvDims conv_dims(const Shape& xs, const Shape& ws, Conv2dParams p) {
  auto mismatch = [&](const std::string& why) {
    return ShapeError("conv2d: " + why + " (input " + shape_str(xs) +
                      ", weight " + shape_str(ws) + ")");
  };
  if (xs.size() != 4 || ws.size() != 4) throw mismatch("expected rank-4 tensors");
  if (xs[1] != ws[1]) throw mismatch("input channels differ");
  if (p.stride < 1) throw mismatch("stride must be >= 1");
  ConvDims d{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0};
  const std::size_t hp = d.h + 2 * p.pad, wp = d.w + 2 * p.pad;
  if (hp < d.kh || wp < d.kw) throw mismatch("kernel larger than padded input");
  d.ho = (hp - d.kh) / p.stride + 1;
  d.wo = (wp - d.kw) / p.stride + 1;
  return d;
}

// cols[(c*kh + i)*kw + j, oy*wo + ox] = x[c, oy*s + i - pad, ox*s + j - pad]
inline void im2col(const Real* x, const ConvDims& d, Conv2dParams p, Real* cols) {
  const std::size_t P = d.pixels();
  for (std::size_t c = 0; c < d.cin; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        Real* row = cols + ((c * d.kh + i) * d.kw + j) * P;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const long iy = static_cast<long>(oy * p.stride + i) - static_cast<long>(p.pad);
          Real* out = row + oy * d.wo;
          if (iy < 0 || iy >= static_cast<long>(d.h)) {
            std::fill(out, out + d.wo, Real{0});
            continue;
          }
          const Real* in = x + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const long ix = static_cast<long>(ox * p.stride + j) - static_cast<long>(p.pad);
            out[ox] = (ix < 0 || ix >= static_cast<long>(d.w)) ? Real{0} : in[ix];
          }
        }
      }
    }
  }
}

inline void col2im_acc(const Real* cols, const ConvDims& d, Conv2dParams p, Real* dx) {
  const std::size_t P = d.pixels();
  for (std::size_t c = 0; c < d.cin; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        const Real* row = cols + ((c * d.kh + i) * d.kw + j) * P;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const long iy = static_cast<long>(oy * p.stride + i) - static_cast<long>(p.pad);
          if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
          Real* out = dx + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const long ix = static_cast<long>(ox * p.stride + j) - static_cast<long>(p.pad);
            if (ix >= 0 && ix < static_cast<long>(d.w)) out[ix] += row[oy * d.wo + ox];
          }
        }
      }
    }
  }
}

inline void accumulate(const Tensor& t, std::span<const Real> g) {
  auto dst = t.ensure_grad();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

/// Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw].
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, Conv2dParams p = {}) {
  const auto d = detail::conv_dims(x.shape(), w.shape(), p);
  Tensor y({d.n, d.cout, d.ho, d.wo});
  const std::size_t K = d.kdim(), P = d.pixels();
  std::vector<Real> cols(K * P);
  for (std::size_t n = 0; n < d.n; ++n) {
    detail::im2col(x.ptr() + n * d.cin * d.h * d.w, d, p, cols.data());
    detail::gemm_nn_acc(d.cout, P, K, w.ptr(), cols.data(), y.ptr() + n * d.cout * P);
  }
  if (tape.wants({&x, &w})) {
    tape.record("conv2d", {x, w}, y, [x, w, y, d, p]() {
      const std::size_t K = d.kdim(), P = d.pixels();
      std::vector<Real> cols(K * P), dcols(K * P), scratch;
      auto gy = y.grad();
      for (std::size_t n = 0; n < d.n; ++n) {
        const Real* gyn = gy.data() + n * d.cout * P;
        if (w.requires_grad()) {
          detail::im2col(x.ptr() + n * d.cin * d.h * d.w, d, p, cols.data());
          detail::gemm_nt_acc(d.cout, K, P, gyn, cols.data(), w.ensure_grad().data(),
                              scratch);
        }
        if (x.requires_grad()) {
          std::fill(dcols.begin(), dcols.end(), Real{0});
          detail::gemm_tn_acc(K, P, d.cout, w.ptr(), gyn, dcols.data());
          detail::col2im_acc(dcols.data(), d, p,
                             x.ensure_grad().data() + n * d.cin * d.h * d.w);
        }
      }
    });
  }
  return y;
}

/// y = x w^T + b for x[N,Din], w[Dout,Din], b[Dout].
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(1) ||
      b.dim(0) != w.dim(0)) {
    throw ShapeError("linear: incompatible shapes input " + shape_str(x.shape()) +
                     ", weight " + shape_str(w.shape()) + ", bias " +
                     shape_str(b.shape()));
  }
  const std::size_t N = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
  Tensor y({N, Dout});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy(b.data().begin(), b.data().end(), y.ptr() + n * Dout);
  }
  std::vector<Real> scratch;
  detail::gemm_nt_acc(N, Dout, Din, x.ptr(), w.ptr(), y.ptr(), scratch);
  if (tape.wants({&x, &w, &b})) {
    tape.record("linear", {x, w, b}, y, [x, w, b, y, N, Din, Dout]() {
      auto gy = y.grad();
      if (x.requires_grad()) {
        detail::gemm_nn_acc(N, Din, Dout, gy.data(), w.ptr(), x.ensure_grad().data());
      }
      if (w.requires_grad()) {
        detail::gemm_tn_acc(Dout, Din, N, gy.data(), x.ptr(), w.ensure_grad().data());
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t j = 0; j < Dout; ++j) gb[j] += gy[n * Dout + j];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class Mode { train, eval };

/// Running statistics owned by one BatchNorm layer.
struct BatchNormStats {
  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean(Shape{channels}, 0), running_var(Shape{channels}, 1) {}
  Tensor running_mean;
  Tensor running_var;
  Real momentum = 0.1;
  Real eps = 1e-5;
};

/// Per-channel normalization of x[N,C] or x[N,C,H,W].
inline Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, BatchNormStats& stats, Mode mode) {
  if ((x.rank() != 2 && x.rank() != 4) || gamma.numel() != x.dim(1) ||
      beta.numel() != x.dim(1) || stats.running_mean.numel() != x.dim(1)) {
    throw ShapeError("batch_norm: channel mismatch, input " + shape_str(x.shape()) +
                     ", gamma " + shape_str(gamma.shape()) + ", beta " +
                     shape_str(beta.shape()));
  }
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t S = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const std::size_t M = N * S;
  std::vector<Real> mean(C), invstd(C);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      Real sum = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const Real* p = x.ptr() + (n * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) sum += p[s];
      }
      const Real mu = sum / static_cast<Real>(M);
      Real sq = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const Real* p = x.ptr() + (n * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) sq += (p[s] - mu) * (p[s] - mu);
      }
      const Real var = sq / static_cast<Real>(M);
      mean[c] = mu;
      invstd[c] = 1 / std::sqrt(var + stats.eps);
      const Real unbiased = M > 1 ? sq / static_cast<Real>(M - 1) : var;
      stats.running_mean[c] = (1 - stats.momentum) * stats.running_mean[c] + stats.momentum * mu;
      stats.running_var[c] = (1 - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = stats.running_mean[c];
      invstd[c] = 1 / std::sqrt(stats.running_var[c] + stats.eps);
    }
  }
  Tensor y(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const Real* p = x.ptr() + (n * C + c) * S;
      Real* q = y.ptr() + (n * C + c) * S;
      const Real a = gamma[c] * invstd[c], sh = beta[c] - a * mean[c];
      for (std::size_t s = 0; s < S; ++s) q[s] = a * p[s] + sh;
    }
  }
  if (tape.wants({&x, &gamma, &beta})) {
    tape.record("batch_norm", {x, gamma, beta}, y,
                [x, gamma, beta, y, mean, invstd, N, C, S, M, mode]() {
      auto gy = y.grad();
      std::vector<Real> sum_g(C, 0), sum_gx(C, 0);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const Real* p = x.ptr() + (n * C + c) * S;
          const Real* g = gy.data() + (n * C + c) * S;
          for (std::size_t s = 0; s < S; ++s) {
            sum_g[c] += g[s];
            sum_gx[c] += g[s] * (p[s] - mean[c]) * invstd[c];
          }
        }
      }
      if (gamma.requires_grad()) {
        auto gg = gamma.ensure_grad();
        for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
      }
      if (beta.requires_grad()) {
        auto gb = beta.ensure_grad();
        for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
      }
      if (!x.requires_grad()) return;
      auto gx = x.ensure_grad();
      const Real inv_m = 1 / static_cast<Real>(M);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const Real* p = x.ptr() + (n * C + c) * S;
          const Real* g = gy.data() + (n * C + c) * S;
          Real* out = gx.data() + (n * C + c) * S;
          const Real k = gamma[c] * invstd[c];
          for (std::size_t s = 0; s < S; ++s) {
            if (mode == Mode::eval) {
              out[s] += k * g[s];
            } else {
              const Real xhat = (p[s] - mean[c]) * invstd[c];
              out[s] += k * (g[s] - inv_m * sum_g[c] - xhat * inv_m * sum_gx[c]);
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Activations, pooling, reshaping
// ---------------------------------------------------------------------------

inline Tensor relu(Tape& tape, const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = (x[i] > 0 || std::isnan(x[i])) ? x[i] : 0;
  if (tape.wants({&x})) {
    tape.record("relu", {x}, y, [x, y]() {
      auto gx = x.ensure_grad();
      auto gy = y.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (x[i] > 0) gx[i] += gy[i];
      }
    });
  }
  return y;
}

struct Pool2dParams {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

namespace detail {

inline Shape pool_shape(const std::string& op, const Shape& xs, Pool2dParams p) {
  if (xs.size() != 4 || p.kernel == 0 || p.stride == 0 || xs[2] < p.kernel ||
      xs[3] < p.kernel) {
    throw ShapeError(op + ": invalid input " + shape_str(xs) + " for kernel " +
                     std::to_string(p.kernel));
  }
  return {xs[0], xs[1], (xs[2] - p.kernel) / p.stride + 1,
          (xs[3] - p.kernel) / p.stride + 1};
}

}  // namespace detail

inline Tensor max_pool2d(Tape& tape, const Tensor& x, Pool2dParams p = {}) {
  const Shape ys = detail::pool_shape("max_pool2d", x.shape(), p);
  Tensor y(ys);
  const std::size_t H = x.dim(2), W = x.dim(3), Ho = ys[2], Wo = ys[3];
  std::vector<std::size_t> argmax(y.numel());
  for (std::size_t nc = 0; nc < ys[0] * ys[1]; ++nc) {
    const Real* in = x.ptr() + nc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (oy * p.stride) * W + ox * p.stride;
        for (std::size_t i = 0; i < p.kernel; ++i) {
          for (std::size_t j = 0; j < p.kernel; ++j) {
            const std::size_t idx = (oy * p.stride + i) * W + ox * p.stride + j;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = nc * Ho * Wo + oy * Wo + ox;
        y[o] = in[best];
        argmax[o] = nc * H * W + best;
      }
    }
  }
  if (tape.wants({&x})) {
    tape.record("max_pool2d", {x}, y, [x, y, argmax]() {
      auto gx = x.ensure_grad();
      auto gy = y.grad();
      for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
    });
  }
  return y;
}

inline Tensor avg_pool2d(Tape& tape, const Tensor& x, Pool2dParams p = {}) {
  const Shape ys = detail::pool_shape("avg_pool2d", x.shape(), p);
  Tensor y(ys);
  const std::size_t H = x.dim(2), W = x.dim(3), Ho = ys[2], Wo = ys[3];
  const Real inv = 1 / static_cast<Real>(p.kernel * p.kernel);
  for (std::size_t nc = 0; nc < ys[0] * ys[1]; ++nc) {
    const Real* in = x.ptr() + nc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        Real s = 0;
        for (std::size_t i = 0; i < p.kernel; ++i) {
          for (std::size_t j = 0; j < p.kernel; ++j) {
            s += in[(oy * p.stride + i) * W + ox * p.stride + j];
          }
        }
        y[nc * Ho * Wo + oy * Wo + ox] = s * inv;
      }
    }
  }
  if (tape.wants({&x})) {
    tape.record("avg_pool2d", {x}, y, [x, y, p, H, W, Ho, Wo, inv]() {
      auto gx = x.ensure_grad();
      auto gy = y.grad();
      const std::size_t planes = gy.size() / (Ho * Wo);
      for (std::size_t nc = 0; nc < planes; ++nc) {
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const Real g = gy[nc * Ho * Wo + oy * Wo + ox] * inv;
            for (std::size_t i = 0; i < p.kernel; ++i) {
              for (std::size_t j = 0; j < p.kernel; ++j) {
                gx[nc * H * W + (oy * p.stride + i) * W + ox * p.stride + j] += g;
              }
            }
          }
        }
      }
    });
  }
  return y;
}

/// Same data, new shape. The result does not alias the input.
inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor y(std::move(shape));
  std::copy(x.data().begin(), x.data().end(), y.data().begin());
  if (tape.wants({&x})) {
    tape.record("reshape", {x}, y, [x, y]() { detail::accumulate(x, y.grad()); });
  }
  return y;
}

inline Tensor flatten(Tape& tape, const Tensor& x) {
  return reshape(tape, x, {x.dim(0), x.numel() / x.dim(0)});
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

inline std::vector<Real> softmax(std::span<const Real> logits) {
  if (logits.empty()) throw ShapeError("softmax of an empty vector");
  const Real mx = *std::max_element(logits.begin(), logits.end());
  std::vector<Real> p(logits.size());
  Real z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

/// Softmax of a rank-1 tensor.
inline Tensor softmax_vec(Tape& tape, const Tensor& logits) {
  if (logits.rank() != 1) {
    throw ShapeError("softmax_vec expects a vector, got " + shape_str(logits.shape()));
  }
  Tensor y = Tensor::vector(softmax(logits.data()));
  if (tape.wants({&logits})) {
    tape.record("softmax_vec", {logits}, y, [logits, y]() {
      auto gy = y.grad();
      Real dot = 0;
      for (std::size_t i = 0; i < gy.size(); ++i) dot += gy[i] * y[i];
      auto gx = logits.ensure_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += y[i] * (gy[i] - dot);
    });
  }
  return y;
}

/// Mean softmax cross-entropy of logits[N,K] against integer labels.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<Real> probs(N * K);
  Real total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K) {
      throw Error("cross_entropy: label " + std::to_string(labels[n]) +
                  " out of range for " + std::to_string(K) + " classes");
    }
    auto p = softmax(logits.data().subspan(n * K, K));
    const Real* row = logits.ptr() + n * K;
    const Real mx = *std::max_element(row, row + K);
    Real z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    total += -(row[labels[n]] - mx - std::log(z));
    std::copy(p.begin(), p.end(), probs.begin() + n * K);
  }
  Tensor loss = Tensor::scalar(total / static_cast<Real>(N));
  if (tape.wants({&logits})) {
    std::vector<int> lab(labels.begin(), labels.end());
    tape.record("cross_entropy", {logits}, loss, [logits, loss, probs, lab, N, K]() {
      const Real g = loss.grad()[0] / static_cast<Real>(N);
      auto gx = logits.ensure_grad();
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) {
          const Real target = static_cast<int>(k) == lab[n] ? 1 : 0;
          gx[n * K + k] += g * (probs[n * K + k] - target);
        }
      }
    });
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Elementwise and reduction helpers
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] + b[i];
  if (tape.wants({&a, &b})) {
    tape.record("add", {a, b}, y, [a, b, y]() {
      if (a.requires_grad()) detail::accumulate(a, y.grad());
      if (b.requires_grad()) detail::accumulate(b, y.grad());
    });
  }
  return y;
}

/// Elementwise product of equally shaped tensors.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] * b[i];
  if (tape.wants({&a, &b})) {
    tape.record("mul", {a, b}, y, [a, b, y]() {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * a[i];
      }
    });
  }
  return y;
}

inline Tensor scale(Tape& tape, const Tensor& x, Real factor) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = x[i] * factor;
  if (tape.wants({&x})) {
    tape.record("scale", {x}, y, [x, y, factor]() {
      auto gx = x.ensure_grad();
      auto gy = y.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * factor;
    });
  }
  return y;
}

inline Tensor sum(Tape& tape, const Tensor& x) {
  Real s = 0;
  for (Real v : x.data()) s += v;
  Tensor y = Tensor::scalar(s);
  if (tape.wants({&x})) {
    tape.record("sum", {x}, y, [x, y]() {
      const Real g = y.grad()[0];
      for (auto& v : x.ensure_grad()) v += g;
    });
  }
  return y;
}

/// Scalar <x, c> for a vector tensor x and constant coefficients c.
inline Tensor dot_const(Tape& tape, const Tensor& x, std::span<const Real> c) {
  if (x.numel() != c.size()) {
    throw ShapeError("dot_const: length " + std::to_string(x.numel()) + " vs " +
                     std::to_string(c.size()));
  }
  Real s = 0;
  for (std::size_t i = 0; i < c.size(); ++i) s += x[i] * c[i];
  Tensor y = Tensor::scalar(s);
  if (tape.wants({&x})) {
    std::vector<Real> coeff(c.begin(), c.end());
    tape.record("dot_const", {x}, y, [x, y, coeff]() {
      const Real g = y.grad()[0];
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < coeff.size(); ++i) gx[i] += g * coeff[i];
    });
  }
  return y;
}

/// sum_i weights[i] * terms[i]; weights is a vector tensor, terms share a shape.
inline Tensor mix(Tape& tape, const std::vector<Tensor>& terms, const Tensor& weights) {
  if (terms.empty() || weights.rank() != 1 || weights.numel() != terms.size()) {
    throw ShapeError("mix: " + std::to_string(terms.size()) + " terms vs weights " +
                     (weights ? shape_str(weights.shape()) : std::string("<none>")));
  }
  for (const auto& t : terms) {
    if (t.shape() != terms.front().shape()) {
      throw ShapeError("mix: term shapes " + shape_str(t.shape()) + " and " +
                       shape_str(terms.front().shape()));
    }
  }
  Tensor y(terms.front().shape());
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const Real wk = weights[k];
    const Real* src = terms[k].ptr();
    Real* dst = y.ptr();
    for (std::size_t i = 0; i < y.numel(); ++i) dst[i] += wk * src[i];
  }
  std::vector<Tensor> inputs(terms);
  inputs.push_back(weights);
  if (tape.wants(inputs)) {
    tape.record("mix", inputs, y, [terms, weights, y]() {
      auto gy = y.grad();
      for (std::size_t k = 0; k < terms.size(); ++k) {
        Tensor tk = terms[k];
        if (tk.requires_grad()) {
          auto g = tk.ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += weights[k] * gy[i];
        }
        if (weights.requires_grad()) {
          Real dot = 0;
          for (std::size_t i = 0; i < gy.size(); ++i) dot += gy[i] * tk[i];
          weights.ensure_grad()[k] += dot;
        }
      }
    });
  }
  return y;
}

}  // namespace edmips
