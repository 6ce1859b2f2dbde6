#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "edmips/tensor.hpp"

namespace edmips {

/// In-memory labelled samples stored contiguously.
struct Dataset {
  Shape sample_shape;
  std::size_t num_classes = 0;
  std::vector<Real> samples;  // size() * numel(sample_shape)
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return shape_numel(sample_shape); }
  std::span<const Real> sample(std::size_t i) const {
    return {samples.data() + i * sample_numel(), sample_numel()};
  }
};

struct Batch {
  Tensor x;
  std::vector<int> y;
};

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error("make_batch: empty index list");
  Shape shape{indices.size()};
  shape.insert(shape.end(), ds.sample_shape.begin(), ds.sample_shape.end());
  Batch b{Tensor(shape), {}};
  const std::size_t m = ds.sample_numel();
  auto dst = b.x.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= ds.size()) {
      throw Error("make_batch: index " + std::to_string(indices[k]) + " out of range");
    }
    auto src = ds.sample(indices[k]);
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(k * m));
    b.y.push_back(ds.labels[indices[k]]);
  }
  return b;
}

/// Unbiased index in [0, n) by rejection; portable across standard libraries.
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t range = n;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
  std::uint64_t r;
  do r = rng();
  while (r >= limit);
  return static_cast<std::size_t>(r % range);
}

/// Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_index(rng, i)]);
  return p;
}

/// Portable standard normal draw (Box-Muller on 53-bit uniforms).
inline Real normal_draw(std::mt19937_64& rng) {
  auto u01 = [&] { return (static_cast<Real>(rng() >> 11) + 0.5) * 0x1.0p-53; };
  const Real u = u01(), v = u01();
  return std::sqrt(-2 * std::log(u)) * std::cos(2 * std::numbers::pi_v<Real> * v);
}

// ---------------------------------------------------------------- IDX files

class IdxError : public Error {
 public:
  IdxError(const std::string& path, std::size_t offset, const std::string& what)
      : Error(path + ": offset " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct IdxArray {
  Shape dims;
  std::vector<Real> values;
};

/// Parses an IDX file: two zero bytes, a type code, a dimension count, then
/// big-endian u32 extents and big-endian values.
inline IdxArray parse_idx(const std::vector<unsigned char>& bytes, const std::string& path = "<idx>") {
  if (bytes.size() < 4) throw IdxError(path, 0, "file too short for the IDX magic");
  if (bytes[0] != 0 || bytes[1] != 0) throw IdxError(path, 0, "bad IDX magic, expected 00 00");
  const unsigned type = bytes[2];
  std::size_t width;
  switch (type) {
    case 0x08: case 0x09: width = 1; break;
    case 0x0B: width = 2; break;
    case 0x0C: case 0x0D: width = 4; break;
    case 0x0E: width = 8; break;
    default: throw IdxError(path, 2, "unknown IDX type code " + std::to_string(type));
  }
  const std::size_t rank = bytes[3];
  if (rank == 0) throw IdxError(path, 3, "IDX rank must be at least 1");
  std::size_t off = 4;
  auto be = [&](std::size_t at, std::size_t n) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v = (v << 8) | bytes[at + i];
    return v;
  };
  IdxArray out;
  for (std::size_t d = 0; d < rank; ++d) {
    if (off + 4 > bytes.size()) throw IdxError(path, off, "truncated dimension header");
    const std::uint64_t extent = be(off, 4);
    if (extent == 0) throw IdxError(path, off, "zero extent in dimension " + std::to_string(d));
    out.dims.push_back(extent);
    off += 4;
  }
  const std::size_t count = shape_numel(out.dims);
  if (bytes.size() - off != count * width) {
    throw IdxError(path, off, "payload has " + std::to_string(bytes.size() - off) +
                                  " bytes, dimensions require " + std::to_string(count * width));
  }
  out.values.resize(count);
  for (std::size_t i = 0; i < count; ++i, off += width) {
    const std::uint64_t raw = be(off, width);
    Real v;
    switch (type) {
      case 0x08: v = static_cast<Real>(raw); break;
      case 0x09: v = static_cast<Real>(static_cast<std::int8_t>(raw)); break;
      case 0x0B: v = static_cast<Real>(static_cast<std::int16_t>(raw)); break;
      case 0x0C: v = static_cast<Real>(static_cast<std::int32_t>(raw)); break;
      case 0x0D: {
        const auto u = static_cast<std::uint32_t>(raw);
        float f;
        std::memcpy(&f, &u, 4);
        v = f;
        break;
      }
      default: {
        double f;
        std::memcpy(&f, &raw, 8);
        v = f;
      }
    }
    out.values[i] = v;
  }
  return out;
}

inline IdxArray read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open IDX file " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_idx(bytes, path);
}

// ------------------------------------------------------------ dataset specs

struct IdxSource {
  std::string images;
  std::string labels;
  std::size_t num_classes = 10;
};

/// Rank-1 `dims` gives Gaussian blobs with centres on a circle; rank-3
/// `dims` ([C,H,W]) gives shifted, noisy copies of a per-class texture.
struct SyntheticSource {
  std::size_t classes = 10;
  Shape dims{1, 28, 28};
  std::size_t samples = 2000;
  std::uint64_t seed = 0;
  Real noise = 0.5;
  std::size_t max_shift = 2;
};

struct DatasetSpec {
  std::variant<SyntheticSource, IdxSource> source;
  /// Per-channel constants; computed on the training split when absent.
  std::optional<std::vector<Real>> mean;
  std::optional<std::vector<Real>> stddev;
  std::size_t train_size = 0;  // 0: 80% of the samples
  std::size_t val_size = 0;    // 0: the rest
  std::uint64_t split_seed = 0;
};

struct DatasetSplit {
  Dataset train;
  Dataset val;
  std::vector<Real> mean;
  std::vector<Real> stddev;
};

namespace detail {

inline Dataset synthetic_blobs(const SyntheticSource& s) {
  const std::size_t d = s.dims[0];
  if (d < 2) throw Error("synthetic blobs need at least 2 feature dimensions");
  std::mt19937_64 rng(s.seed);
  Dataset ds{s.dims, s.classes, {}, {}};
  ds.samples.reserve(s.samples * d);
  const Real radius = 4;
  for (std::size_t i = 0; i < s.samples; ++i) {
    const int c = static_cast<int>(i % s.classes);
    const Real ang = 2 * std::numbers::pi_v<Real> * c / static_cast<Real>(s.classes);
    for (std::size_t j = 0; j < d; ++j) {
      const Real centre = j == 0 ? radius * std::cos(ang) : j == 1 ? radius * std::sin(ang) : 0;
      ds.samples.push_back(centre + s.noise * normal_draw(rng));
    }
    ds.labels.push_back(c);
  }
  return ds;
}

inline Dataset synthetic_images(const SyntheticSource& s) {
  const std::size_t C = s.dims[0], H = s.dims[1], W = s.dims[2];
  std::mt19937_64 rng(s.seed);
  auto u01 = [&] { return static_cast<Real>(rng() >> 11) * 0x1.0p-53; };
  const Real two_pi = 2 * std::numbers::pi_v<Real>;
  // Each class template is a sum of a few oriented gratings per channel.
  std::vector<Real> templates(s.classes * C * H * W, 0);
  constexpr int waves = 4;
  for (std::size_t k = 0; k < s.classes; ++k) {
    for (std::size_t c = 0; c < C; ++c) {
      for (int w = 0; w < waves; ++w) {
        const Real fx = 1 + std::floor(u01() * 4), fy = std::floor(u01() * 4);
        const Real phase = two_pi * u01();
        const Real amp = (0.5 + u01()) / waves * 2;
        for (std::size_t y = 0; y < H; ++y) {
          for (std::size_t x = 0; x < W; ++x) {
            templates[((k * C + c) * H + y) * W + x] +=
                amp * std::cos(two_pi * (fx * x / W + fy * y / H) + phase);
          }
        }
      }
    }
  }
  Dataset ds{s.dims, s.classes, {}, {}};
  ds.samples.resize(s.samples * C * H * W);
  const auto shift_span = 2 * s.max_shift + 1;
  for (std::size_t i = 0; i < s.samples; ++i) {
    const std::size_t k = i % s.classes;
    const std::size_t dy = uniform_index(rng, shift_span), dx = uniform_index(rng, shift_span);
    const Real gain = 0.8 + 0.4 * u01();
    Real* dst = ds.samples.data() + i * C * H * W;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t y = 0; y < H; ++y) {
        const std::size_t sy = (y + H + dy - s.max_shift) % H;
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t sx = (x + W + dx - s.max_shift) % W;
          dst[(c * H + y) * W + x] =
              gain * templates[((k * C + c) * H + sy) * W + sx] + s.noise * normal_draw(rng);
        }
      }
    }
    ds.labels.push_back(static_cast<int>(k));
  }
  return ds;
}

inline Dataset load_idx_source(const IdxSource& s) {
  IdxArray images = read_idx(s.images);
  IdxArray labels = read_idx(s.labels);
  if (labels.dims.size() != 1) throw Error(s.labels + ": labels must be a rank-1 IDX array");
  if (images.dims.size() < 2) throw Error(s.images + ": images need rank >= 2");
  if (images.dims[0] != labels.dims[0]) {
    throw Error(s.images + " holds " + std::to_string(images.dims[0]) + " samples but " +
                s.labels + " holds " + std::to_string(labels.dims[0]) + " labels");
  }
  Dataset ds;
  ds.num_classes = s.num_classes;
  ds.sample_shape.assign(images.dims.begin() + 1, images.dims.end());
  if (ds.sample_shape.size() == 2) ds.sample_shape.insert(ds.sample_shape.begin(), 1);
  ds.samples = std::move(images.values);
  for (std::size_t i = 0; i < labels.values.size(); ++i) {
    const Real v = labels.values[i];
    if (v < 0 || v >= static_cast<Real>(s.num_classes) || v != std::floor(v)) {
      throw Error(s.labels + ": label " + std::to_string(v) + " at index " + std::to_string(i) +
                  " outside [0," + std::to_string(s.num_classes) + ")");
    }
    ds.labels.push_back(static_cast<int>(v));
  }
  return ds;
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> idx) {
  Dataset out{ds.sample_shape, ds.num_classes, {}, {}};
  out.samples.reserve(idx.size() * ds.sample_numel());
  for (std::size_t i : idx) {
    auto s = ds.sample(i);
    out.samples.insert(out.samples.end(), s.begin(), s.end());
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

}  // namespace detail

inline Dataset generate_synthetic(const SyntheticSource& s) {
  if (s.classes < 2) throw Error("synthetic dataset needs at least 2 classes");
  if (s.samples < s.classes) throw Error("synthetic dataset needs at least one sample per class");
  if (s.dims.size() == 1) return detail::synthetic_blobs(s);
  if (s.dims.size() == 3) return detail::synthetic_images(s);
  throw Error("synthetic dims must be [D] or [C,H,W], got " + shape_str(s.dims));
}

/// Per-channel statistics over dimension 0 of the sample shape.
inline void channel_stats(const Dataset& ds, std::vector<Real>& mean, std::vector<Real>& stddev) {
  const std::size_t C = ds.sample_shape[0];
  const std::size_t inner = ds.sample_numel() / C;
  mean.assign(C, 0);
  stddev.assign(C, 0);
  std::vector<Real> sq(C, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto s = ds.sample(i);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t j = 0; j < inner; ++j) mean[c] += s[c * inner + j];
    }
  }
  const Real count = static_cast<Real>(ds.size() * inner);
  for (auto& m : mean) m /= count;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto s = ds.sample(i);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t j = 0; j < inner; ++j) {
        const Real d = s[c * inner + j] - mean[c];
        sq[c] += d * d;
      }
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    stddev[c] = std::sqrt(sq[c] / count);
    if (stddev[c] < 1e-12) stddev[c] = 1;
  }
}

inline void normalize(Dataset& ds, std::span<const Real> mean, std::span<const Real> stddev) {
  const std::size_t C = ds.sample_shape[0];
  if (mean.size() != C || stddev.size() != C) {
    throw Error("normalization needs " + std::to_string(C) + " per-channel constants");
  }
  const std::size_t inner = ds.sample_numel() / C;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Real* s = ds.samples.data() + i * ds.sample_numel();
    for (std::size_t c = 0; c < C; ++c) {
      if (!(stddev[c] > 0)) throw Error("normalization stddev must be positive");
      for (std::size_t j = 0; j < inner; ++j) s[c * inner + j] = (s[c * inner + j] - mean[c]) / stddev[c];
    }
  }
}

/// Loads or generates the samples, splits them with a seeded permutation and
/// normalizes both splits with the training statistics (or the given ones).
inline DatasetSplit load_dataset(const DatasetSpec& spec) {
  Dataset all = std::visit(
      [](const auto& src) -> Dataset {
        if constexpr (std::is_same_v<std::decay_t<decltype(src)>, SyntheticSource>) {
          return generate_synthetic(src);
        } else {
          return detail::load_idx_source(src);
        }
      },
      spec.source);
  if (all.size() < 2) throw Error("dataset needs at least 2 samples");
  std::size_t ntrain = spec.train_size ? spec.train_size : all.size() * 4 / 5;
  std::size_t nval = spec.val_size ? spec.val_size : all.size() - ntrain;
  if (ntrain == 0 || nval == 0 || ntrain + nval > all.size()) {
    throw Error("split sizes " + std::to_string(ntrain) + "+" + std::to_string(nval) +
                " do not fit " + std::to_string(all.size()) + " samples");
  }
  std::mt19937_64 rng(spec.split_seed);
  const auto perm = permutation(all.size(), rng);
  DatasetSplit out;
  out.train = detail::subset(all, std::span(perm).first(ntrain));
  out.val = detail::subset(all, std::span(perm).subspan(ntrain, nval));
  if (spec.mean && spec.stddev) {
    out.mean = *spec.mean;
    out.stddev = *spec.stddev;
  } else if (spec.mean || spec.stddev) {
    throw Error("normalization needs both mean and stddev");
  } else {
    channel_stats(out.train, out.mean, out.stddev);
  }
  normalize(out.train, out.mean, out.stddev);
  normalize(out.val, out.mean, out.stddev);
  return out;
}

}  // namespace edmips
