#pragma once

// Flat binary tensor container. All integers and values are little-endian.
//
//   offset  size  field
//   0       4     magic "EDMP"
//   4       4     u32 version (currently 1)
//   8       8     u64 tensor count
//   then, per tensor:
//           4     u32 name length L
//           L     UTF-8 name bytes
//           4     u32 rank R
//           8*R   u64 extents
//           8*n   f64 values, n = product of extents

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "edmips/tensor.hpp"

namespace edmips {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& path) {
  T v{};
  const auto at = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw Error("checkpoint " + path + ": truncated at offset " + std::to_string(at));
  }
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.write("EDMP", 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint64_t>(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(t.ptr()),
             static_cast<std::streamsize>(t.numel() * sizeof(Real)));
  }
  if (!os) throw Error("write failed for " + path);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw Error("cannot open checkpoint " + path);
  const auto file_size = static_cast<std::uint64_t>(is.tellg());
  is.seekg(0);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "EDMP", 4) != 0) {
    throw Error("checkpoint " + path + ": bad magic at offset 0");
  }
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw Error("checkpoint " + path + ": unsupported version " + std::to_string(version));
  }
  const auto count = detail::get<std::uint64_t>(is, path);
  std::vector<NamedTensor> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = detail::get<std::uint32_t>(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw Error("checkpoint " + path + ": truncated name");
    const auto rank = detail::get<std::uint32_t>(is, path);
    if (rank == 0 || rank > 8) {
      throw Error("checkpoint " + path + ": invalid rank " + std::to_string(rank) +
                  " for tensor " + name);
    }
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& e : shape) {
      e = detail::get<std::uint64_t>(is, path);
      if (e == 0) throw Error("checkpoint " + path + ": zero extent in tensor " + name);
      numel = e > (file_size / sizeof(Real)) / numel ? file_size : numel * e;  // saturates so the size check fails
    }
    const auto here = static_cast<std::uint64_t>(is.tellg());
    if (numel * sizeof(Real) > file_size - here) {
      throw Error("checkpoint " + path + ": tensor " + name + " at offset " + std::to_string(here) +
                  " extends past the end of the file");
    }
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.ptr()),
                 static_cast<std::streamsize>(t.numel() * sizeof(Real)))) {
      throw Error("checkpoint " + path + ": truncated values for tensor " + name);
    }
    out.push_back({std::move(name), std::move(t)});
  }
  return out;
}

}  // namespace edmips
