#pragma once

#include <string>
#include <vector>

#include "edmips/quantizer.hpp"
#include "edmips/tensor.hpp"

namespace edmips {

/// Candidate bit-widths searched for one filter: weights and activations are
/// decoupled, giving |weight_bits| x |activation_bits| configurations.
struct BitPool {
  std::vector<int> weight_bits{1, 2, 3, 4};
  std::vector<int> activation_bits{2, 3, 4};

  static BitPool uniform(int weight, int activation) { return {{weight}, {activation}}; }

  void validate() const {
    check(weight_bits, "weight");
    check(activation_bits, "activation");
  }

  bool contains(int weight, int activation) const {
    auto has = [](const std::vector<int>& v, int b) {
      for (int x : v) {
        if (x == b) return true;
      }
      return false;
    };
    return has(weight_bits, weight) && has(activation_bits, activation);
  }

  friend bool operator==(const BitPool&, const BitPool&) = default;

 private:
  static void check(const std::vector<int>& bits, const char* what) {
    if (bits.empty()) throw Error(std::string(what) + " bit pool is empty");
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (bits[i] < kMinBits || bits[i] > kMaxBits) {
        throw Error(std::string(what) + " bit-width " + std::to_string(bits[i]) +
                    " outside [1,8]");
      }
      if (i && bits[i] <= bits[i - 1]) {
        throw Error(std::string(what) + " bit pool must be strictly increasing");
      }
    }
  }
};

}  // namespace edmips
