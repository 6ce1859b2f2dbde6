#pragma once

#include <cstddef>
#include <vector>

#include "edmips/tensor.hpp"

namespace edmips::detail {

// Row-major C[M,N] += A[M,K] * B[K,N]. The i-k-j order keeps the inner loop
// contiguous over B and C so it vectorizes.
inline void gemm_nn_acc(std::size_t M, std::size_t N, std::size_t K,
                        const Real* A, const Real* B, Real* C) {
  constexpr std::size_t kBlock = 128;
  for (std::size_t k0 = 0; k0 < K; k0 += kBlock) {
    const std::size_t k1 = std::min(K, k0 + kBlock);
    for (std::size_t i = 0; i < M; ++i) {
      Real* c = C + i * N;
      const Real* a = A + i * K;
      for (std::size_t k = k0; k < k1; ++k) {
        const Real av = a[k];
        if (av == 0) continue;
        const Real* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  }
}

// C[M,N] += A^T * B where A is stored [K,M].
inline void gemm_tn_acc(std::size_t M, std::size_t N, std::size_t K,
                        const Real* A, const Real* B, Real* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const Real* a = A + k * M;
    const Real* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const Real av = a[i];
      if (av == 0) continue;
      Real* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A * B^T where B is stored [N,K].
inline void gemm_nt_acc(std::size_t M, std::size_t N, std::size_t K,
                        const Real* A, const Real* B, Real* C,
                        std::vector<Real>& scratch) {
  scratch.resize(K * N);
  for (std::size_t j = 0; j < N; ++j) {
    const Real* b = B + j * K;
    for (std::size_t k = 0; k < K; ++k) scratch[k * N + j] = b[k];
  }
  gemm_nn_acc(M, N, K, A, scratch.data(), C);
}

}  // namespace edmips::detail
