#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace comvit::detail {

// C[m x n] += op(A) * op(B), all row-major. op(A) is m x k, op(B) is k x n.
// Reduction order is fixed for a given (m, n, k), so results are
// reproducible run to run.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  constexpr std::size_t kColBlock = 512;
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* a0 = a + (i + 0) * k;
    const T* a1 = a + (i + 1) * k;
    const T* a2 = a + (i + 2) * k;
    const T* a3 = a + (i + 3) * k;
    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
      const std::size_t j1 = std::min(n, j0 + kColBlock);
      T* __restrict c0 = c + (i + 0) * n;
      T* __restrict c1 = c + (i + 1) * n;
      T* __restrict c2 = c + (i + 2) * n;
      T* __restrict c3 = c + (i + 3) * n;
      for (std::size_t t = 0; t < k; ++t) {
        const T v0 = a0[t], v1 = a1[t], v2 = a2[t], v3 = a3[t];
        const T* __restrict br = b + t * n;
        for (std::size_t j = j0; j < j1; ++j) {
          const T bj = br[j];
          c0[j] += v0 * bj;
          c1[j] += v1 * bj;
          c2[j] += v2 * bj;
          c3[j] += v3 * bj;
        }
      }
    }
  }
  for (; i < m; ++i) {
    T* __restrict ci = c + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const T v = a[i * k + t];
      const T* __restrict br = b + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += v * br[j];
    }
  }
}

template <typename T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t col = 0; col < cols; ++col) dst[col * rows + r] = src[r * cols + col];
  }
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c) {
  std::vector<T> at;
  std::vector<T> bt;
  if (trans_a) {
    at.resize(m * k);
    transpose_into(k, m, a, at.data());
    a = at.data();
  }
  if (trans_b) {
    bt.resize(k * n);
    transpose_into(n, k, b, bt.data());
    b = bt.data();
  }
  gemm_nn(m, n, k, a, b, c);
}

}  // namespace comvit::detail
