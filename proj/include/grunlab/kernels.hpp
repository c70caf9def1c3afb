#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

namespace grunlab::kernels {

// Thread budget for parallel kernels. Resolved once from GRUNLAB_THREADS
// (capped by the OpenMP max), overridable for tests and benchmarks.
int max_threads();
void set_max_threads(int n);

// Work threshold below which the dispatchers stay serial.
inline constexpr size_t kParallelGrain = 16 * 1024;

// Every parallel kernel partitions by output element, so each element is
// produced by exactly one thread with the same accumulation order as the
// serial reference. Outputs are bit-identical between the two variants.

namespace serial {

// C[m,n] = A[m,k] * B[k,n]; accumulate adds into C instead of overwriting.
template <class S>
void matmul(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
            bool accumulate = false) {
  for (size_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, S(0));
    const S* arow = a + i * k;
    for (size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      const S* brow = b + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] = A^T * B with A stored [k,m].
template <class S>
void matmul_tn(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
               bool accumulate = false) {
  for (size_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, S(0));
    for (size_t p = 0; p < k; ++p) {
      const S av = a[p * m + i];
      if (av == S(0)) continue;
      const S* brow = b + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] = A * B^T with B stored [n,k].
template <class S>
void matmul_nt(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
               bool accumulate = false) {
  for (size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S acc = accumulate ? crow[j] : S(0);
      for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
}

// Row-wise softmax with max subtraction. -inf entries come out as exact 0.
template <class S>
void softmax_rows(const S* x, S* y, size_t rows, size_t cols) {
  for (size_t i = 0; i < rows; ++i) {
    const S* xr = x + i * cols;
    S* yr = y + i * cols;
    S mx = -std::numeric_limits<S>::infinity();
    for (size_t j = 0; j < cols; ++j) mx = std::max(mx, xr[j]);
    S sum = S(0);
    for (size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const S inv = S(1) / sum;
    for (size_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

// Row-wise layer normalization with per-feature gain/bias. Population
// variance with an eps floor; degenerate rows normalize to the bias.
template <class S>
void layernorm_rows(const S* x, const S* gain, const S* bias, S* y,
                    size_t rows, size_t cols, S eps) {
  for (size_t i = 0; i < rows; ++i) {
    const S* xr = x + i * cols;
    S* yr = y + i * cols;
    S mean = S(0);
    for (size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<S>(cols);
    S var = S(0);
    for (size_t j = 0; j < cols; ++j) {
      const S d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<S>(cols);
    const S inv_std = S(1) / std::sqrt(var + eps);
    for (size_t j = 0; j < cols; ++j) {
      yr[j] = (xr[j] - mean) * inv_std * gain[j] + bias[j];
    }
  }
}

}  // namespace serial

namespace par {

template <class S>
void matmul(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
            bool accumulate = false);
template <class S>
void matmul_tn(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
               bool accumulate = false);
template <class S>
void matmul_nt(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
               bool accumulate = false);
template <class S>
void softmax_rows(const S* x, S* y, size_t rows, size_t cols);
template <class S>
void layernorm_rows(const S* x, const S* gain, const S* bias, S* y,
                    size_t rows, size_t cols, S eps);

}  // namespace par

// Dispatchers.
template <class S>
void matmul(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
            bool accumulate = false) {
  if (max_threads() > 1 && m > 1 && m * k * n >= kParallelGrain)
    par::matmul(a, b, c, m, k, n, accumulate);
  else
    serial::matmul(a, b, c, m, k, n, accumulate);
}

template <class S>
void matmul_tn(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
               bool accumulate = false) {
  if (max_threads() > 1 && m > 1 && m * k * n >= kParallelGrain)
    par::matmul_tn(a, b, c, m, k, n, accumulate);
  else
    serial::matmul_tn(a, b, c, m, k, n, accumulate);
}

template <class S>
void matmul_nt(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
               bool accumulate = false) {
  if (max_threads() > 1 && m > 1 && m * k * n >= kParallelGrain)
    par::matmul_nt(a, b, c, m, k, n, accumulate);
  else
    serial::matmul_nt(a, b, c, m, k, n, accumulate);
}

template <class S>
void softmax_rows(const S* x, S* y, size_t rows, size_t cols) {
  if (max_threads() > 1 && rows > 1 && rows * cols >= kParallelGrain)
    par::softmax_rows(x, y, rows, cols);
  else
    serial::softmax_rows(x, y, rows, cols);
}

template <class S>
void layernorm_rows(const S* x, const S* gain, const S* bias, S* y,
                    size_t rows, size_t cols, S eps) {
  if (max_threads() > 1 && rows > 1 && rows * cols >= kParallelGrain)
    par::layernorm_rows(x, gain, bias, y, rows, cols, eps);
  else
    serial::layernorm_rows(x, gain, bias, y, rows, cols, eps);
}

}  // namespace grunlab::kernels
