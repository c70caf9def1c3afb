#include "grunlab/kernels.hpp"

#include <omp.h>

#include <cstdlib>

namespace grunlab::kernels {

namespace {

int resolve_default_threads() {
  int n = omp_get_max_threads();
  if (const char* env = std::getenv("GRUNLAB_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1 && cap < n) n = cap;
  }
  return n < 1 ? 1 : n;
}

int& thread_budget() {
  static int n = resolve_default_threads();
  return n;
}

}  // namespace

int max_threads() { return thread_budget(); }

void set_max_threads(int n) { thread_budget() = n < 1 ? 1 : n; }

namespace par {

template <class S>
void matmul(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
            bool accumulate) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const size_t i = static_cast<size_t>(ii);
    serial::matmul(a + i * k, b, c + i * n, 1, k, n, accumulate);
  }
}

template <class S>
void matmul_tn(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
               bool accumulate) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const size_t i = static_cast<size_t>(ii);
    S* crow = c + i * n;
    if (!accumulate)
      for (size_t j = 0; j < n; ++j) crow[j] = S(0);
    for (size_t p = 0; p < k; ++p) {
      const S av = a[p * m + i];
      if (av == S(0)) continue;
      const S* brow = b + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class S>
void matmul_nt(const S* a, const S* b, S* c, size_t m, size_t k, size_t n,
               bool accumulate) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const size_t i = static_cast<size_t>(ii);
    serial::matmul_nt(a + i * k, b, c + i * n, 1, k, n, accumulate);
  }
}

template <class S>
void softmax_rows(const S* x, S* y, size_t rows, size_t cols) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(rows); ++ii) {
    const size_t i = static_cast<size_t>(ii);
    serial::softmax_rows(x + i * cols, y + i * cols, 1, cols);
  }
}

template <class S>
void layernorm_rows(const S* x, const S* gain, const S* bias, S* y,
                    size_t rows, size_t cols, S eps) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(rows); ++ii) {
    const size_t i = static_cast<size_t>(ii);
    serial::layernorm_rows(x + i * cols, gain, bias, y + i * cols, 1, cols,
                           eps);
  }
}

template void matmul<float>(const float*, const float*, float*, size_t, size_t,
                            size_t, bool);
template void matmul<double>(const double*, const double*, double*, size_t,
                             size_t, size_t, bool);
template void matmul_tn<float>(const float*, const float*, float*, size_t,
                               size_t, size_t, bool);
template void matmul_tn<double>(const double*, const double*, double*, size_t,
                                size_t, size_t, bool);
template void matmul_nt<float>(const float*, const float*, float*, size_t,
                               size_t, size_t, bool);
template void matmul_nt<double>(const double*, const double*, double*, size_t,
                                size_t, size_t, bool);
template void softmax_rows<float>(const float*, float*, size_t, size_t);
template void softmax_rows<double>(const double*, double*, size_t, size_t);
template void layernorm_rows<float>(const float*, const float*, const float*,
                                    float*, size_t, size_t, float);
template void layernorm_rows<double>(const double*, const double*,
                                     const double*, double*, size_t, size_t,
                                     double);

}  // namespace par

}  // namespace grunlab::kernels
