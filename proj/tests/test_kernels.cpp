#include <cstring>
#include <vector>

#include "doctest.h"
#include "grunlab/common.hpp"
#include "grunlab/kernels.hpp"

using namespace grunlab;

namespace {

std::vector<float> random_values(size_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.gaussian());
  return v;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("matmul matches hand arithmetic") {
  // [[1,2],[3,4]] * [[1],[1]] = [[3],[7]]
  std::vector<float> a = {1, 2, 3, 4}, b = {1, 1}, c(2);
  kernels::serial::matmul(a.data(), b.data(), c.data(), 2, 2, 1);
  CHECK(c[0] == doctest::Approx(3));
  CHECK(c[1] == doctest::Approx(7));
}

TEST_CASE("matmul_tn and matmul_nt agree with explicit transposition") {
  const size_t m = 5, k = 7, n = 3;
  auto a = random_values(m * k, 1);
  auto b = random_values(k * n, 2);
  std::vector<float> at(k * m), bt(n * k);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < k; ++j) at[j * m + i] = a[i * k + j];
  for (size_t i = 0; i < k; ++i)
    for (size_t j = 0; j < n; ++j) bt[j * k + i] = b[i * n + j];

  std::vector<float> want(m * n), got(m * n);
  kernels::serial::matmul(a.data(), b.data(), want.data(), m, k, n);
  kernels::serial::matmul_tn(at.data(), b.data(), got.data(), m, k, n);
  for (size_t i = 0; i < want.size(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-6));
  kernels::serial::matmul_nt(a.data(), bt.data(), got.data(), m, k, n);
  for (size_t i = 0; i < want.size(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-6));
}

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
  const int saved = kernels::max_threads();
  kernels::set_max_threads(4);
  for (auto [m, k, n] :
       {std::tuple<size_t, size_t, size_t>{1, 8, 5},
        {7, 13, 9},
        {64, 64, 64},
        {33, 17, 51}}) {
    auto a = random_values(m * k, m * 1000 + k);
    auto b = random_values(k * n, n * 1000 + k);
    std::vector<float> cs(m * n), cp(m * n);
    kernels::serial::matmul(a.data(), b.data(), cs.data(), m, k, n);
    kernels::par::matmul(a.data(), b.data(), cp.data(), m, k, n);
    CHECK(bit_equal(cs, cp));

    std::vector<float> at(k * m);
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < k; ++j) at[j * m + i] = a[i * k + j];
    kernels::serial::matmul_tn(at.data(), b.data(), cs.data(), m, k, n);
    kernels::par::matmul_tn(at.data(), b.data(), cp.data(), m, k, n);
    CHECK(bit_equal(cs, cp));

    std::vector<float> bt(n * k);
    for (size_t i = 0; i < k; ++i)
      for (size_t j = 0; j < n; ++j) bt[j * k + i] = b[i * n + j];
    kernels::serial::matmul_nt(a.data(), bt.data(), cs.data(), m, k, n);
    kernels::par::matmul_nt(a.data(), bt.data(), cp.data(), m, k, n);
    CHECK(bit_equal(cs, cp));
  }

  auto x = random_values(37 * 29, 42);
  std::vector<float> ys(x.size()), yp(x.size());
  kernels::serial::softmax_rows(x.data(), ys.data(), 37, 29);
  kernels::par::softmax_rows(x.data(), yp.data(), 37, 29);
  CHECK(bit_equal(ys, yp));

  auto g = random_values(29, 7);
  auto b = random_values(29, 8);
  kernels::serial::layernorm_rows(x.data(), g.data(), b.data(), ys.data(), 37,
                                  29, 1e-5f);
  kernels::par::layernorm_rows(x.data(), g.data(), b.data(), yp.data(), 37,
                               29, 1e-5f);
  CHECK(bit_equal(ys, yp));
  kernels::set_max_threads(saved);
}

TEST_CASE("accumulating matmul adds onto the output") {
  std::vector<float> a = {1, 2}, b = {3, 4}, c = {10, 10, 10, 10};
  // a as [2,1], b as [1,2] -> outer product added on top of c
  kernels::serial::matmul(a.data(), b.data(), c.data(), 2, 1, 2, true);
  CHECK(c[0] == doctest::Approx(13));
  CHECK(c[1] == doctest::Approx(14));
  CHECK(c[2] == doctest::Approx(16));
  CHECK(c[3] == doctest::Approx(18));
}

TEST_CASE("GRUNLAB_THREADS override is respected") {
  const int saved = kernels::max_threads();
  kernels::set_max_threads(1);
  CHECK(kernels::max_threads() == 1);
  kernels::set_max_threads(saved);
  CHECK(kernels::max_threads() == saved);
}
