// Serial reference vs OpenMP kernel comparison, plus one end-to-end model
// forward. Run with --benchmark_min_time=0.1s for a quick pass.

#include <benchmark/benchmark.h>

#include <vector>

#include "grunlab/common.hpp"
#include "grunlab/kernels.hpp"
#include "grunlab/model.hpp"

namespace {

using namespace grunlab;

std::vector<float> random_values(size_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.gaussian());
  return v;
}

void bm_matmul_serial(benchmark::State& state) {
  const size_t n = static_cast<size_t>(state.range(0));
  auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    kernels::serial::matmul(a.data(), b.data(), c.data(), n, n, n);
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}

void bm_matmul_parallel(benchmark::State& state) {
  const size_t n = static_cast<size_t>(state.range(0));
  auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    kernels::par::matmul(a.data(), b.data(), c.data(), n, n, n);
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}

void bm_layernorm_serial(benchmark::State& state) {
  const size_t rows = 512, cols = 256;
  auto x = random_values(rows * cols, 3);
  auto g = random_values(cols, 4), b = random_values(cols, 5);
  std::vector<float> y(rows * cols);
  for (auto _ : state) {
    kernels::serial::layernorm_rows(x.data(), g.data(), b.data(), y.data(),
                                    rows, cols, 1e-5f);
    benchmark::ClobberMemory();
  }
}

void bm_layernorm_parallel(benchmark::State& state) {
  const size_t rows = 512, cols = 256;
  auto x = random_values(rows * cols, 3);
  auto g = random_values(cols, 4), b = random_values(cols, 5);
  std::vector<float> y(rows * cols);
  for (auto _ : state) {
    kernels::par::layernorm_rows(x.data(), g.data(), b.data(), y.data(), rows,
                                 cols, 1e-5f);
    benchmark::ClobberMemory();
  }
}

void bm_softmax_serial(benchmark::State& state) {
  const size_t rows = 512, cols = 512;
  auto x = random_values(rows * cols, 6);
  std::vector<float> y(rows * cols);
  for (auto _ : state) {
    kernels::serial::softmax_rows(x.data(), y.data(), rows, cols);
    benchmark::ClobberMemory();
  }
}

void bm_softmax_parallel(benchmark::State& state) {
  const size_t rows = 512, cols = 512;
  auto x = random_values(rows * cols, 6);
  std::vector<float> y(rows * cols);
  for (auto _ : state) {
    kernels::par::softmax_rows(x.data(), y.data(), rows, cols);
    benchmark::ClobberMemory();
  }
}

void bm_model_forward(benchmark::State& state) {
  ModelConfig cfg;
  cfg.vocab_size = 400;
  Model<float> model(cfg, 0);
  std::vector<int> tokens;
  Rng rng(7);
  for (int i = 0; i < 24; ++i)
    tokens.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
  NoGradGuard ng;
  for (auto _ : state) {
    auto res = model.forward(tokens);
    benchmark::DoNotOptimize(res.logits.value().data());
  }
}

BENCHMARK(bm_matmul_serial)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_matmul_parallel)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_layernorm_serial);
BENCHMARK(bm_layernorm_parallel);
BENCHMARK(bm_softmax_serial);
BENCHMARK(bm_softmax_parallel);
BENCHMARK(bm_model_forward);

}  // namespace

BENCHMARK_MAIN();
