#include <benchmark/benchmark.h>

#include "fvlab/numerics.hpp"

using namespace fvlab;

namespace {

Matrix random_matrix(int r, int c, uint64_t seed) {
  Matrix m(r, c);
  Rng rng(seed);
  for (auto& x : m.data) x = float(rng.gaussian());
  return m;
}

void BM_Gemm(benchmark::State& state) {
  const int m = int(state.range(0));
  const int k = int(state.range(1));
  const int n = int(state.range(2));
  const Matrix a = random_matrix(m, k, 1);
  const Matrix b = random_matrix(k, n, 2);
  Matrix c(m, n);
  for (auto _ : state) {
    gemm(a.data.data(), b.data.data(), c.data.data(), m, k, n, false);
    benchmark::DoNotOptimize(c.data.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * int64_t(m) * k * n);
}
BENCHMARK(BM_Gemm)->Args({33, 128, 128})->Args({33, 128, 512})->Args({64, 128, 270})
    ->Args({128, 128, 128});

void BM_Softmax(benchmark::State& state) {
  const int n = int(state.range(0));
  std::vector<float> x(n);
  Rng rng(3);
  for (auto& v : x) v = float(rng.gaussian());
  for (auto _ : state) {
    std::vector<float> y = x;
    softmax_inplace(y.data(), n);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_Softmax)->Arg(64)->Arg(270)->Arg(1024);

void BM_Layernorm(benchmark::State& state) {
  const int n = int(state.range(0));
  std::vector<float> x(n), gain(n, 1.0f), bias(n, 0.0f), out(n);
  Rng rng(4);
  for (auto& v : x) v = float(rng.gaussian());
  for (auto _ : state) {
    layernorm_into(x.data(), gain.data(), bias.data(), n, 1e-5f, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_Layernorm)->Arg(128)->Arg(512);

}  // namespace

BENCHMARK_MAIN();
