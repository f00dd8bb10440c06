#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ffsc/kernels.hpp"

namespace {

std::vector<double> random_values(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

template <auto Kernel>
void gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Kernel(a, b, c, n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <auto Kernel>
void sq_dist(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t k = 64;
  const auto a = random_values(n * k, 3), b = random_values(n * k, 4);
  std::vector<double> d(n * n);
  for (auto _ : state) {
    Kernel(a, b, d, n, n, k);
    benchmark::DoNotOptimize(d.data());
  }
}

template <auto Kernel>
void pearson(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t k = 64;
  const auto a = random_values(n * k, 5);
  std::vector<double> d(n * n);
  for (auto _ : state) {
    Kernel(a, d, n, k);
    benchmark::DoNotOptimize(d.data());
  }
}

namespace k = ffsc::kernels;

BENCHMARK(gemm<k::serial::gemm_nt>)->Name("gemm_nt/serial")->Arg(64)->Arg(256);
BENCHMARK(gemm<k::parallel::gemm_nt>)->Name("gemm_nt/parallel")->Arg(64)->Arg(256);
BENCHMARK(gemm<k::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(256);
BENCHMARK(gemm<k::parallel::gemm_nn>)->Name("gemm_nn/parallel")->Arg(64)->Arg(256);
BENCHMARK(sq_dist<k::serial::pairwise_sq_dist>)->Name("pairwise_sq_dist/serial")->Arg(128)->Arg(512);
BENCHMARK(sq_dist<k::parallel::pairwise_sq_dist>)->Name("pairwise_sq_dist/parallel")->Arg(128)->Arg(512);
BENCHMARK(pearson<k::serial::pearson_distance>)->Name("pearson_distance/serial")->Arg(128)->Arg(512);
BENCHMARK(pearson<k::parallel::pearson_distance>)->Name("pearson_distance/parallel")->Arg(128)->Arg(512);

}  // namespace

BENCHMARK_MAIN();
