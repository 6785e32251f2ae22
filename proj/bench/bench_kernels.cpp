// SPDX-License-Identifier: Apache-2.0
// Serial vs OpenMP timings of the parallel kernels.
//
//   bench_kernels --benchmark_filter=matmul
//
// Arguments: problem size, then 0 = serial, 1 = parallel.

#include <random>

#include <benchmark/benchmark.h>

#include "xpert/kernels.hpp"
#include "xpert/masking.hpp"
#include "xpert/model.hpp"
#include "xpert/pbs.hpp"
#include "xpert/scoring.hpp"

namespace {

using xpert::Exec;
using xpert::Matrix;

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(gen);
  return m;
}

Exec exec_of(const benchmark::State& state) { return state.range(1) ? Exec::parallel : Exec::serial; }

void matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(xpert::matmul(a, b, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

void foresight_scores(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto w1 = random_matrix(n, n, 3), w2 = random_matrix(n, n, 4);
  const auto norms = xpert::column_norms(random_matrix(64, n, 5));
  for (auto _ : state) benchmark::DoNotOptimize(xpert::foresight_scores(w1, w2, norms, exec_of(state)));
}

void rowwise_prune(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const xpert::ScoreMatrix scores{random_matrix(n, n, 6), xpert::Criterion::magnitude};
  for (auto _ : state) benchmark::DoNotOptimize(xpert::rowwise_prune(scores, 0.5, exec_of(state)));
}

void pbs_correct(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t r = 8;
  const xpert::LoraLinear layer{random_matrix(n, n, 7), random_matrix(n, r, 8), random_matrix(r, n, 9), 2.0,
                                std::nullopt};
  const auto mask = xpert::rowwise_prune({random_matrix(n, n, 10), xpert::Criterion::magnitude}, 0.5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(xpert::pbs_correct(layer, mask, {}, exec_of(state)));
  }
}

void sizes(benchmark::internal::Benchmark* b) {
  for (int n : {64, 256}) {
    for (int par : {0, 1}) b->Args({n, par});
  }
  b->ArgNames({"n", "parallel"});
}

BENCHMARK(matmul)->Apply(sizes);
BENCHMARK(foresight_scores)->Apply(sizes);
BENCHMARK(rowwise_prune)->Apply(sizes);
BENCHMARK(pbs_correct)->Apply(sizes);

}  // namespace

BENCHMARK_MAIN();
