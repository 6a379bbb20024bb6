#include <benchmark/benchmark.h>

#include "msfpca/basis.hpp"

using namespace msfpca;

static void BM_BuildBasis(benchmark::State& state) {
  const int q = static_cast<int>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(build_basis(q, 3));
  }
}
BENCHMARK(BM_BuildBasis)->Arg(10)->Arg(20)->Arg(40);

static void BM_BasisEvaluate(benchmark::State& state) {
  const OrthoBasis basis = build_basis(20, 3);
  const Eigen::VectorXd points = Eigen::VectorXd::LinSpaced(state.range(0), 0.0, 1.0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(basis.evaluate(points));
  }
}
BENCHMARK(BM_BasisEvaluate)->Arg(100)->Arg(1000);

BENCHMARK_MAIN();
