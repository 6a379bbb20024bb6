#include <benchmark/benchmark.h>

#include "msfpca/model.hpp"
#include "msfpca/rng.hpp"
#include "msfpca/sampler.hpp"
#include "msfpca/sim.hpp"

using namespace msfpca;

namespace {

struct Problem {
  SparseFunctionalDataset data;
  OrthoBasis basis;
  ModelConfig model;
  Problem(int n_vars, int n_subjects) : basis(build_basis(20, 3)) {
    SimScenario sc;
    sc.univariate = n_vars == 1;
    sc.n_vars = n_vars;
    sc.n_components = 3;
    sc.n_subjects = n_subjects;
    sc.grid_size = 100;
    sc.obs_min = 5;
    sc.obs_max = 15;
    sc.snr = n_vars == 1 ? 5.0 : 4.0;
    sc.seed = 1;
    auto [records, truth] = generate_scenario(sc, 0);
    auto [d, scaling] = standardize(records);
    data = std::move(d);
    model.n_components = 3;
    model.n_basis = 20;
    model.n_vars = n_vars;
  }
};

}  // namespace

static void BM_LogDensityGradient(benchmark::State& state) {
  Problem prob(static_cast<int>(state.range(0)), 100);
  const Posterior post(prob.data, prob.basis, prob.model, 1);
  Rng rng(7);
  const Eigen::VectorXd v = post.to_unconstrained(data_driven_init(post, rng));
  Eigen::VectorXd grad;
  for (auto _ : state) {
    benchmark::DoNotOptimize(post.log_density_gradient(v, grad));
  }
}
BENCHMARK(BM_LogDensityGradient)->Arg(1)->Arg(3);

static void BM_BlockedSweep(benchmark::State& state) {
  Problem prob(static_cast<int>(state.range(0)), 100);
  const Posterior post(prob.data, prob.basis, prob.model, 1);
  Rng rng(7);
  ParameterState st = data_driven_init(post, rng);
  FpcConditionalTarget target(post, st);
  NutsKernel kernel(target, 10);
  kernel.set_step_size(0.4);
  DrawDiagnostics info;
  for (auto _ : state) {
    blocked_sweep(post, st, target, kernel, rng, info);
  }
}
BENCHMARK(BM_BlockedSweep)->Arg(1)->Arg(3);
