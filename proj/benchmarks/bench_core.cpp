#include <benchmark/benchmark.h>

#include "ctmle/collaborative.hpp"
#include "ctmle/estimators.hpp"
#include "ctmle/lasso_path.hpp"
#include "ctmle/synthetic.hpp"

namespace {

using namespace ctmle;

Dataset draw(Eigen::Index n, int p) {
  const SyntheticSampler sampler(SyntheticConfig{p, 0.0});
  return sampler.sample(n, Rng(1234, 0));
}

void BM_SampleDataset(benchmark::State& state) {
  const SyntheticSampler sampler(SyntheticConfig{static_cast<int>(state.range(1)), 0.0});
  for (auto _ : state) {
    benchmark::DoNotOptimize(sampler.sample(state.range(0), Rng(7, 0)));
  }
}
BENCHMARK(BM_SampleDataset)->Args({200, 40})->Args({1000, 100});

void BM_FitPath(benchmark::State& state) {
  const Dataset d = draw(state.range(0), static_cast<int>(state.range(1)));
  const PenaltyGrid grid = default_grid(d);
  for (auto _ : state) {
    benchmark::DoNotOptimize(fit_path(d, grid));
  }
}
BENCHMARK(BM_FitPath)->Args({200, 40})->Args({1000, 100})->Unit(benchmark::kMillisecond);

void BM_Fluctuation(benchmark::State& state) {
  const Dataset d = draw(state.range(0), 10);
  const OutcomeModel q0 = fit_working_model(d).outcome_model();
  const PropensityFn g = [](CovariateRow w) { return clamp(expit(0.4 * w(0)), 0.005, 0.995); };
  const CleverCovariate clever = CleverCovariate::scalar(g);
  for (auto _ : state) {
    benchmark::DoNotOptimize(fluctuate_and_solve(d, q0, clever, g));
  }
}
BENCHMARK(BM_Fluctuation)->Arg(200)->Arg(2000);

void BM_BuildSequence(benchmark::State& state) {
  const Dataset d = draw(state.range(0), 40);
  const OutcomeModel q0 = fit_working_model(d).outcome_model();
  const PenaltyGrid grid = default_grid(d);
  const LassoPath path = fit_path(d, grid);
  const double start_h = grid.values[grid.size() / 3];
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        build_sequence(d, q0, path, start_h, StoppingPolicy{}, PropensityBounds{}));
  }
}
BENCHMARK(BM_BuildSequence)->Arg(200)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_OracleQbar(benchmark::State& state) {
  const SyntheticConfig cfg{10, 0.0};
  Eigen::VectorXd w = Eigen::VectorXd::Constant(10, 0.3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(oracle_qbar0(cfg, 1, w, static_cast<int>(state.range(0))));
  }
}
BENCHMARK(BM_OracleQbar)->Arg(40)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
