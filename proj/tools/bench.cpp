// Scenario runner and estimator CLI for the ctmle library.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "ctmle/collaborative.hpp"
#include "ctmle/scenario.hpp"
#include "ctmle/synthetic.hpp"
#include "ctmle/version.hpp"

namespace {

struct RunOptions {
  std::string scenario = "1";
  int b = 200;
  std::uint64_t seed = 1;
  std::string out_dir;
  std::vector<long> n_list;
  std::vector<int> p_list;
  std::vector<double> delta_list;
  std::vector<std::string> estimators;
  int threads = 1;
  std::string stopping = "grid";
  double g_bound = 0.005;
  int v_folds = 10;
  double oracle_draws = 1e7;
  std::uint64_t oracle_seed = 9001;
  std::string oracle_cache = "oracle_cache.json";
};

int cmd_run(const RunOptions& opt) {
  ctmle::ScenarioSpec spec;
  spec.id = opt.scenario;
  std::vector<Eigen::Index> ns(opt.n_list.begin(), opt.n_list.end());
  spec.triplets = ctmle::make_triplets(opt.scenario, ns, opt.p_list, opt.delta_list);
  spec.b = opt.b;
  spec.seed = opt.seed;
  spec.estimators = opt.estimators.empty() ? ctmle::default_estimators(opt.scenario)
                                           : opt.estimators;
  const auto known = ctmle::default_estimators("transfer");
  for (const auto& name : spec.estimators) {
    if (std::find(known.begin(), known.end(), name) == known.end() && name != "unadj" &&
        name != "gcomp") {
      throw std::invalid_argument("unknown estimator: " + name);
    }
  }
  spec.threads = opt.threads;
  spec.v_folds = opt.v_folds;
  spec.bounds.lower = opt.g_bound;
  spec.stopping.plateau_enabled = (opt.stopping == "plateau");
  spec.oracle_draws = static_cast<long>(opt.oracle_draws);
  spec.oracle_seed = opt.oracle_seed;
  spec.oracle_cache_file = opt.oracle_cache;

  const ctmle::ScenarioReport report = opt.scenario == "transfer"
                                           ? ctmle::run_transfer(spec)
                                           : ctmle::run_scenario(spec);
  ctmle::emit_report(report, opt.out_dir);

  long failures = 0;
  for (const auto& t : report.triplets) failures += static_cast<long>(t.failures.size());
  std::printf("scenario %s: %zu configuration(s), B=%d, wall %.1fs, %ld failed estimator run(s)\n",
              report.id.c_str(), report.triplets.size(), report.b, report.wall_seconds, failures);
  std::printf("wrote %s/summary.csv\n", opt.out_dir.c_str());
  return report.any_failures() ? 2 : 0;
}

struct OracleOptions {
  int p = 10;
  double delta = 0.0;
  double draws = 1e7;
  std::uint64_t seed = 9001;
  int threads = 1;
  int nodes = 64;
  std::string cache;
};

int cmd_oracle(const OracleOptions& opt) {
  const ctmle::SyntheticConfig config{opt.p, opt.delta};
  ctmle::OracleEstimate est;
  if (!opt.cache.empty()) {
    ctmle::OracleCache cache(opt.cache);
    est = cache.get_or_compute(config, static_cast<long>(opt.draws), opt.seed, opt.threads);
  } else {
    est = ctmle::oracle_psi0(config, static_cast<long>(opt.draws), ctmle::RngSpec{opt.seed, 0},
                             opt.nodes, opt.threads);
  }
  std::printf("psi0 = %.6f (se %.2e, p=%d, delta=%g, draws=%.0f)\n", est.value, est.std_error,
              opt.p, opt.delta, opt.draws);
  return 0;
}

struct FitOptions {
  std::string data_file;
  std::string estimator = "lctmle";
  std::uint64_t seed = 1;
  int v_folds = 10;
  double g_bound = 0.005;
  std::string stopping = "grid";
  std::string dump_path;
  std::string dump_trace;
};

void print_estimate(const std::string& name, double psi) {
  std::printf("%s psi=%.6f\n", name.c_str(), psi);
}

void print_estimate(const std::string& name, const ctmle::EstimateWithCI& e) {
  std::printf("%s psi=%.6f se=%.6f ci=[%.6f, %.6f]\n", name.c_str(), e.psi, e.se, e.ci_low,
              e.ci_high);
}

int cmd_fit(const FitOptions& opt) {
  const ctmle::Dataset dataset = ctmle::read_dataset_csv(opt.data_file);
  ctmle::PropensityBounds bounds{opt.g_bound};
  ctmle::StoppingPolicy policy;
  policy.plateau_enabled = (opt.stopping == "plateau");
  ctmle::Rng base(ctmle::RngSpec{opt.seed, 0});

  if (opt.estimator == "unadj") {
    print_estimate("unadj", ctmle::unadjusted(dataset));
    return 0;
  }

  const ctmle::OutcomeModel q0 = ctmle::fit_working_model(dataset).outcome_model();
  if (opt.estimator == "gcomp") {
    print_estimate("gcomp", ctmle::gcomp(dataset, q0));
    return 0;
  }

  const ctmle::PenaltyGrid grid = ctmle::default_grid(dataset);
  const ctmle::LassoPath path = ctmle::fit_path(dataset, grid);
  if (!opt.dump_path.empty()) ctmle::write_path_csv(path, opt.dump_path);
  const ctmle::FoldScheme folds =
      ctmle::make_folds(dataset, opt.v_folds, base.fork(0x11));
  const double h_cv = ctmle::cv_select(dataset, grid, folds, bounds);

  if (opt.estimator == "iptw") {
    print_estimate("iptw", ctmle::iptw(dataset, ctmle::propensity_fn(path, h_cv, bounds)));
  } else if (opt.estimator == "aiptw") {
    print_estimate("aiptw",
                   ctmle::aiptw_with_ci(dataset, q0, ctmle::propensity_fn(path, h_cv, bounds)));
  } else if (opt.estimator == "tmle") {
    const ctmle::TmleResult r = ctmle::plain_tmle(dataset, q0, path, h_cv, bounds);
    print_estimate("tmle", ctmle::wald_ci(r.psi, r.upsilon, dataset.size(), "tmle"));
  } else if (opt.estimator == "lctmle") {
    const ctmle::CtmleFit fit =
        ctmle::collaborative_fit(dataset, q0, path, h_cv, policy, bounds, base.fork(0x22),
                                 opt.v_folds);
    print_estimate("lctmle", fit.ci);
    std::printf("  h_cv=%.6g h_selected=%.6g kappa=%zu of %zu steps\n", h_cv, fit.h_selected,
                fit.kappa, fit.sequence.size());
    if (!opt.dump_trace.empty()) ctmle::write_trace_csv(fit.sequence, opt.dump_trace);
  } else if (opt.estimator == "lpctmle") {
    const ctmle::TmleResult r = ctmle::pseudo_ctmle_at(dataset, q0, path, h_cv, bounds);
    print_estimate("lpctmle", ctmle::wald_ci(r.psi, r.upsilon, dataset.size(), "lpctmle"));
  } else {
    throw CLI::ValidationError("--estimator", "unknown estimator " + opt.estimator);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Collaborative targeted minimum-loss estimation benchmark"};
  app.set_version_flag("--version", std::string(ctmle::kVersion));
  app.require_subcommand(1);

  RunOptions run_opt;
  CLI::App* run = app.add_subcommand("run", "Run a simulation scenario and write report files");
  run->add_option("--scenario", run_opt.scenario, "Scenario id: 1..6 or transfer")->required();
  run->add_option("--b", run_opt.b, "Repetitions per configuration");
  run->add_option("--seed", run_opt.seed, "Master seed");
  run->add_option("--out", run_opt.out_dir, "Output directory")->required();
  run->add_option("--n-list", run_opt.n_list, "Override sample sizes");
  run->add_option("--p-list", run_opt.p_list, "Override covariate dimensions");
  run->add_option("--delta-list", run_opt.delta_list, "Override delta values");
  run->add_option("--estimators", run_opt.estimators, "Subset of estimators to run");
  run->add_option("--threads", run_opt.threads, "Worker threads");
  run->add_option("--stopping", run_opt.stopping, "Sequence stopping rule")
      ->check(CLI::IsMember({"grid", "plateau"}));
  run->add_option("--g-bound", run_opt.g_bound, "Propensity truncation lower bound");
  run->add_option("--v", run_opt.v_folds, "Cross-validation folds");
  run->add_option("--oracle-draws", run_opt.oracle_draws, "Monte-Carlo draws for the oracle");
  run->add_option("--oracle-seed", run_opt.oracle_seed, "Oracle seed");
  run->add_option("--oracle-cache", run_opt.oracle_cache, "Oracle cache file");

  OracleOptions oracle_opt;
  CLI::App* oracle = app.add_subcommand("oracle", "Estimate the true average treatment effect");
  oracle->add_option("--p", oracle_opt.p, "Covariate dimension")->required();
  oracle->add_option("--delta", oracle_opt.delta, "Propensity shift")->required();
  oracle->add_option("--draws", oracle_opt.draws, "Monte-Carlo draws (accepts 1e7)");
  oracle->add_option("--seed", oracle_opt.seed, "Seed");
  oracle->add_option("--threads", oracle_opt.threads, "Worker threads");
  oracle->add_option("--nodes", oracle_opt.nodes, "Inner quadrature nodes");
  oracle->add_option("--cache", oracle_opt.cache, "Oracle cache file (optional)");

  FitOptions fit_opt;
  CLI::App* fit = app.add_subcommand("fit", "Fit one estimator on a CSV dataset");
  fit->add_option("--data", fit_opt.data_file, "CSV file with header w1,...,wp,a,y")->required();
  fit->add_option("--estimator", fit_opt.estimator,
                  "unadj|gcomp|iptw|aiptw|tmle|lctmle|lpctmle")
      ->required();
  fit->add_option("--seed", fit_opt.seed, "Fold seed");
  fit->add_option("--v", fit_opt.v_folds, "Cross-validation folds");
  fit->add_option("--g-bound", fit_opt.g_bound, "Propensity truncation lower bound");
  fit->add_option("--stopping", fit_opt.stopping, "Sequence stopping rule")
      ->check(CLI::IsMember({"grid", "plateau"}));
  fit->add_option("--dump-path", fit_opt.dump_path, "Write the penalty path CSV here");
  fit->add_option("--dump-trace", fit_opt.dump_trace, "Write the sequence trace CSV here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_opt);
    if (oracle->parsed()) return cmd_oracle(oracle_opt);
    if (fit->parsed()) return cmd_fit(fit_opt);
  } catch (const std::invalid_argument& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
