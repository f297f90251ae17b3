#include "ctmle/scenario.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ctmle/errors.hpp"
#include "ctmle/parallel.hpp"
#include "ctmle/version.hpp"

namespace ctmle {

namespace {

const std::vector<Eigen::Index> kDefaultSampleSizes = {200,  400,  600,  800,  1000,
                                                       1200, 1400, 1600, 1800, 2000};

int scenario_p(const std::string& id, Eigen::Index n) {
  const double nd = static_cast<double>(n);
  if (id == "1") return static_cast<int>(std::lround(0.2 * nd));
  if (id == "2") return static_cast<int>(std::floor(2.83 * std::sqrt(nd)));
  if (id == "3") return static_cast<int>(std::floor(7.6 * std::log(nd)));
  throw std::invalid_argument("scenario_p: no p(n) schedule for scenario " + id);
}

}  // namespace

std::vector<ScenarioTriplet> make_triplets(const std::string& id,
                                           const std::vector<Eigen::Index>& n_list,
                                           const std::vector<int>& p_list,
                                           const std::vector<double>& delta_list) {
  std::vector<Eigen::Index> ns = n_list;
  std::vector<int> ps = p_list;
  std::vector<double> deltas = delta_list;

  if (id == "1" || id == "2" || id == "3") {
    if (ns.empty()) ns = kDefaultSampleSizes;
    if (deltas.empty()) deltas = {0.0};
  } else if (id == "4") {
    if (ns.empty()) ns = kDefaultSampleSizes;
    if (ps.empty()) ps = {40};
    if (deltas.empty()) deltas = {0.0};
  } else if (id == "5") {
    if (ns.empty()) ns = {1000};
    if (ps.empty()) ps = {50, 75, 100, 150, 200};
    if (deltas.empty()) deltas = {0.0};
  } else if (id == "6") {
    if (ns.empty()) ns = {500};
    if (ps.empty()) ps = {50};
    if (deltas.empty()) {
      for (int k = 0; k <= 15; ++k) deltas.push_back(0.5 + static_cast<double>(k) / 10.0);
    }
  } else if (id == "transfer") {
    if (ns.empty()) ns = {1000};
    if (ps.empty()) ps = {100, 200};
    if (deltas.empty()) deltas = {0.0};
  } else {
    throw std::invalid_argument("make_triplets: unknown scenario id " + id);
  }

  std::vector<ScenarioTriplet> triplets;
  for (Eigen::Index n : ns) {
    std::vector<int> ps_for_n = ps;
    if (ps_for_n.empty()) ps_for_n = {scenario_p(id, n)};
    for (int p : ps_for_n) {
      for (double d : deltas) triplets.push_back({n, p, d});
    }
  }
  return triplets;
}

std::vector<std::string> default_estimators(const std::string& id) {
  if (id == "transfer") {
    return {"iptw", "iptw_p", "aiptw", "aiptw_p", "tmle", "tmle_p", "lctmle", "lpctmle",
            "lpctmle_p"};
  }
  return {"unadj", "gcomp", "iptw", "aiptw", "tmle", "lctmle", "lpctmle"};
}

bool is_double_robust(const std::string& estimator) {
  return estimator == "aiptw" || estimator == "aiptw_p" || estimator == "tmle" ||
         estimator == "tmle_p" || estimator == "lctmle" || estimator == "lpctmle" ||
         estimator == "lpctmle_p";
}

ScenarioSpec default_scenario(const std::string& id) {
  ScenarioSpec spec;
  spec.id = id;
  spec.triplets = make_triplets(id, {}, {}, {});
  spec.estimators = default_estimators(id);
  return spec;
}

bool ScenarioReport::any_failures() const {
  for (const auto& t : triplets) {
    if (!t.failures.empty()) return true;
  }
  return false;
}

const CellStats* ScenarioReport::find_cell(std::size_t triplet_index,
                                           const std::string& estimator) const {
  if (triplet_index >= triplets.size()) return nullptr;
  for (const auto& c : triplets[triplet_index].cells) {
    if (c.estimator == estimator) return &c;
  }
  return nullptr;
}

namespace {

struct RepOutcome {
  std::map<std::string, double> psi;
  std::map<std::string, EstimateWithCI> ci;
  std::vector<std::string> errors;
};

// Everything the per-repetition estimators share: the drawn dataset, the
// once-fitted working model, the penalty path and its cross-validated pick.
struct SharedPieces {
  Dataset dataset;
  OutcomeModel q0;
  LassoPath path;
  double h_cv;
};

SharedPieces prepare_shared(const ScenarioSpec& spec, const SyntheticSampler& sampler,
                            Eigen::Index n, Rng base) {
  Dataset dataset = sampler.sample(n, base.fork(1));
  OutcomeModel q0 = fit_working_model(dataset).outcome_model();
  PenaltyGrid grid = default_grid(dataset);
  LassoPath path = fit_path(dataset, grid);
  double h_cv = 0.0;
  bool have_cv = false;
  Rng cv_rng = base.fork(2);
  for (int attempt = 0; attempt < 20 && !have_cv; ++attempt) {
    const FoldScheme folds =
        make_folds(dataset, spec.v_folds, cv_rng.fork(static_cast<std::uint64_t>(attempt)));
    try {
      h_cv = cv_select(dataset, grid, folds, spec.bounds);
      have_cv = true;
    } catch (const DegenerateTreatmentError&) {
    }
  }
  if (!have_cv) throw EstimationFailure("cross-validation folds degenerate in every redraw");
  return SharedPieces{std::move(dataset), std::move(q0), std::move(path), h_cv};
}

template <typename Fn>
void guarded(RepOutcome& out, const std::string& name, Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    out.errors.push_back(name + ": " + e.what());
  }
}

RepOutcome run_repetition(const ScenarioSpec& spec, const SyntheticSampler& sampler,
                          const ScenarioTriplet& triplet, std::size_t triplet_index, int rep,
                          bool transfer) {
  RepOutcome out;
  const std::uint64_t stream =
      (static_cast<std::uint64_t>(triplet_index) << 32) | static_cast<std::uint64_t>(rep);
  Rng base(RngSpec{spec.seed, stream});

  const auto wanted = [&](const std::string& name) {
    return std::find(spec.estimators.begin(), spec.estimators.end(), name) !=
           spec.estimators.end();
  };

  std::optional<SharedPieces> shared;
  try {
    shared.emplace(prepare_shared(spec, sampler, triplet.n, base));
  } catch (const std::exception& e) {
    // Estimators that only need the raw data may still run below.
    out.errors.push_back(std::string("shared: ") + e.what());
  }

  if (!shared) {
    // The unadjusted estimator needs nothing but the sample; redo the draw.
    if (wanted("unadj")) {
      guarded(out, "unadj", [&] {
        const Dataset dataset = sampler.sample(triplet.n, base.fork(1));
        out.psi["unadj"] = unadjusted(dataset);
      });
    }
    return out;
  }

  const Dataset& dataset = shared->dataset;
  const OutcomeModel& q0 = shared->q0;
  const LassoPath& path = shared->path;
  const double h_cv = shared->h_cv;
  const PropensityFn g_cv = propensity_fn(path, h_cv, spec.bounds);

  if (wanted("unadj")) {
    guarded(out, "unadj", [&] { out.psi["unadj"] = unadjusted(dataset); });
  }
  if (wanted("gcomp")) {
    guarded(out, "gcomp", [&] { out.psi["gcomp"] = gcomp(dataset, q0); });
  }
  if (wanted("iptw")) {
    guarded(out, "iptw", [&] { out.psi["iptw"] = iptw(dataset, g_cv); });
  }
  if (wanted("aiptw")) {
    guarded(out, "aiptw", [&] {
      const EstimateWithCI e = aiptw_with_ci(dataset, q0, g_cv);
      out.psi["aiptw"] = e.psi;
      out.ci["aiptw"] = e;
    });
  }
  if (wanted("tmle")) {
    guarded(out, "tmle", [&] {
      const TmleResult r = plain_tmle(dataset, q0, path, h_cv, spec.bounds);
      out.psi["tmle"] = r.psi;
      out.ci["tmle"] = wald_ci(r.psi, r.upsilon, dataset.size(), "tmle");
    });
  }

  std::optional<CtmleFit> lfit;
  if (wanted("lctmle") || transfer) {
    guarded(out, "lctmle", [&] {
      lfit.emplace(collaborative_fit(dataset, q0, path, h_cv, spec.stopping, spec.bounds,
                                     base.fork(3), spec.v_folds));
      if (wanted("lctmle")) {
        out.psi["lctmle"] = lfit->psi;
        out.ci["lctmle"] = lfit->ci;
      }
    });
  }
  if (wanted("lpctmle")) {
    guarded(out, "lpctmle", [&] {
      const TmleResult r = pseudo_ctmle_at(dataset, q0, path, h_cv, spec.bounds);
      out.psi["lpctmle"] = r.psi;
      out.ci["lpctmle"] = wald_ci(r.psi, r.upsilon, dataset.size(), "lpctmle");
    });
  }

  if (transfer) {
    if (!lfit) {
      out.errors.push_back("primed: collaborative fit unavailable");
      return out;
    }
    const double h_k = lfit->h_selected;
    const PropensityFn g_k = propensity_fn(path, h_k, spec.bounds);
    if (wanted("iptw_p")) {
      guarded(out, "iptw_p", [&] { out.psi["iptw_p"] = iptw(dataset, g_k); });
    }
    if (wanted("aiptw_p")) {
      guarded(out, "aiptw_p", [&] {
        const EstimateWithCI e = aiptw_with_ci(dataset, q0, g_k);
        out.psi["aiptw_p"] = e.psi;
        out.ci["aiptw_p"] = e;
      });
    }
    if (wanted("tmle_p")) {
      guarded(out, "tmle_p", [&] {
        const TmleResult r = plain_tmle(dataset, q0, path, h_k, spec.bounds);
        out.psi["tmle_p"] = r.psi;
        out.ci["tmle_p"] = wald_ci(r.psi, r.upsilon, dataset.size(), "tmle_p");
      });
    }
    if (wanted("lpctmle_p")) {
      guarded(out, "lpctmle_p", [&] {
        const TmleResult r = pseudo_ctmle_at(dataset, q0, path, h_k, spec.bounds);
        out.psi["lpctmle_p"] = r.psi;
        out.ci["lpctmle_p"] = wald_ci(r.psi, r.upsilon, dataset.size(), "lpctmle_p");
      });
    }
  }
  return out;
}

CellStats aggregate_cell(const std::string& estimator, const std::vector<RepOutcome>& reps,
                         double psi0, double tmle_mean_width) {
  std::vector<double> psis;
  std::vector<EstimateWithCI> cis;
  for (const auto& rep : reps) {
    const auto it = rep.psi.find(estimator);
    if (it == rep.psi.end()) continue;
    psis.push_back(it->second);
    const auto ci_it = rep.ci.find(estimator);
    if (ci_it != rep.ci.end()) cis.push_back(ci_it->second);
  }
  return aggregate_values(estimator, psis, cis, psi0, tmle_mean_width);
}

double mean_ci_width(const std::vector<RepOutcome>& reps, const std::string& estimator) {
  double acc = 0.0;
  long count = 0;
  for (const auto& rep : reps) {
    const auto it = rep.ci.find(estimator);
    if (it == rep.ci.end()) continue;
    acc += it->second.ci_high - it->second.ci_low;
    ++count;
  }
  return count > 0 ? acc / static_cast<double>(count) : 0.0;
}

ScenarioReport run_impl(ScenarioSpec spec, bool transfer) {
  const auto t_start = std::chrono::steady_clock::now();
  if (spec.triplets.empty()) spec.triplets = make_triplets(spec.id, {}, {}, {});
  if (spec.estimators.empty()) spec.estimators = default_estimators(spec.id);
  if (spec.b < 1) throw std::invalid_argument("run_scenario: b must be positive");
  spec.bounds.validate();
  spec.stopping.validate();

  // Oracle truth per distinct (p, delta), cached across runs. Coverage is
  // only scored against an oracle below the SE budget.
  OracleCache cache(spec.oracle_cache_file);
  std::map<std::pair<int, double>, OracleEstimate> psi0;
  for (const auto& t : spec.triplets) {
    const auto key = std::make_pair(t.p, t.delta);
    if (psi0.count(key)) continue;
    SyntheticConfig config{t.p, t.delta};
    const OracleEstimate est =
        cache.get_or_compute(config, spec.oracle_draws, spec.oracle_seed, spec.threads);
    if (!(est.std_error < 5e-4)) {
      throw std::invalid_argument("oracle standard error too large; increase --draws");
    }
    psi0[key] = est;
  }

  // One task per (triplet, repetition); outputs keyed by task index.
  const long n_triplets = static_cast<long>(spec.triplets.size());
  const long n_tasks = n_triplets * spec.b;
  std::vector<std::vector<RepOutcome>> results(spec.triplets.size());
  std::vector<SyntheticSampler> samplers;
  samplers.reserve(spec.triplets.size());
  for (std::size_t t = 0; t < spec.triplets.size(); ++t) {
    results[t].resize(static_cast<std::size_t>(spec.b));
    samplers.emplace_back(SyntheticConfig{spec.triplets[t].p, spec.triplets[t].delta});
  }
  parallel_tasks(n_tasks, spec.threads, [&](long task) {
    const std::size_t t = static_cast<std::size_t>(task / spec.b);
    const int rep = static_cast<int>(task % spec.b);
    results[t][static_cast<std::size_t>(rep)] =
        run_repetition(spec, samplers[t], spec.triplets[t], t, rep, transfer);
  });

  ScenarioReport report;
  report.id = spec.id;
  report.seed = spec.seed;
  report.b = spec.b;
  for (std::size_t t = 0; t < spec.triplets.size(); ++t) {
    TripletReport tr;
    tr.triplet = spec.triplets[t];
    const OracleEstimate& oracle = psi0.at({spec.triplets[t].p, spec.triplets[t].delta});
    tr.psi0 = oracle.value;
    tr.psi0_se = oracle.std_error;
    const double tmle_width = mean_ci_width(results[t], "tmle");
    for (const auto& est : spec.estimators) {
      tr.cells.push_back(aggregate_cell(est, results[t], tr.psi0, tmle_width));
    }
    for (std::size_t r = 0; r < results[t].size(); ++r) {
      for (const auto& err : results[t][r].errors) {
        tr.failures.push_back("rep " + std::to_string(r) + " " + err);
      }
    }
    report.triplets.push_back(std::move(tr));
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return report;
}

}  // namespace

ScenarioReport run_scenario(const ScenarioSpec& spec) {
  if (spec.id == "transfer") {
    throw std::invalid_argument("run_scenario: use run_transfer for the transfer id");
  }
  return run_impl(spec, false);
}

ScenarioReport run_transfer(const ScenarioSpec& spec) {
  if (spec.id != "transfer") throw std::invalid_argument("run_transfer: spec.id must be transfer");
  return run_impl(spec, true);
}

CellStats aggregate_values(const std::string& estimator, const std::vector<double>& psis,
                           const std::vector<EstimateWithCI>& cis, double psi0,
                           double tmle_mean_width) {
  CellStats cell;
  cell.estimator = estimator;
  cell.completed = static_cast<int>(psis.size());
  if (psis.empty()) return cell;

  const double nb = static_cast<double>(psis.size());
  double mean = 0.0;
  for (double x : psis) mean += x;
  mean /= nb;
  cell.bias = mean - psi0;
  double var = 0.0;
  for (double x : psis) var += (x - mean) * (x - mean);
  var /= nb;  // population-style divisor
  cell.se = std::sqrt(var);
  cell.mse = cell.bias * cell.bias + cell.se * cell.se;

  if (!cis.empty()) {
    int covered = 0;
    double mean_se = 0.0;
    double mean_width = 0.0;
    for (const auto& ci : cis) {
      if (ci.ci_low <= psi0 && psi0 <= ci.ci_high) ++covered;
      mean_se += ci.se;
      mean_width += ci.ci_high - ci.ci_low;
    }
    const double nc = static_cast<double>(cis.size());
    cell.coverage = static_cast<double>(covered) / nc;
    if (cell.se > 0.0) cell.ratio = (mean_se / nc) / cell.se;
    if (tmle_mean_width > 0.0) cell.ci_width_rel = (mean_width / nc) / tmle_mean_width;
  }
  return cell;
}

namespace {

std::string g17(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::string opt_g17(const std::optional<double>& x) { return x ? g17(*x) : std::string(); }

}  // namespace

void emit_report(const ScenarioReport& report, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const auto path_of = [&](const char* name) {
    return (std::filesystem::path(out_dir) / name).string();
  };

  {
    std::ofstream out(path_of("summary.csv"));
    if (!out) throw std::runtime_error("emit_report: cannot write summary.csv");
    out << "scenario,n,p,delta,estimator,bias_x10,se_x10,mse_x100,ratio,coverage,"
           "ci_width_rel,completed_reps\n";
    for (const auto& t : report.triplets) {
      for (const auto& c : t.cells) {
        out << report.id << ',' << t.triplet.n << ',' << t.triplet.p << ','
            << g17(t.triplet.delta) << ',' << c.estimator << ',' << g17(c.bias * 10.0) << ','
            << g17(c.se * 10.0) << ',' << g17(c.mse * 100.0) << ',' << opt_g17(c.ratio) << ','
            << opt_g17(c.coverage) << ',' << opt_g17(c.ci_width_rel) << ',' << c.completed
            << '\n';
      }
    }
  }

  {
    std::ofstream out(path_of("figure_data.csv"));
    if (!out) throw std::runtime_error("emit_report: cannot write figure_data.csv");
    out << "scenario,n,p,delta,estimator,metric,value\n";
    for (const auto& t : report.triplets) {
      for (const auto& c : t.cells) {
        const auto row = [&](const char* metric, double value) {
          out << report.id << ',' << t.triplet.n << ',' << t.triplet.p << ','
              << g17(t.triplet.delta) << ',' << c.estimator << ',' << metric << ',' << g17(value)
              << '\n';
        };
        row("mse_x100", c.mse * 100.0);
        if (c.coverage) row("coverage", *c.coverage);
        if (c.ci_width_rel) row("ci_width_rel", *c.ci_width_rel);
      }
    }
  }

  {
    nlohmann::json meta;
    meta["scenario"] = report.id;
    meta["seed"] = report.seed;
    meta["b"] = report.b;
    meta["library_version"] = kVersion;
    meta["wall_seconds"] = report.wall_seconds;
    long failures = 0;
    for (const auto& t : report.triplets) failures += static_cast<long>(t.failures.size());
    meta["failed_estimator_runs"] = failures;
    std::ofstream out(path_of("run_meta.json"));
    if (!out) throw std::runtime_error("emit_report: cannot write run_meta.json");
    out << meta.dump(2) << '\n';
  }
}

std::vector<SummaryRow> read_summary_csv(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("read_summary_csv: cannot open " + file);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("read_summary_csv: empty file");
  std::vector<SummaryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 12) cells.emplace_back();
    SummaryRow row;
    row.scenario = cells[0];
    row.n = std::stol(cells[1]);
    row.p = std::stoi(cells[2]);
    row.delta = std::stod(cells[3]);
    row.estimator = cells[4];
    row.bias_x10 = std::stod(cells[5]);
    row.se_x10 = std::stod(cells[6]);
    row.mse_x100 = std::stod(cells[7]);
    if (!cells[8].empty()) row.ratio = std::stod(cells[8]);
    if (!cells[9].empty()) row.coverage = std::stod(cells[9]);
    if (!cells[10].empty()) row.ci_width_rel = std::stod(cells[10]);
    row.completed_reps = std::stoi(cells[11]);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace ctmle
