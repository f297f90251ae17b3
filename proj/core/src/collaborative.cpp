#include "ctmle/collaborative.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "ctmle/errors.hpp"
#include "ctmle/math.hpp"

namespace ctmle {

void StoppingPolicy::validate() const {
  if (plateau_m < 1) throw std::invalid_argument("StoppingPolicy: plateau_m must be >= 1");
}

namespace {

struct BuildStep {
  std::size_t cand = 0;  // candidate position (descending penalty order)
  double h = 0.0;
  double epsilon = 0.0;
  double train_risk = 0.0;
  double psi = 0.0;
  double score_residual = 0.0;
  double upsilon = 0.0;
};

struct BuildCandidate {
  bool assigned = false;
  bool skipped = false;
  std::size_t step = 0;  // 1-based owning step when assigned
  double epsilon = 0.0;
};

struct BuildResult {
  std::vector<BuildStep> steps;
  std::vector<BuildCandidate> stored;
  std::vector<std::string> diagnostics;
};

// The recursion on precomputed arrays. `cand_idx` lists path grid indices in
// decreasing-penalty order; the running model state is kept as logit vectors
// that accumulate fluctuation terms exactly as OutcomeModel evaluation does.
BuildResult run_recursion(const Dataset& dataset, const OutcomeModel& q0, const LassoPath& path,
                          const std::vector<std::size_t>& cand_idx, const StoppingPolicy& policy,
                          const PropensityBounds& bounds) {
  const Eigen::Index n = dataset.size();
  const std::size_t n_cand = cand_idx.size();
  const std::size_t k_max = policy.k_max > 0 ? policy.k_max : path.grid().size();

  Eigen::MatrixXd g_mat(n, static_cast<Eigen::Index>(n_cand));
  Eigen::MatrixXd c_obs(n, static_cast<Eigen::Index>(n_cand));
  for (std::size_t c = 0; c < n_cand; ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double g = path.propensity_at(cand_idx[c], dataset.covariates(i), bounds);
      g_mat(i, static_cast<Eigen::Index>(c)) = g;
      c_obs(i, static_cast<Eigen::Index>(c)) =
          dataset.treatment(i) == 1 ? 1.0 / g : -1.0 / (1.0 - g);
    }
  }

  Eigen::VectorXd l_obs(n), l_a1(n), l_a0(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    l_a1(i) = q0.logit_value(1, dataset.covariates(i));
    l_a0(i) = q0.logit_value(0, dataset.covariates(i));
    l_obs(i) = dataset.treatment(i) == 1 ? l_a1(i) : l_a0(i);
  }
  const Eigen::VectorXd& y = dataset.outcomes();

  const auto mean_risk = [&](const Eigen::VectorXd& logits) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) acc += outcome_loss_from_logit(logits(i), y(i));
    return acc / static_cast<double>(n);
  };

  BuildResult out;
  out.stored.resize(n_cand);
  double risk = mean_risk(l_obs);
  std::size_t window_begin = 0;

  const bool greedy_argmin = policy.step_selection == StepSelection::kGlobalArgmin;
  std::vector<double> sweep_eps(n_cand, 0.0);
  std::vector<char> sweep_ok(n_cand, 0);
  Eigen::VectorXd trial(n);
  while (window_begin < n_cand && out.steps.size() < k_max) {
    bool have_best = false;
    std::size_t best_pos = 0;
    double best_eps = 0.0;
    double best_risk = std::numeric_limits<double>::infinity();
    for (std::size_t pos = window_begin; pos < n_cand; ++pos) {
      double eps;
      try {
        eps = solve_scalar_fluctuation(l_obs, c_obs.col(static_cast<Eigen::Index>(pos)), y);
      } catch (const FluctuationDivergence&) {
        sweep_ok[pos] = 0;
        out.stored[pos].skipped = true;
        char msg[128];
        std::snprintf(msg, sizeof(msg), "step %zu: divergent fluctuation at h=%.6g, skipped",
                      out.steps.size() + 1, path.grid().values[cand_idx[pos]]);
        out.diagnostics.emplace_back(msg);
        continue;
      }
      sweep_ok[pos] = 1;
      sweep_eps[pos] = eps;
      trial = l_obs + eps * c_obs.col(static_cast<Eigen::Index>(pos));
      const double r = mean_risk(trial);
      if (!have_best || r < best_risk) {  // ties keep the larger penalty
        have_best = true;
        best_pos = pos;
        best_eps = eps;
        best_risk = r;
      }
      if (!greedy_argmin && best_risk < risk) break;  // largest improving penalty
    }
    if (!have_best) {
      out.diagnostics.emplace_back("every candidate fluctuation diverged; sequence stopped");
      break;
    }
    if (!(best_risk < risk)) break;  // no strict improvement left

    for (std::size_t pos = window_begin; pos <= best_pos; ++pos) {
      if (!sweep_ok[pos]) continue;
      out.stored[pos].assigned = true;
      out.stored[pos].step = out.steps.size() + 1;
      out.stored[pos].epsilon = sweep_eps[pos];
    }

    const auto col = c_obs.col(static_cast<Eigen::Index>(best_pos));
    l_obs += best_eps * col;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double g = g_mat(i, static_cast<Eigen::Index>(best_pos));
      l_a1(i) += best_eps * (1.0 / g);
      l_a0(i) += best_eps * (-1.0 / (1.0 - g));
    }
    risk = best_risk;

    BuildStep step;
    step.cand = best_pos;
    step.h = path.grid().values[cand_idx[best_pos]];
    step.epsilon = best_eps;
    step.train_risk = best_risk;
    double psi_acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) psi_acc += expit(l_a1(i)) - expit(l_a0(i));
    step.psi = psi_acc / static_cast<double>(n);
    double score = 0.0, second = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = col(i) * (y(i) - expit(l_obs(i))) + expit(l_a1(i)) - expit(l_a0(i)) -
                       step.psi;
      score += d;
      second += d * d;
    }
    step.score_residual = score / static_cast<double>(n);
    step.upsilon = second / static_cast<double>(n);
    out.steps.push_back(step);

    if (policy.plateau_enabled &&
        out.steps.size() >= static_cast<std::size_t>(policy.plateau_m)) {
      const std::size_t first = out.steps.size() - static_cast<std::size_t>(policy.plateau_m);
      double lo = out.steps[first].psi, hi = out.steps[first].psi;
      for (std::size_t s = first; s < out.steps.size(); ++s) {
        lo = std::min(lo, out.steps[s].psi);
        hi = std::max(hi, out.steps[s].psi);
      }
      const double eta_sq = out.steps[first].upsilon / (10.0 * static_cast<double>(n));
      if ((hi - lo) * (hi - lo) < eta_sq) break;
    }
    window_begin = best_pos + 1;
  }
  return out;
}

std::vector<std::size_t> candidate_indices(const LassoPath& path, double start_h,
                                           double h_floor) {
  std::vector<std::size_t> idx;
  const auto& values = path.grid().values;
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (values[k] < start_h && values[k] >= h_floor) idx.push_back(k);
  }
  return idx;
}

}  // namespace

CtmleSequence::CtmleSequence(OutcomeModel initial, double origin_h,
                             std::vector<double> candidate_grid, std::vector<Step> steps,
                             std::vector<std::optional<StoredCandidate>> stored,
                             std::vector<std::string> diagnostics)
    : initial_(std::move(initial)),
      origin_h_(origin_h),
      candidate_grid_(std::move(candidate_grid)),
      steps_(std::move(steps)),
      stored_(std::move(stored)),
      diagnostics_(std::move(diagnostics)) {
  double prev_h = origin_h_;
  double prev_risk = std::numeric_limits<double>::infinity();
  for (const Step& s : steps_) {
    if (!(s.h < prev_h)) throw std::invalid_argument("CtmleSequence: penalties must decrease");
    if (!(s.train_risk < prev_risk)) {
      throw std::invalid_argument("CtmleSequence: training risk must decrease");
    }
    prev_h = s.h;
    prev_risk = s.train_risk;
  }
}

bool CtmleSequence::has_stored_candidate(std::size_t candidate_index) const {
  return candidate_index < stored_.size() && stored_[candidate_index].has_value();
}

OutcomeModel CtmleSequence::model_at_candidate(std::size_t candidate_index) const {
  if (!has_stored_candidate(candidate_index)) {
    throw std::out_of_range("CtmleSequence: no stored model at this candidate");
  }
  const StoredCandidate& c = *stored_[candidate_index];
  const OutcomeModel& prefix = c.step == 1 ? initial_ : steps_[c.step - 2].model;
  return prefix.with_fluctuation(c.clever, Eigen::VectorXd::Constant(1, c.epsilon));
}

StepMap::StepMap(const CtmleSequence& sequence) {
  if (sequence.size() == 0) throw std::invalid_argument("StepMap: empty sequence");
  for (const auto& s : sequence.steps()) {
    h_values_.push_back(s.h);
    models_.push_back(s.model);
  }
}

std::size_t StepMap::lookup_index(double h) const {
  std::size_t best = 0;
  double best_dist = std::abs(h - h_values_[0]);
  for (std::size_t k = 1; k < h_values_.size(); ++k) {
    const double d = std::abs(h - h_values_[k]);
    if (d < best_dist) {  // ties keep the earlier (larger) member
      best = k;
      best_dist = d;
    }
  }
  return best;
}

std::pair<double, const OutcomeModel&> StepMap::lookup(double h) const {
  const std::size_t k = lookup_index(h);
  return {h_values_[k], models_[k]};
}

std::pair<double, OutcomeModel> step_lookup(const StepMap& map, double h) {
  auto [value, model] = map.lookup(h);
  return {value, model};
}

CtmleSequence build_sequence(const Dataset& dataset, const OutcomeModel& q0,
                             const LassoPath& path, double start_h, const StoppingPolicy& policy,
                             const PropensityBounds& bounds) {
  policy.validate();
  bounds.validate();
  const double h_floor = policy.h_floor > 0.0 ? policy.h_floor : path.grid().min_value();
  const std::vector<std::size_t> cand_idx = candidate_indices(path, start_h, h_floor);
  if (cand_idx.empty()) {
    throw NoCandidateError("build_sequence: no grid penalty below the starting penalty");
  }

  BuildResult built = run_recursion(dataset, q0, path, cand_idx, policy, bounds);

  std::vector<CtmleSequence::Step> steps;
  steps.reserve(built.steps.size());
  OutcomeModel running = q0;
  for (const BuildStep& b : built.steps) {
    CleverCovariate clever = CleverCovariate::scalar(propensity_fn(path, b.h, bounds));
    running = running.with_fluctuation(clever, Eigen::VectorXd::Constant(1, b.epsilon));
    steps.push_back({b.h, b.cand, b.epsilon, running, b.train_risk, b.psi, b.score_residual,
                     b.upsilon});
  }

  std::vector<double> cand_values;
  cand_values.reserve(cand_idx.size());
  for (std::size_t idx : cand_idx) cand_values.push_back(path.grid().values[idx]);

  std::vector<std::optional<CtmleSequence::StoredCandidate>> stored(cand_idx.size());
  for (std::size_t pos = 0; pos < cand_idx.size(); ++pos) {
    if (!built.stored[pos].assigned) continue;
    stored[pos] = CtmleSequence::StoredCandidate{
        built.stored[pos].step, built.stored[pos].epsilon,
        CleverCovariate::scalar(propensity_fn(path, cand_values[pos], bounds))};
  }
  return CtmleSequence(q0, start_h, std::move(cand_values), std::move(steps), std::move(stored),
                       std::move(built.diagnostics));
}

std::size_t kappa_for_target(const std::vector<double>& sequence_h, double h_star) {
  if (sequence_h.empty()) throw std::invalid_argument("kappa_for_target: empty sequence");
  std::size_t kappa = 0;
  for (std::size_t k = 0; k < sequence_h.size(); ++k) {
    if (sequence_h[k] >= h_star) kappa = k + 1;
  }
  return kappa == 0 ? 1 : kappa;
}

std::size_t select_kappa(const Dataset& dataset, const OutcomeModel& q0,
                         const CtmleSequence& full_sequence, const FoldScheme& folds,
                         const StoppingPolicy& policy, const PropensityBounds& bounds) {
  if (full_sequence.size() == 0) {
    throw EstimationFailure("select_kappa: empty collaborative sequence");
  }
  const std::vector<double>& candidates = full_sequence.candidate_grid();
  PenaltyGrid fold_grid{candidates};
  fold_grid.validate();

  std::vector<double> cv_risk(candidates.size(), 0.0);
  for (int fold = 1; fold <= folds.fold_count(); ++fold) {
    auto [train, valid] = split_fold(dataset, folds, fold);
    const LassoPath fold_path = fit_path(train, fold_grid);
    std::vector<std::size_t> all_idx(candidates.size());
    for (std::size_t c = 0; c < all_idx.size(); ++c) all_idx[c] = c;
    const BuildResult fold_build =
        run_recursion(train, q0, fold_path, all_idx, policy, bounds);

    // Per-step validation risks, accumulated incrementally over the fold
    // sequence's fluctuation chain.
    const Eigen::Index nv = valid.size();
    Eigen::VectorXd l_obs(nv);
    for (Eigen::Index i = 0; i < nv; ++i) {
      l_obs(i) = q0.logit_value(valid.treatment(i), valid.covariates(i));
    }
    const auto mean_risk = [&]() {
      double acc = 0.0;
      for (Eigen::Index i = 0; i < nv; ++i) {
        acc += outcome_loss_from_logit(l_obs(i), valid.outcome(i));
      }
      return acc / static_cast<double>(nv);
    };
    std::vector<double> risk_step;
    risk_step.push_back(mean_risk());  // the unfluctuated model, used when K = 0
    std::vector<double> step_h;
    for (const BuildStep& s : fold_build.steps) {
      for (Eigen::Index i = 0; i < nv; ++i) {
        const double g = fold_path.propensity_at(s.cand, valid.covariates(i), bounds);
        const double c = valid.treatment(i) == 1 ? 1.0 / g : -1.0 / (1.0 - g);
        l_obs(i) += s.epsilon * c;
      }
      risk_step.push_back(mean_risk());
      step_h.push_back(s.h);
    }

    for (std::size_t c = 0; c < candidates.size(); ++c) {
      std::size_t pick = 0;
      if (!step_h.empty()) {
        std::size_t best = 0;
        double best_dist = std::abs(candidates[c] - step_h[0]);
        for (std::size_t s = 1; s < step_h.size(); ++s) {
          const double d = std::abs(candidates[c] - step_h[s]);
          if (d < best_dist) {
            best = s;
            best_dist = d;
          }
        }
        pick = best + 1;
      }
      cv_risk[c] += risk_step[pick];
    }
  }

  std::size_t best = 0;
  for (std::size_t c = 1; c < candidates.size(); ++c) {
    if (cv_risk[c] < cv_risk[best]) best = c;  // ties keep the larger penalty
  }
  std::vector<double> seq_h;
  for (const auto& s : full_sequence.steps()) seq_h.push_back(s.h);
  return kappa_for_target(seq_h, candidates[best]);
}

CtmleFit collaborative_fit(const Dataset& dataset, const OutcomeModel& q0, const LassoPath& path,
                           double start_h, const StoppingPolicy& policy,
                           const PropensityBounds& bounds, Rng fold_rng, int v_folds) {
  CtmleSequence sequence = build_sequence(dataset, q0, path, start_h, policy, bounds);
  if (sequence.size() == 0) {
    throw EstimationFailure("collaborative_fit: no fluctuation improved the outcome loss");
  }
  constexpr int kMaxFoldAttempts = 20;
  std::size_t kappa = 0;
  bool selected = false;
  for (int attempt = 0; attempt < kMaxFoldAttempts && !selected; ++attempt) {
    const FoldScheme folds =
        make_folds(dataset, v_folds, fold_rng.fork(static_cast<std::uint64_t>(attempt)));
    try {
      kappa = select_kappa(dataset, q0, sequence, folds, policy, bounds);
      selected = true;
    } catch (const DegenerateTreatmentError&) {
      // redraw the folds from a fresh stream
    }
  }
  if (!selected) {
    throw EstimationFailure("collaborative_fit: could not draw non-degenerate folds");
  }
  const double h_sel = sequence.steps()[kappa - 1].h;
  const double psi = sequence.steps()[kappa - 1].psi;
  const double ups = sequence.steps()[kappa - 1].upsilon;
  return CtmleFit{std::move(sequence), kappa, h_sel, psi, ups,
                  wald_ci(psi, ups, dataset.size(), "lctmle")};
}

namespace {

double cv_penalty_with_redraw(const Dataset& dataset, const PenaltyGrid& grid,
                              const PropensityBounds& bounds, Rng rng, int v_folds) {
  constexpr int kMaxFoldAttempts = 20;
  for (int attempt = 0; attempt < kMaxFoldAttempts; ++attempt) {
    const FoldScheme folds =
        make_folds(dataset, v_folds, rng.fork(static_cast<std::uint64_t>(attempt)));
    try {
      return cv_select(dataset, grid, folds, bounds);
    } catch (const DegenerateTreatmentError&) {
      // redraw
    }
  }
  throw EstimationFailure("cross-validation folds degenerate after repeated redraws");
}

}  // namespace

CtmleFit lasso_ctmle(const Dataset& dataset, const OutcomeModel& q0, const StoppingPolicy& policy,
                     const PropensityBounds& bounds, RngSpec rng, int v_folds) {
  if (!dataset.has_both_arms()) {
    throw DegenerateTreatmentError("lasso_ctmle: dataset has a single treatment arm");
  }
  const PenaltyGrid grid = default_grid(dataset);
  const LassoPath path = fit_path(dataset, grid);
  Rng base(rng);
  const double h_cv = cv_penalty_with_redraw(dataset, grid, bounds, base.fork(0x11), v_folds);
  return collaborative_fit(dataset, q0, path, h_cv, policy, bounds, base.fork(0x22), v_folds);
}

TmleResult pseudo_ctmle_at(const Dataset& dataset, const OutcomeModel& q0, const LassoPath& path,
                           double h, const PropensityBounds& bounds) {
  PropensityFn g = propensity_fn(path, h, bounds);
  CleverCovariate clever =
      CleverCovariate::two_dim(g, propensity_derivative_fn(path, h, bounds));
  return fluctuate_and_solve(dataset, q0, clever, g);
}

TmleResult lasso_pseudo_ctmle(const Dataset& dataset, const OutcomeModel& q0,
                              const PropensityBounds& bounds, RngSpec rng, int v_folds) {
  if (!dataset.has_both_arms()) {
    throw DegenerateTreatmentError("lasso_pseudo_ctmle: dataset has a single treatment arm");
  }
  const PenaltyGrid grid = default_grid(dataset);
  const LassoPath path = fit_path(dataset, grid);
  Rng base(rng);
  const double h_cv = cv_penalty_with_redraw(dataset, grid, bounds, base.fork(0x11), v_folds);
  return pseudo_ctmle_at(dataset, q0, path, h_cv, bounds);
}

void write_trace_csv(const CtmleSequence& sequence, const std::string& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("write_trace_csv: cannot open " + file);
  out << "k,h_k,epsilon_k,train_l2_risk,score_residual\n";
  char buf[160];
  std::size_t k = 1;
  for (const auto& s : sequence.steps()) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g\n", k, s.h, s.epsilon,
                  s.train_risk, s.score_residual);
    out << buf;
    ++k;
  }
}

}  // namespace ctmle
