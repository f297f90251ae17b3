#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ctmle/dataset.hpp"
#include "ctmle/estimators.hpp"
#include "ctmle/lasso_path.hpp"
#include "ctmle/targeting.hpp"

namespace ctmle {

/// How each recursion step picks its penalty among the candidates below the
/// previous one, given the per-candidate refitted outcome risks.
///   kLargestImprover: the largest penalty whose refit strictly improves the
///     running risk -- a one-notch-at-a-time descent that leaves the
///     cross-validated index selection the real choice of depth.
///   kGlobalArgmin: the literal risk minimizer over the whole window
///     (largest one on ties); tends to jump straight to the deep end of the
///     grid because the refitted training risk decreases with flexibility.
enum class StepSelection { kLargestImprover, kGlobalArgmin };

/// When to stop extending the collaborative sequence. Grid exhaustion is
/// always in force; the plateau rule (last plateau_m point estimates inside
/// an interval shorter than sqrt(upsilon / (10 n))) is opt-in.
struct StoppingPolicy {
  std::size_t k_max = 0;         // 0 means "the grid size"
  double h_floor = 0.0;          // <= 0 means "the grid minimum"
  int plateau_m = 3;
  bool plateau_enabled = false;
  StepSelection step_selection = StepSelection::kLargestImprover;

  void validate() const;
};

/// The recursive collaborative construction: a strictly decreasing penalty
/// sequence whose running outcome model is re-targeted at each step, with
/// strictly decreasing training outcome loss and a solved score equation at
/// every step.
class CtmleSequence {
 public:
  struct Step {
    double h = 0.0;
    std::size_t candidate_index = 0;  // position in candidate_grid()
    double epsilon = 0.0;
    OutcomeModel model;
    double train_risk = 0.0;      // empirical outcome loss of `model`
    double psi = 0.0;             // plug-in estimate at this step
    double score_residual = 0.0;  // empirical mean of the influence curve
    double upsilon = 0.0;         // empirical second moment of the influence curve
  };

  /// Tentative fluctuation stored for one candidate grid penalty: the step
  /// window it belongs to and the fitted epsilon at that penalty.
  struct StoredCandidate {
    std::size_t step = 0;  // 1-based owning step
    double epsilon = 0.0;
    CleverCovariate clever;
  };

  CtmleSequence(OutcomeModel initial, double origin_h, std::vector<double> candidate_grid,
                std::vector<Step> steps, std::vector<std::optional<StoredCandidate>> stored,
                std::vector<std::string> diagnostics);

  std::size_t size() const { return steps_.size(); }
  const std::vector<Step>& steps() const { return steps_; }
  double origin_h() const { return origin_h_; }
  const OutcomeModel& initial_model() const { return initial_; }

  /// Grid penalties eligible for the construction (inside [h_floor, origin)).
  const std::vector<double>& candidate_grid() const { return candidate_grid_; }

  /// Materializes the stored tentative model at a candidate grid penalty.
  OutcomeModel model_at_candidate(std::size_t candidate_index) const;
  bool has_stored_candidate(std::size_t candidate_index) const;

  const std::vector<std::string>& diagnostics() const { return diagnostics_; }

 private:
  OutcomeModel initial_;
  double origin_h_;
  std::vector<double> candidate_grid_;
  std::vector<Step> steps_;
  std::vector<std::optional<StoredCandidate>> stored_;
  std::vector<std::string> diagnostics_;
};

/// Nearest-member lookup over the sequence penalties, preferring the larger
/// member on exact midpoint ties.
class StepMap {
 public:
  explicit StepMap(const CtmleSequence& sequence);

  std::size_t lookup_index(double h) const;  // 0-based step index
  std::pair<double, const OutcomeModel&> lookup(double h) const;

 private:
  std::vector<double> h_values_;
  std::vector<OutcomeModel> models_;
};

std::pair<double, OutcomeModel> step_lookup(const StepMap& map, double h);

/// Iterates the collaborative recursion from start_h down the grid under the
/// stopping policy. Throws NoCandidateError when no grid value lies in
/// [h_floor, start_h); a candidate whose fluctuation diverges is skipped with
/// a recorded diagnostic.
CtmleSequence build_sequence(const Dataset& dataset, const OutcomeModel& q0,
                             const LassoPath& path, double start_h, const StoppingPolicy& policy,
                             const PropensityBounds& bounds);

/// The penalty-selection rule: the largest 1-based k whose sequence penalty
/// is >= h_star, or 1 when none is.
std::size_t kappa_for_target(const std::vector<double>& sequence_h, double h_star);

/// Cross-validated selection of the sequence index: per fold, refits the
/// path over the candidate grid on the training rows, rebuilds the
/// collaborative sequence there (from the full-data origin penalty), scores
/// every candidate penalty by the validation outcome loss of its
/// nearest-member step model, and maps the fold-averaged argmin back into
/// the full-data sequence.
std::size_t select_kappa(const Dataset& dataset, const OutcomeModel& q0,
                         const CtmleSequence& full_sequence, const FoldScheme& folds,
                         const StoppingPolicy& policy, const PropensityBounds& bounds);

struct CtmleFit {
  CtmleSequence sequence;
  std::size_t kappa = 1;  // 1-based selected index
  double h_selected = 0.0;
  double psi = 0.0;
  double upsilon = 0.0;
  EstimateWithCI ci;
};

/// Sequence construction plus cross-validated index selection on a fitted
/// path, redrawing degenerate fold schemes from `fold_rng`.
CtmleFit collaborative_fit(const Dataset& dataset, const OutcomeModel& q0, const LassoPath& path,
                           double start_h, const StoppingPolicy& policy,
                           const PropensityBounds& bounds, Rng fold_rng, int v_folds);

/// The full estimator: penalty grid, path fit, likelihood-based
/// cross-validation for the starting penalty, collaborative sequence, index
/// selection, and the Wald interval at the selected step.
CtmleFit lasso_ctmle(const Dataset& dataset, const OutcomeModel& q0, const StoppingPolicy& policy,
                     const PropensityBounds& bounds, RngSpec rng, int v_folds = 10);

/// Single two-dimensional fluctuation at a fixed penalty: the clever
/// covariate is enriched with the path-derivative direction so both score
/// equations are solved at once.
TmleResult pseudo_ctmle_at(const Dataset& dataset, const OutcomeModel& q0, const LassoPath& path,
                           double h, const PropensityBounds& bounds);

/// The shortcut estimator: cross-validated penalty, then one enriched
/// fluctuation there.
TmleResult lasso_pseudo_ctmle(const Dataset& dataset, const OutcomeModel& q0,
                              const PropensityBounds& bounds, RngSpec rng, int v_folds = 10);

/// Diagnostics dump: columns k, h_k, epsilon_k, train_l2_risk, score_residual.
void write_trace_csv(const CtmleSequence& sequence, const std::string& file);

}  // namespace ctmle
