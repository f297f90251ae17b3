#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <vector>

#include "ctmle/dataset.hpp"
#include "ctmle/lasso_path.hpp"

namespace ctmle {

using PropensityFn = std::function<double(CovariateRow)>;

/// Conditional likelihood of the observed arm: a*g + (1-a)*(1-g).
double arm_likelihood(double g, int a);

/// Negative log-likelihood loss for a propensity value.
double propensity_loss(double g, int a);

/// Cross-entropy loss for an outcome mean; valid for continuous y in [0,1].
double outcome_loss(double qbar, double y);

/// Fluctuation direction evaluated per observation: either the scalar
/// (2a-1)/lG(a,w) or that value paired with its own penalty-derivative
/// g'(w)/lG(a,w)^2.
class CleverCovariate {
 public:
  enum class Kind { kScalar, kTwoDim };
  using EvalFn = std::function<void(int a, CovariateRow w, double* out)>;

  CleverCovariate(Kind kind, EvalFn eval) : kind_(kind), eval_(std::move(eval)) {}

  Kind kind() const { return kind_; }
  int dim() const { return kind_ == Kind::kScalar ? 1 : 2; }
  void evaluate(int a, CovariateRow w, double* out) const { eval_(a, w, out); }

  static CleverCovariate scalar(PropensityFn g);
  static CleverCovariate two_dim(PropensityFn g, std::function<double(CovariateRow)> g_derivative);

 private:
  Kind kind_;
  EvalFn eval_;
};

/// Conditional outcome mean (a, w) -> (0, 1): a base model whose value is
/// clipped away from {0, 1}, composed with logistic-scale fluctuations.
/// Copy-on-extend; immutable once built.
class OutcomeModel {
 public:
  using BaseFn = std::function<double(int a, CovariateRow w)>;

  struct Fluctuation {
    CleverCovariate covariate;
    Eigen::VectorXd epsilon;
  };

  explicit OutcomeModel(BaseFn base, double clip = 1e-6);

  static OutcomeModel constant(double q1, double q0, double clip = 1e-6);

  double operator()(int a, CovariateRow w) const;
  double logit_value(int a, CovariateRow w) const;

  OutcomeModel with_fluctuation(CleverCovariate covariate, Eigen::VectorXd epsilon) const;

  const std::vector<Fluctuation>& fluctuations() const { return fluctuations_; }
  double clip() const { return clip_; }

 private:
  BaseFn base_;
  double clip_;
  std::vector<Fluctuation> fluctuations_;
};

/// Weighted residual term of the influence curve:
/// (2a-1)/lG(a,w) * (y - qbar(a,w)).
double influence_residual(const OutcomeModel& q, const PropensityFn& g, const Observation& o);

/// Full efficient influence curve value at one observation:
/// influence_residual + qbar(1,w) - qbar(0,w) - psi.
double influence_curve(const OutcomeModel& q, const PropensityFn& g, double psi,
                       const Observation& o);

struct TmleResult {
  double psi = 0.0;
  Eigen::VectorXd epsilon;
  OutcomeModel q_star;
  double score_residual = 0.0;  // empirical mean of the influence curve
  double upsilon = 0.0;         // empirical second moment of the influence curve
};

/// Fits the fluctuation parameter minimizing the empirical outcome loss of
/// logit qbar_eps = logit q0 + clever . eps, appends it to q0, and reports
/// the plug-in estimate with its solved score equations. Throws
/// FluctuationDivergence when |eps| runs past `eps_cap`.
TmleResult fluctuate_and_solve(const Dataset& dataset, const OutcomeModel& q0,
                               const CleverCovariate& clever, const PropensityFn& g,
                               double eps_cap = 50.0);

/// Root of the scalar fluctuation score (1/n) sum c_i (y_i - expit(l_i + c_i e))
/// on precomputed arrays. Building block shared with the collaborative
/// construction so both paths solve the score equation identically.
double solve_scalar_fluctuation(const Eigen::VectorXd& logit_obs, const Eigen::VectorXd& c_obs,
                                const Eigen::VectorXd& y, double eps_cap = 50.0);

/// Outcome loss evaluated from the logit, stable for any finite logit:
/// softplus(l) - y * l.
double outcome_loss_from_logit(double logit_value, double y);

/// One-step targeted estimate at a fixed grid penalty: scalar clever
/// covariate built from the path's truncated propensity at h.
TmleResult plain_tmle(const Dataset& dataset, const OutcomeModel& q0, const LassoPath& path,
                      double h, const PropensityBounds& bounds);

/// Truncated-propensity closure for one grid penalty; owns a copy of the
/// coefficients so it outlives the path.
PropensityFn propensity_fn(const LassoPath& path, double h, const PropensityBounds& bounds);

/// Finite-difference path-derivative closure at a grid penalty (same
/// neighbour rule as LassoPath::derivative).
std::function<double(CovariateRow)> propensity_derivative_fn(const LassoPath& path, double h,
                                                             const PropensityBounds& bounds);

}  // namespace ctmle
