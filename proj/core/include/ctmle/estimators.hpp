#pragma once

#include <Eigen/Dense>

#include <string>

#include "ctmle/dataset.hpp"
#include "ctmle/targeting.hpp"

namespace ctmle {

/// Probit working model for the conditional outcome mean, deliberately
/// restricted to covariates w3..w10 with arm-specific coefficients:
/// qbar(a, w) = Phi(intercept_a + theta_a . (w3..w10)). Mis-specified by
/// construction (w1 and w2 never enter).
struct WorkingModelFit {
  double intercept0 = 0.0;
  double intercept1 = 0.0;
  Eigen::VectorXd theta0;  // 8 coefficients for the control arm
  Eigen::VectorXd theta1;  // 8 coefficients for the treated arm

  double predict(int a, CovariateRow w) const;
  OutcomeModel outcome_model(double clip = 1e-6) const;
};

/// Minimizes the empirical cross-entropy risk by full-batch gradient descent
/// with backtracking; converged when the gradient max-norm is <= 1e-8.
WorkingModelFit fit_working_model(const Dataset& dataset);

struct EstimateWithCI {
  double psi = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::string method;
};

/// Difference of arm-specific outcome means.
double unadjusted(const Dataset& dataset);

/// Plug-in mean of qbar(1,w) - qbar(0,w) over the empirical covariate law.
double gcomp(const Dataset& dataset, const OutcomeModel& q);

/// (1/n) sum (2a-1) y / lG(a,w).
double iptw(const Dataset& dataset, const PropensityFn& g);

/// Augmented inverse-probability-weighted estimator.
double aiptw(const Dataset& dataset, const OutcomeModel& q, const PropensityFn& g);

/// Empirical second moment of the influence curve.
double upsilon(const Dataset& dataset, const OutcomeModel& q, const PropensityFn& g, double psi);

/// Influence-curve-based standard error and CI for the A-IPTW estimator:
/// empirical variance of the per-row integrand centered at psi.
EstimateWithCI aiptw_with_ci(const Dataset& dataset, const OutcomeModel& q,
                             const PropensityFn& g);

/// psi +/- 1.96 sqrt(upsilon / n).
EstimateWithCI wald_ci(double psi, double upsilon_value, Eigen::Index n,
                       const std::string& method = "wald");

}  // namespace ctmle
