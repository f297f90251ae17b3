#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "ctmle/dataset.hpp"

namespace ctmle {

/// Logistic regression coefficients on the original covariate scale.
struct LogisticCoefficients {
  double intercept = 0.0;
  Eigen::VectorXd beta;
};

/// Strictly decreasing positive penalty values; later entries are less
/// penalized (and less biased as propensity estimators).
struct PenaltyGrid {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double max_value() const { return values.front(); }
  double min_value() const { return values.back(); }
  void validate() const;
};

/// Truncation applied to every emitted propensity prediction.
struct PropensityBounds {
  double lower = 0.005;

  double upper() const { return 1.0 - lower; }
  void validate() const;
  double apply(double g) const {
    return g < lower ? lower : (g > upper() ? upper() : g);
  }
};

/// Discretized L1-penalized logistic regression path of treatment on
/// covariates: one coefficient vector per grid penalty, fitted by cyclic
/// coordinate descent on an iteratively reweighted quadratic approximation
/// with warm starts along the decreasing-penalty grid.
class LassoPath {
 public:
  LassoPath(PenaltyGrid grid, std::vector<LogisticCoefficients> fits,
            std::vector<double> train_risk, Eigen::Index trained_n);

  const PenaltyGrid& grid() const { return grid_; }
  Eigen::Index trained_n() const { return trained_n_; }
  const LogisticCoefficients& coefficients(std::size_t grid_index) const {
    return fits_.at(grid_index);
  }
  /// Empirical propensity loss (negative log-likelihood) at each grid value.
  const std::vector<double>& train_risk() const { return train_risk_; }

  /// Index of a penalty on the grid; throws std::invalid_argument for an
  /// unknown penalty.
  std::size_t grid_index(double h) const;

  double linear_predictor(std::size_t grid_index, CovariateRow w) const;

  /// Truncated propensity prediction at a grid penalty.
  double propensity(double h, CovariateRow w, const PropensityBounds& bounds) const;
  double propensity_at(std::size_t grid_index, CovariateRow w,
                       const PropensityBounds& bounds) const;

  /// Finite-difference derivative of h -> G_h(w) at a grid value, using the
  /// nearest distinct grid neighbour (larger neighbour on distance ties).
  double derivative(double h, CovariateRow w, const PropensityBounds& bounds) const;
  std::size_t neighbour_index(std::size_t grid_index) const;

 private:
  PenaltyGrid grid_;
  std::vector<LogisticCoefficients> fits_;
  std::vector<double> train_risk_;
  Eigen::Index trained_n_;
};

/// Log-equally-spaced grid of m penalties from h_max down to
/// h_max * min_ratio, where h_max is the smallest penalty at which all
/// non-intercept coefficients vanish.
PenaltyGrid default_grid(const Dataset& dataset, int m = 100, double min_ratio = 0.01);

/// Smallest penalty with an all-zero coefficient vector, computed from the
/// internally standardized covariates.
double penalty_ceiling(const Dataset& dataset);

LassoPath fit_path(const Dataset& dataset, const PenaltyGrid& grid, double tol = 1e-7,
                   long max_iter = 100000);

/// Likelihood-based cross-validation: refits the path on each training fold
/// and returns the grid penalty minimizing the fold-averaged validation
/// propensity loss, ties broken toward the larger penalty.
double cv_select(const Dataset& dataset, const PenaltyGrid& grid, const FoldScheme& folds,
                 const PropensityBounds& bounds);

/// Diagnostics dump: columns h, intercept, beta_1..beta_p, train_risk.
void write_path_csv(const LassoPath& path, const std::string& file);

}  // namespace ctmle
