#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ctmle/dataset.hpp"
#include "ctmle/errors.hpp"
#include "ctmle/lasso_path.hpp"
#include "ctmle/math.hpp"
#include "ctmle/rng.hpp"

using namespace ctmle;

namespace {

Dataset random_dataset(Eigen::Index n, Eigen::Index p, std::uint64_t seed, double signal = 1.0) {
  Rng rng(seed, 0);
  CovariateMatrix w(n, p);
  Eigen::VectorXi a(n);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double eta = 0.2;
    for (Eigen::Index j = 0; j < p; ++j) {
      w(i, j) = rng.next_normal();
      eta += signal * w(i, j) / std::sqrt(static_cast<double>(p));
    }
    a(i) = rng.next_bernoulli(expit(eta));
    y(i) = rng.next_double();
  }
  if (a.sum() == 0) a(0) = 1;
  if (a.sum() == n) a(0) = 0;
  return Dataset(std::move(w), std::move(a), std::move(y));
}

struct StandardizedDesign {
  Eigen::MatrixXd x;
  Eigen::VectorXd mean, scale;
};

StandardizedDesign standardize(const Dataset& d) {
  StandardizedDesign s;
  s.x = d.covariate_matrix();
  s.mean = s.x.colwise().mean();
  s.scale.resize(s.x.cols());
  for (Eigen::Index j = 0; j < s.x.cols(); ++j) {
    s.x.col(j).array() -= s.mean(j);
    s.scale(j) = std::sqrt(s.x.col(j).squaredNorm() / static_cast<double>(s.x.rows()));
    if (s.scale(j) > 0) s.x.col(j) /= s.scale(j);
  }
  return s;
}

double penalized_objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& a, double b0,
                           const Eigen::VectorXd& b, double lambda) {
  const Eigen::VectorXd eta = (x * b).array() + b0;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double lse =
        eta(i) > 0 ? eta(i) + std::log1p(std::exp(-eta(i))) : std::log1p(std::exp(eta(i)));
    loss += lse - a(i) * eta(i);
  }
  return loss / static_cast<double>(eta.size()) + lambda * b.lpNorm<1>();
}

// Independent oracle: proximal-gradient (FISTA) minimization of the same
// penalized objective, full gradients, no coordinate updates.
double fista_minimum(const Eigen::MatrixXd& x, const Eigen::VectorXd& a, double lambda,
                     int iterations = 40000) {
  const double n = static_cast<double>(x.rows());
  double b0 = 0.0, v0 = 0.0;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(x.cols());
  Eigen::VectorXd v = b;
  double lips = 0.25 * (x.squaredNorm() / n + 1.0);
  double t = 1.0;
  double best = penalized_objective(x, a, b0, b, lambda);
  for (int it = 0; it < iterations; ++it) {
    const Eigen::VectorXd eta = (x * v).array() + v0;
    Eigen::VectorXd resid(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) resid(i) = expit(eta(i)) - a(i);
    const Eigen::VectorXd grad = x.transpose() * resid / n;
    const double grad0 = resid.mean();

    const double step = 1.0 / lips;
    Eigen::VectorXd b_new = v - step * grad;
    for (Eigen::Index j = 0; j < b_new.size(); ++j) {
      const double thr = lambda * step;
      b_new(j) = b_new(j) > thr ? b_new(j) - thr : (b_new(j) < -thr ? b_new(j) + thr : 0.0);
    }
    const double b0_new = v0 - step * grad0;
    const double t_new = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    v = b_new + ((t - 1.0) / t_new) * (b_new - b);
    v0 = b0_new + ((t - 1.0) / t_new) * (b0_new - b0);
    b = b_new;
    b0 = b0_new;
    t = t_new;
    if (it % 50 == 0) best = std::min(best, penalized_objective(x, a, b0, b, lambda));
  }
  return std::min(best, penalized_objective(x, a, b0, b, lambda));
}

double kkt_violation(const Dataset& d, const LogisticCoefficients& c, double h) {
  const StandardizedDesign s = standardize(d);
  const Eigen::Index n = d.size();
  Eigen::VectorXd resid(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    resid(i) = expit(c.intercept + c.beta.dot(d.covariates(i))) - d.treatment(i);
  }
  double viol = std::abs(resid.mean());
  for (Eigen::Index j = 0; j < s.x.cols(); ++j) {
    if (s.scale(j) <= 0) continue;
    const double g = s.x.col(j).dot(resid) / static_cast<double>(n);
    const double b_std = c.beta(j) * s.scale(j);
    if (b_std == 0.0) {
      viol = std::max(viol, std::abs(g) - h);
    } else {
      viol = std::max(viol, std::abs(g + (b_std > 0 ? h : -h)));
    }
  }
  return viol;
}

LassoPath manual_path(std::vector<double> grid_values,
                      std::vector<LogisticCoefficients> fits) {
  std::vector<double> risks(grid_values.size(), 0.0);
  return LassoPath(PenaltyGrid{std::move(grid_values)}, std::move(fits), std::move(risks), 10);
}

}  // namespace

TEST_CASE("default_grid endpoints and spacing") {
  const Dataset d = random_dataset(60, 4, 11);
  const PenaltyGrid g2 = default_grid(d, 2, 0.01);
  CHECK(g2.values.size() == 2);
  CHECK(g2.values[1] == doctest::Approx(0.01 * g2.values[0]).epsilon(1e-12));

  const PenaltyGrid g100 = default_grid(d, 100, 0.01);
  CHECK(g100.values.size() == 100);
  const double ratio = g100.values[1] / g100.values[0];
  for (std::size_t k = 1; k + 1 < g100.size(); ++k) {
    CHECK(g100.values[k + 1] / g100.values[k] == doctest::Approx(ratio).epsilon(1e-10));
  }

  CHECK_THROWS_AS(default_grid(d, 1, 0.01), std::invalid_argument);
  CHECK_THROWS_AS(default_grid(d, 10, 1.5), std::invalid_argument);
}

TEST_CASE("default_grid requires both arms") {
  CovariateMatrix w = CovariateMatrix::Random(8, 2);
  Eigen::VectorXi a = Eigen::VectorXi::Ones(8);
  Eigen::VectorXd y = Eigen::VectorXd::Constant(8, 0.5);
  const Dataset d(w, a, y);
  CHECK_THROWS_AS(default_grid(d, 10, 0.01), DegenerateTreatmentError);
}

TEST_CASE("penalty ceiling gives the all-zero fit") {
  const Dataset d = random_dataset(80, 5, 21);
  const double h_max = penalty_ceiling(d);

  const double abar = d.treatments().cast<double>().mean();
  PenaltyGrid above{{1.001 * h_max}};
  const LassoPath path_above = fit_path(d, above);
  CHECK(path_above.coefficients(0).beta.lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(path_above.coefficients(0).intercept == doctest::Approx(logit(abar)).epsilon(1e-9));

  PenaltyGrid at{{h_max}};
  const LassoPath path_at = fit_path(d, at);
  CHECK(path_at.coefficients(0).beta.lpNorm<Eigen::Infinity>() <= 1e-10);
}

TEST_CASE("path objective matches an independent proximal-gradient oracle") {
  int instance = 0;
  for (std::uint64_t seed : {101u, 102u, 103u, 104u}) {
    Rng rng(seed, 1);
    const Eigen::Index n = 15 + static_cast<Eigen::Index>(rng.next_below(11));  // <= 25
    const Eigen::Index p = 1 + static_cast<Eigen::Index>(rng.next_below(3));    // <= 3
    const Dataset d = random_dataset(n, p, seed);
    const PenaltyGrid grid = default_grid(d, 5, 0.05);
    const LassoPath path = fit_path(d, grid);
    const StandardizedDesign s = standardize(d);
    const Eigen::VectorXd a = d.treatments().cast<double>();
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const auto& c = path.coefficients(k);
      Eigen::VectorXd b_std(p);
      for (Eigen::Index j = 0; j < p; ++j) b_std(j) = c.beta(j) * s.scale(j);
      const double b0_std = c.intercept + c.beta.dot(s.mean);
      const double obj_path = penalized_objective(s.x, a, b0_std, b_std, grid.values[k]);
      const double obj_oracle = fista_minimum(s.x, a, grid.values[k]);
      INFO("instance ", instance, " grid point ", k);
      CHECK(std::abs(obj_path - obj_oracle) <= 1e-4);
    }
    ++instance;
  }
}

TEST_CASE("kkt residuals at every fitted grid point") {
  for (std::uint64_t seed : {31u, 32u}) {
    const Dataset d = random_dataset(70, 8, seed);
    const PenaltyGrid grid = default_grid(d, 30, 0.01);
    const LassoPath path = fit_path(d, grid);
    for (std::size_t k = 0; k < grid.size(); ++k) {
      CHECK(kkt_violation(d, path.coefficients(k), grid.values[k]) <= 1e-6);
    }
  }
}

TEST_CASE("risk and coefficient-norm monotonicity along the path") {
  const Dataset d = random_dataset(90, 6, 41);
  const PenaltyGrid grid = default_grid(d, 40, 0.01);
  const LassoPath path = fit_path(d, grid);
  const StandardizedDesign s = standardize(d);
  double prev_risk = std::numeric_limits<double>::infinity();
  double prev_norm = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < grid.size(); ++k) {
    CHECK(path.train_risk()[k] <= prev_risk + 1e-9);
    double norm = 0.0;
    for (Eigen::Index j = 0; j < d.dim(); ++j) {
      norm += std::abs(path.coefficients(k).beta(j) * s.scale(j));
    }
    CHECK(norm >= prev_norm - 1e-9);
    prev_risk = path.train_risk()[k];
    prev_norm = norm;
  }
}

TEST_CASE("solver reports non-convergence with the offending penalty") {
  const Dataset d = random_dataset(50, 5, 51);
  const PenaltyGrid grid = default_grid(d, 3, 0.1);
  try {
    fit_path(d, grid, 1e-7, 1);
    FAIL("expected ConvergenceError");
  } catch (const ConvergenceError& e) {
    // the offending penalty is the first grid value whose fit needs more
    // than the one-sweep budget (the ceiling itself converges off the warm
    // start immediately)
    const bool on_grid = std::find(grid.values.begin(), grid.values.end(), e.penalty()) !=
                         grid.values.end();
    CHECK(on_grid);
  }
  CHECK_NOTHROW(fit_path(d, grid));
}

TEST_CASE("predict_propensity values and clipping") {
  LogisticCoefficients zero{0.0, Eigen::VectorXd::Zero(2)};
  LogisticCoefficients high{20.0, Eigen::VectorXd::Zero(2)};
  LogisticCoefficients point3{logit(0.3), Eigen::VectorXd::Zero(2)};
  const LassoPath path = manual_path({0.3, 0.2, 0.1}, {zero, high, point3});
  Eigen::VectorXd w = Eigen::VectorXd::Ones(2);
  const PropensityBounds bounds{0.005};
  CHECK(path.propensity(0.3, w, bounds) == doctest::Approx(0.5));
  CHECK(path.propensity(0.2, w, bounds) == doctest::Approx(0.995));
  CHECK(path.propensity(0.1, w, bounds) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK_THROWS_AS(path.propensity(0.15, w, bounds), std::invalid_argument);
}

TEST_CASE("predictions always inside the bounds") {
  const Dataset d = random_dataset(60, 4, 61, 3.0);
  const PenaltyGrid grid = default_grid(d, 20, 0.005);
  const LassoPath path = fit_path(d, grid);
  const PropensityBounds bounds{0.01};
  Rng rng(5, 5);
  for (int t = 0; t < 200; ++t) {
    Eigen::VectorXd w(4);
    for (int j = 0; j < 4; ++j) w(j) = 5.0 * rng.next_normal();
    const double g = path.propensity_at(rng.next_below(grid.size()), w, bounds);
    CHECK(g >= bounds.lower);
    CHECK(g <= bounds.upper());
  }
}

TEST_CASE("cv_select equals a brute-force evaluation of its criterion") {
  const Dataset d = random_dataset(45, 3, 71);
  const PenaltyGrid grid = default_grid(d, 6, 0.05);
  const FoldScheme folds = make_folds(d, 3, Rng(8, 0));
  const PropensityBounds bounds{0.005};

  // Independent evaluation: refit per fold, average validation losses with
  // the same scoring floor, take the largest-penalty argmin.
  std::vector<double> risk(grid.size(), 0.0);
  for (int k = 1; k <= 3; ++k) {
    auto [train, valid] = split_fold(d, folds, k);
    const LassoPath fold_path = fit_path(train, grid);
    for (std::size_t idx = 0; idx < grid.size(); ++idx) {
      double acc = 0.0;
      for (Eigen::Index i = 0; i < valid.size(); ++i) {
        const double g =
            clamp(expit(fold_path.linear_predictor(idx, valid.covariates(i))), 1e-5, 1.0 - 1e-5);
        acc += valid.treatment(i) == 1 ? -std::log(g) : -std::log1p(-g);
      }
      risk[idx] += acc / static_cast<double>(valid.size());
    }
  }
  std::size_t expect = 0;
  for (std::size_t idx = 1; idx < grid.size(); ++idx) {
    if (risk[idx] < risk[expect]) expect = idx;
  }

  CHECK(cv_select(d, grid, folds, bounds) == grid.values[expect]);
}

TEST_CASE("cv_select tie rule and membership") {
  // Penalties at or above the ceiling all give the intercept-only fit, so
  // every validation loss ties and the largest penalty must win.
  const Dataset d = random_dataset(40, 3, 81);
  const double h_max = penalty_ceiling(d);
  PenaltyGrid grid{{3.0 * h_max, 2.0 * h_max, 1.5 * h_max}};
  const FoldScheme folds = make_folds(d, 4, Rng(9, 0));
  CHECK(cv_select(d, grid, folds, PropensityBounds{}) == 3.0 * h_max);
}

TEST_CASE("cv_select with duplicated halves equals the training-risk minimizer") {
  const Dataset half = random_dataset(30, 2, 91);
  std::vector<Observation> rows;
  for (Eigen::Index i = 0; i < half.size(); ++i) rows.push_back(half.row(i));
  for (Eigen::Index i = 0; i < half.size(); ++i) rows.push_back(half.row(i));
  const Dataset doubled(rows);
  std::vector<int> labels(60);
  for (int i = 0; i < 30; ++i) labels[i] = 1;
  for (int i = 30; i < 60; ++i) labels[i] = 2;
  const FoldScheme folds(2, labels);

  const PenaltyGrid grid = default_grid(half, 8, 0.05);
  const LassoPath full = fit_path(half, grid);
  std::size_t expect = 0;
  for (std::size_t k = 1; k < grid.size(); ++k) {
    if (full.train_risk()[k] < full.train_risk()[expect]) expect = k;
  }
  CHECK(cv_select(doubled, grid, folds, PropensityBounds{}) ==
        doctest::Approx(grid.values[expect]));
}

TEST_CASE("cv_select invariant to fold relabeling") {
  const Dataset d = random_dataset(42, 3, 95);
  const PenaltyGrid grid = default_grid(d, 6, 0.05);
  const FoldScheme folds = make_folds(d, 3, Rng(4, 0));
  std::vector<int> relabeled;
  for (int label : folds.assignment()) relabeled.push_back(label % 3 + 1);
  const FoldScheme permuted(3, relabeled);
  const PropensityBounds bounds{0.005};
  CHECK(cv_select(d, grid, folds, bounds) == cv_select(d, grid, permuted, bounds));
}

TEST_CASE("cv_select propagates degenerate training folds") {
  // Two controls that share a fold: the other fold's training rows are all
  // treated.
  CovariateMatrix w = CovariateMatrix::Random(6, 2);
  Eigen::VectorXi a(6);
  a << 0, 0, 1, 1, 1, 1;
  Eigen::VectorXd y = Eigen::VectorXd::Constant(6, 0.4);
  const Dataset d(w, a, y);
  const FoldScheme folds(2, {1, 1, 2, 2, 1, 2});
  PenaltyGrid grid{{0.2, 0.1}};
  CHECK_THROWS_AS(cv_select(d, grid, folds, PropensityBounds{}), DegenerateTreatmentError);
}

TEST_CASE("path derivative") {
  LogisticCoefficients g40{logit(0.40), Eigen::VectorXd::Zero(1)};
  LogisticCoefficients g44{logit(0.44), Eigen::VectorXd::Zero(1)};
  Eigen::VectorXd w = Eigen::VectorXd::Zero(1);
  const PropensityBounds bounds{0.005};

  const LassoPath path = manual_path({0.12, 0.10}, {g44, g40});
  CHECK(path.derivative(0.10, w, bounds) == doctest::Approx(2.0).epsilon(1e-9));

  const LassoPath flat = manual_path({0.12, 0.10}, {g40, g40});
  CHECK(flat.derivative(0.10, w, bounds) == 0.0);

  // equidistant neighbours resolve toward the larger penalty
  LogisticCoefficients g50{logit(0.50), Eigen::VectorXd::Zero(1)};
  const LassoPath three = manual_path({0.3, 0.2, 0.1}, {g50, g40, g44});
  const double expected = (0.50 - 0.40) / (0.3 - 0.2);
  CHECK(three.derivative(0.2, w, bounds) == doctest::Approx(expected).epsilon(1e-12));

  const LassoPath single = manual_path({0.1}, {g40});
  CHECK_THROWS_AS(single.derivative(0.1, w, bounds), std::invalid_argument);
}
