#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ctmle/errors.hpp"
#include "ctmle/estimators.hpp"
#include "ctmle/math.hpp"
#include "ctmle/rng.hpp"
#include "ctmle/synthetic.hpp"
#include "ctmle/targeting.hpp"

using namespace ctmle;

namespace {

Dataset single_row(double w0, int a, double y) {
  CovariateMatrix w(1, 1);
  w(0, 0) = w0;
  Eigen::VectorXi av(1);
  av << a;
  Eigen::VectorXd yv(1);
  yv << y;
  return Dataset(std::move(w), std::move(av), std::move(yv));
}

Dataset small_synthetic(Eigen::Index n, std::uint64_t seed) {
  const SyntheticSampler sampler(SyntheticConfig{10, 0.0});
  return sampler.sample(n, Rng(seed, 0));
}

PropensityFn constant_g(double g) {
  return [g](CovariateRow) { return g; };
}

}  // namespace

TEST_CASE("scalar losses") {
  CHECK(arm_likelihood(0.3, 1) == doctest::Approx(0.3));
  CHECK(arm_likelihood(0.3, 0) == doctest::Approx(0.7));
  CHECK(arm_likelihood(0.5, 1) == arm_likelihood(0.5, 0));
  CHECK_THROWS_AS(arm_likelihood(0.0, 1), std::domain_error);
  CHECK_THROWS_AS(arm_likelihood(1.0, 0), std::domain_error);

  CHECK(propensity_loss(0.5, 1) == doctest::Approx(std::log(2.0)));
  CHECK(propensity_loss(1.0 - 1e-12, 1) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(propensity_loss(0.25, 0) == doctest::Approx(-std::log(0.75)));
  CHECK_THROWS_AS(propensity_loss(-0.1, 0), std::domain_error);

  CHECK(outcome_loss(0.5, 0.5) == doctest::Approx(std::log(2.0)));
  CHECK(outcome_loss(0.5, 1.0) == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(outcome_loss(0.0, 0.5), std::domain_error);
}

TEST_CASE("cross-entropy is minimized at the mean") {
  const Eigen::Vector2d ys(0.2, 0.8);
  const auto mean_loss = [&](double q) {
    return 0.5 * (outcome_loss(q, ys(0)) + outcome_loss(q, ys(1)));
  };
  const double at_mean = mean_loss(0.5);
  for (double q : {0.3, 0.45, 0.55, 0.7}) CHECK(mean_loss(q) > at_mean);
}

TEST_CASE("outcome_loss_from_logit agrees with outcome_loss") {
  for (double l : {-3.0, -0.5, 0.0, 1.2, 4.0}) {
    for (double y : {0.0, 0.3, 1.0}) {
      CHECK(outcome_loss_from_logit(l, y) ==
            doctest::Approx(-y * std::log(expit(l)) - (1 - y) * std::log1p(-expit(l)))
                .epsilon(1e-12));
    }
  }
  CHECK(std::isfinite(outcome_loss_from_logit(800.0, 0.3)));
  CHECK(std::isfinite(outcome_loss_from_logit(-800.0, 0.3)));
}

TEST_CASE("outcome model clips its base and composes fluctuations") {
  const OutcomeModel wild([](int a, CovariateRow) { return a == 1 ? 2.0 : -5.0; });
  Eigen::VectorXd w = Eigen::VectorXd::Zero(1);
  CHECK(wild(1, w) == doctest::Approx(1.0 - 1e-6));
  CHECK(wild(0, w) == doctest::Approx(1e-6));

  const OutcomeModel base = OutcomeModel::constant(0.4, 0.4);
  CHECK(base(1, w) == doctest::Approx(0.4));
  const CleverCovariate shift(CleverCovariate::Kind::kScalar,
                              [](int, CovariateRow, double* out) { out[0] = 1.0; });
  const OutcomeModel shifted = base.with_fluctuation(shift, Eigen::VectorXd::Constant(1, 0.7));
  CHECK(shifted(1, w) == doctest::Approx(expit(logit(0.4) + 0.7)));
  CHECK(base.fluctuations().empty());
  CHECK(shifted.fluctuations().size() == 1);
}

TEST_CASE("influence curve values") {
  const OutcomeModel q = OutcomeModel::constant(0.7, 0.2);
  const double psi = 0.5;
  Observation o(Eigen::VectorXd::Zero(1), 1, 0.7);
  CHECK(influence_curve(q, constant_g(0.5), psi, o) == doctest::Approx(0.0).epsilon(1e-9));

  // a=1, g=0.25, y - qbar = 0.1, blip = psi: residual term is 4 * 0.1
  const OutcomeModel q2 = OutcomeModel::constant(0.6, 0.1);
  Observation o2(Eigen::VectorXd::Zero(1), 1, 0.7);
  CHECK(influence_curve(q2, constant_g(0.25), 0.5, o2) == doctest::Approx(0.4).epsilon(1e-9));
  CHECK(influence_residual(q2, constant_g(0.25), o2) == doctest::Approx(0.4).epsilon(1e-9));
}

TEST_CASE("fluctuation closed form on one row") {
  const Dataset d = single_row(0.0, 1, 0.8);
  const OutcomeModel q0 = OutcomeModel::constant(0.5, 0.5);
  const PropensityFn g = constant_g(0.5);
  const TmleResult r = fluctuate_and_solve(d, q0, CleverCovariate::scalar(g), g);
  CHECK(r.epsilon(0) == doctest::Approx(logit(0.8) / 2.0).epsilon(1e-9));
  CHECK(std::abs(r.score_residual) <= 1e-8);
  CHECK(r.q_star(1, d.covariates(0)) == doctest::Approx(0.8).epsilon(1e-9));
}

TEST_CASE("stationary start returns epsilon zero") {
  // outcomes equal to the model's predictions make the score vanish at 0
  const OutcomeModel q0 = OutcomeModel::constant(0.7, 0.3);
  CovariateMatrix w = CovariateMatrix::Random(6, 2);
  Eigen::VectorXi a(6);
  a << 1, 0, 1, 0, 1, 0;
  Eigen::VectorXd y(6);
  for (int i = 0; i < 6; ++i) y(i) = a(i) == 1 ? 0.7 : 0.3;
  const Dataset d(w, a, y);
  const PropensityFn g = constant_g(0.5);
  const TmleResult r = fluctuate_and_solve(d, q0, CleverCovariate::scalar(g), g);
  CHECK(r.epsilon(0) == 0.0);
  CHECK(r.q_star(1, d.covariates(0)) == q0(1, d.covariates(0)));
}

TEST_CASE("fluctuation never increases the training risk") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Dataset d = small_synthetic(50, seed);
    const OutcomeModel q0 = fit_working_model(d).outcome_model();
    const PropensityFn g = constant_g(0.45);
    const TmleResult r = fluctuate_and_solve(d, q0, CleverCovariate::scalar(g), g);
    const auto risk = [&](const OutcomeModel& q) {
      double acc = 0;
      for (Eigen::Index i = 0; i < d.size(); ++i) {
        acc += outcome_loss(q(d.treatment(i), d.covariates(i)), d.outcome(i));
      }
      return acc / static_cast<double>(d.size());
    };
    CHECK(risk(r.q_star) <= risk(q0) + 1e-12);
    CHECK(std::abs(r.score_residual) <= 1e-8);
  }
}

TEST_CASE("epsilon gradient matches finite differences") {
  const Dataset d = small_synthetic(60, 9);
  const OutcomeModel q0 = fit_working_model(d).outcome_model();
  const PropensityFn g = constant_g(0.4);
  const CleverCovariate clever = CleverCovariate::scalar(g);

  const auto risk_at = [&](double eps) {
    const OutcomeModel q = q0.with_fluctuation(clever, Eigen::VectorXd::Constant(1, eps));
    double acc = 0;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      acc += outcome_loss(q(d.treatment(i), d.covariates(i)), d.outcome(i));
    }
    return acc / static_cast<double>(d.size());
  };
  const auto analytic = [&](double eps) {
    const OutcomeModel q = q0.with_fluctuation(clever, Eigen::VectorXd::Constant(1, eps));
    double acc = 0, c = 0;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      clever.evaluate(d.treatment(i), d.covariates(i), &c);
      acc += c * (d.outcome(i) - q(d.treatment(i), d.covariates(i)));
    }
    return -acc / static_cast<double>(d.size());
  };

  Rng rng(17, 0);
  for (int t = 0; t < 10; ++t) {
    const double eps = 2.0 * rng.next_normal();
    const double delta = 1e-5;
    const double fd = (risk_at(eps + delta) - risk_at(eps - delta)) / (2.0 * delta);
    const double an = analytic(eps);
    CHECK(std::abs(fd - an) <= 1e-6 * std::max(1.0, std::abs(an)));
  }
}

TEST_CASE("near separation raises a divergence error") {
  // y = 1 pushes the fluctuation toward +infinity; with a tight cap the
  // bracket expansion runs out of room before the score changes sign
  const Dataset d = single_row(0.0, 1, 1.0);
  const OutcomeModel q0 = OutcomeModel::constant(0.5, 0.5);
  const PropensityFn g = constant_g(0.5);
  CHECK_THROWS_AS(fluctuate_and_solve(d, q0, CleverCovariate::scalar(g), g, 5.0),
                  FluctuationDivergence);
}

TEST_CASE("two-dimensional fluctuation solves both equations") {
  const Dataset d = small_synthetic(80, 23);
  const OutcomeModel q0 = fit_working_model(d).outcome_model();
  const PropensityFn g = [](CovariateRow w) { return clamp(expit(0.3 + 0.5 * w(0)), 0.005, 0.995); };
  const auto deriv = [](CovariateRow w) { return 0.8 * w(1) - 0.2; };
  const CleverCovariate clever = CleverCovariate::two_dim(g, deriv);
  const TmleResult r = fluctuate_and_solve(d, q0, clever, g);

  double s1 = 0, s2 = 0, c[2];
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    clever.evaluate(d.treatment(i), d.covariates(i), c);
    const double resid = d.outcome(i) - r.q_star(d.treatment(i), d.covariates(i));
    s1 += c[0] * resid;
    s2 += c[1] * resid;
  }
  CHECK(std::abs(s1 / static_cast<double>(d.size())) <= 1e-8);
  CHECK(std::abs(s2 / static_cast<double>(d.size())) <= 1e-8);
  CHECK(std::abs(r.score_residual) <= 1e-8);
}

TEST_CASE("degenerate second direction reduces to the scalar fit") {
  const Dataset d = small_synthetic(40, 29);
  const OutcomeModel q0 = fit_working_model(d).outcome_model();
  const PropensityFn g = constant_g(0.35);
  const TmleResult scalar = fluctuate_and_solve(d, q0, CleverCovariate::scalar(g), g);
  const TmleResult twodim =
      fluctuate_and_solve(d, q0, CleverCovariate::two_dim(g, [](CovariateRow) { return 0.0; }), g);
  CHECK(twodim.epsilon(0) == doctest::Approx(scalar.epsilon(0)).epsilon(1e-12));
  CHECK(twodim.epsilon(1) == 0.0);
  CHECK(twodim.psi == doctest::Approx(scalar.psi).epsilon(1e-12));
}

TEST_CASE("plain tmle is a targeted plug-in and deterministic") {
  const Dataset d = small_synthetic(100, 31);
  const OutcomeModel q0 = fit_working_model(d).outcome_model();
  const PenaltyGrid grid = default_grid(d, 20, 0.01);
  const LassoPath path = fit_path(d, grid);
  const PropensityBounds bounds;
  const double h = grid.values[10];

  const TmleResult r1 = plain_tmle(d, q0, path, h, bounds);
  const TmleResult r2 = plain_tmle(d, q0, path, h, bounds);
  CHECK(r1.psi == r2.psi);
  CHECK(r1.epsilon(0) == r2.epsilon(0));

  CHECK(std::abs(r1.score_residual) <= 1e-8);
  CHECK(r1.psi == doctest::Approx(gcomp(d, r1.q_star)).epsilon(1e-12));

  // upsilon agrees with the estimators module
  const PropensityFn g = propensity_fn(path, h, bounds);
  CHECK(r1.upsilon == doctest::Approx(upsilon(d, r1.q_star, g, r1.psi)).epsilon(1e-12));
}

TEST_CASE("already-targeted initial model keeps the plug-in value") {
  // q0 whose score is already zero: psi equals the plug-in of q0
  const OutcomeModel q0 = OutcomeModel::constant(0.7, 0.3);
  CovariateMatrix w = CovariateMatrix::Random(8, 2);
  Eigen::VectorXi a(8);
  Eigen::VectorXd y(8);
  for (int i = 0; i < 8; ++i) {
    a(i) = i % 2;
    y(i) = a(i) == 1 ? 0.7 : 0.3;
  }
  const Dataset d(w, a, y);
  const PropensityFn g = constant_g(0.5);
  const TmleResult r = fluctuate_and_solve(d, q0, CleverCovariate::scalar(g), g);
  CHECK(r.psi == doctest::Approx(gcomp(d, q0)).epsilon(1e-12));
}
