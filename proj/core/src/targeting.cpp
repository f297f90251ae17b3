#include "ctmle/targeting.hpp"

#include <algorithm>
#include <cmath>

#include "ctmle/errors.hpp"
#include "ctmle/math.hpp"

namespace ctmle {

double arm_likelihood(double g, int a) {
  if (!(g > 0.0 && g < 1.0)) throw std::domain_error("arm_likelihood: g must lie in (0,1)");
  return a == 1 ? g : 1.0 - g;
}

double propensity_loss(double g, int a) {
  if (!(g > 0.0 && g < 1.0)) throw std::domain_error("propensity_loss: g must lie in (0,1)");
  return a == 1 ? -std::log(g) : -std::log1p(-g);
}

double outcome_loss(double qbar, double y) {
  if (!(qbar > 0.0 && qbar < 1.0)) throw std::domain_error("outcome_loss: qbar must lie in (0,1)");
  return -y * std::log(qbar) - (1.0 - y) * std::log1p(-qbar);
}

CleverCovariate CleverCovariate::scalar(PropensityFn g) {
  return CleverCovariate(Kind::kScalar, [g = std::move(g)](int a, CovariateRow w, double* out) {
    out[0] = (2.0 * a - 1.0) / arm_likelihood(g(w), a);
  });
}

CleverCovariate CleverCovariate::two_dim(PropensityFn g,
                                         std::function<double(CovariateRow)> g_derivative) {
  // The second direction is the penalty-derivative of the weight
  // (2a-1)/lG itself, i.e. g'(w)/lG(a,w)^2 up to sign, so that zeroing its
  // score also zeroes the empirical mean of the influence-curve derivative.
  return CleverCovariate(
      Kind::kTwoDim,
      [g = std::move(g), d = std::move(g_derivative)](int a, CovariateRow w, double* out) {
        const double c = (2.0 * a - 1.0) / arm_likelihood(g(w), a);
        out[0] = c;
        out[1] = c * c * d(w);
      });
}

OutcomeModel::OutcomeModel(BaseFn base, double clip) : base_(std::move(base)), clip_(clip) {
  if (!(clip_ > 0.0 && clip_ < 0.5)) throw std::invalid_argument("OutcomeModel: bad clip");
}

OutcomeModel OutcomeModel::constant(double q1, double q0, double clip) {
  return OutcomeModel([q1, q0](int a, CovariateRow) { return a == 1 ? q1 : q0; }, clip);
}

double OutcomeModel::logit_value(int a, CovariateRow w) const {
  double value = logit(clamp(base_(a, w), clip_, 1.0 - clip_));
  double c[2];
  for (const Fluctuation& f : fluctuations_) {
    f.covariate.evaluate(a, w, c);
    for (int d = 0; d < f.covariate.dim(); ++d) value += f.epsilon(d) * c[d];
  }
  return value;
}

double OutcomeModel::operator()(int a, CovariateRow w) const { return expit(logit_value(a, w)); }

OutcomeModel OutcomeModel::with_fluctuation(CleverCovariate covariate,
                                            Eigen::VectorXd epsilon) const {
  if (epsilon.size() != covariate.dim()) {
    throw std::invalid_argument("with_fluctuation: epsilon dimension mismatch");
  }
  OutcomeModel extended(*this);
  extended.fluctuations_.push_back({std::move(covariate), std::move(epsilon)});
  return extended;
}

double influence_residual(const OutcomeModel& q, const PropensityFn& g, const Observation& o) {
  return (2.0 * o.a - 1.0) / arm_likelihood(g(o.w), o.a) * (o.y - q(o.a, o.w));
}

double influence_curve(const OutcomeModel& q, const PropensityFn& g, double psi,
                       const Observation& o) {
  return influence_residual(q, g, o) + q(1, o.w) - q(0, o.w) - psi;
}

namespace {

constexpr double kScoreTol = 1e-10;
constexpr int kMaxIterations = 100;

struct FluctuationProblem {
  Eigen::VectorXd logit_obs;   // running logit at the observed arm
  Eigen::VectorXd logit_a1;    // running logit at a = 1
  Eigen::VectorXd logit_a0;    // running logit at a = 0
  Eigen::MatrixXd c_obs;       // clever covariate at the observed arm, n x dim
  Eigen::MatrixXd c_a1;
  Eigen::MatrixXd c_a0;
  Eigen::VectorXd y;
  int dim = 1;
};

FluctuationProblem prepare(const Dataset& dataset, const OutcomeModel& q0,
                           const CleverCovariate& clever) {
  const Eigen::Index n = dataset.size();
  FluctuationProblem prob;
  prob.dim = clever.dim();
  prob.logit_obs.resize(n);
  prob.logit_a1.resize(n);
  prob.logit_a0.resize(n);
  prob.c_obs.resize(n, prob.dim);
  prob.c_a1.resize(n, prob.dim);
  prob.c_a0.resize(n, prob.dim);
  prob.y = dataset.outcomes();
  double buf[2];
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto w = dataset.covariates(i);
    const int a = dataset.treatment(i);
    prob.logit_a1(i) = q0.logit_value(1, w);
    prob.logit_a0(i) = q0.logit_value(0, w);
    prob.logit_obs(i) = a == 1 ? prob.logit_a1(i) : prob.logit_a0(i);
    clever.evaluate(1, w, buf);
    for (int d = 0; d < prob.dim; ++d) prob.c_a1(i, d) = buf[d];
    clever.evaluate(0, w, buf);
    for (int d = 0; d < prob.dim; ++d) prob.c_a0(i, d) = buf[d];
    for (int d = 0; d < prob.dim; ++d) prob.c_obs(i, d) = a == 1 ? prob.c_a1(i, d) : prob.c_a0(i, d);
  }
  return prob;
}

// Score of the outcome-loss minimization: (1/n) sum c_i (y_i - q_i(eps)).
Eigen::VectorXd score_at(const FluctuationProblem& prob, const Eigen::VectorXd& eps,
                         Eigen::MatrixXd* jacobian = nullptr) {
  const Eigen::Index n = prob.y.size();
  Eigen::VectorXd score = Eigen::VectorXd::Zero(prob.dim);
  if (jacobian) jacobian->setZero(prob.dim, prob.dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    double lp = prob.logit_obs(i);
    for (int d = 0; d < prob.dim; ++d) lp += eps(d) * prob.c_obs(i, d);
    const double q = expit(lp);
    const double r = prob.y(i) - q;
    for (int d = 0; d < prob.dim; ++d) score(d) += prob.c_obs(i, d) * r;
    if (jacobian) {
      const double wq = q * (1.0 - q);
      for (int d = 0; d < prob.dim; ++d) {
        for (int e = 0; e <= d; ++e) {
          (*jacobian)(d, e) -= prob.c_obs(i, d) * prob.c_obs(i, e) * wq;
        }
      }
    }
  }
  score /= static_cast<double>(n);
  if (jacobian) {
    *jacobian /= static_cast<double>(n);
    for (int d = 0; d < prob.dim; ++d) {
      for (int e = d + 1; e < prob.dim; ++e) (*jacobian)(d, e) = (*jacobian)(e, d);
    }
  }
  return score;
}

double solve_scalar(const FluctuationProblem& prob, double cap) {
  Eigen::VectorXd eps(1);
  eps(0) = 0.0;
  Eigen::MatrixXd jac(1, 1);
  Eigen::VectorXd s = score_at(prob, eps, &jac);
  if (std::abs(s(0)) <= kScoreTol) return 0.0;

  // The score is strictly decreasing in eps; bracket the root first.
  double lo, hi;
  if (s(0) > 0.0) {
    lo = 0.0;
    hi = 1.0;
    while (score_at(prob, Eigen::VectorXd::Constant(1, hi))(0) > 0.0) {
      if (hi >= cap) throw FluctuationDivergence("fluctuation parameter exceeded its cap");
      lo = hi;
      hi = std::min(2.0 * hi, cap);
    }
  } else {
    hi = 0.0;
    lo = -1.0;
    while (score_at(prob, Eigen::VectorXd::Constant(1, lo))(0) < 0.0) {
      if (lo <= -cap) throw FluctuationDivergence("fluctuation parameter exceeded its cap");
      hi = lo;
      lo = std::max(2.0 * lo, -cap);
    }
  }

  double x = 0.5 * (lo + hi);
  for (int it = 0; it < kMaxIterations; ++it) {
    eps(0) = x;
    s = score_at(prob, eps, &jac);
    if (std::abs(s(0)) <= kScoreTol) return x;
    if (s(0) > 0.0) {
      lo = x;
    } else {
      hi = x;
    }
    double next = jac(0, 0) != 0.0 ? x - s(0) / jac(0, 0) : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    x = next;
  }
  // Newton is safeguarded by the bracket, so landing here means the score is
  // flat at floating-point resolution; bisect the remainder.
  for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(x)); ++it) {
    x = 0.5 * (lo + hi);
    eps(0) = x;
    s = score_at(prob, eps);
    if (std::abs(s(0)) <= kScoreTol) return x;
    (s(0) > 0.0 ? lo : hi) = x;
  }
  if (std::abs(s(0)) <= 1e-8) return x;
  throw FluctuationDivergence("fluctuation score did not reach tolerance");
}

Eigen::VectorXd solve_two_dim(const FluctuationProblem& prob, double cap) {
  // Exactly collinear components collapse the system to one dimension along
  // the first component; detect via the Gram matrix of the covariate.
  const double n = static_cast<double>(prob.y.size());
  const double g11 = prob.c_obs.col(0).squaredNorm() / n;
  const double g22 = prob.c_obs.col(1).squaredNorm() / n;
  const double g12 = prob.c_obs.col(0).dot(prob.c_obs.col(1)) / n;
  const bool degenerate = g22 <= 1e-14 * std::max(1.0, g11) ||
                          g12 * g12 >= g11 * g22 * (1.0 - 1e-12);
  if (degenerate) {
    FluctuationProblem reduced = prob;
    reduced.dim = 1;
    reduced.c_obs = prob.c_obs.col(0);
    reduced.c_a1 = prob.c_a1.col(0);
    reduced.c_a0 = prob.c_a0.col(0);
    Eigen::VectorXd eps(2);
    eps << solve_scalar(reduced, cap), 0.0;
    return eps;
  }

  Eigen::VectorXd eps = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd jac(2, 2);
  Eigen::VectorXd s = score_at(prob, eps, &jac);
  double norm = s.lpNorm<Eigen::Infinity>();
  for (int it = 0; it < kMaxIterations; ++it) {
    if (norm <= kScoreTol) return eps;
    const Eigen::VectorXd delta = jac.ldlt().solve(-s);
    double step = 1.0;
    Eigen::VectorXd trial;
    Eigen::VectorXd s_trial;
    double norm_trial;
    for (int halvings = 0;; ++halvings) {
      trial = eps + step * delta;
      if (trial.lpNorm<Eigen::Infinity>() > cap) {
        throw FluctuationDivergence("fluctuation parameter exceeded its cap");
      }
      s_trial = score_at(prob, trial, &jac);
      norm_trial = s_trial.lpNorm<Eigen::Infinity>();
      if (norm_trial < norm || halvings >= 60) break;
      step *= 0.5;
    }
    eps = trial;
    s = s_trial;
    norm = norm_trial;
  }
  if (norm <= 1e-8) return eps;
  throw FluctuationDivergence("two-dimensional fluctuation did not converge");
}

}  // namespace

double solve_scalar_fluctuation(const Eigen::VectorXd& logit_obs, const Eigen::VectorXd& c_obs,
                                const Eigen::VectorXd& y, double eps_cap) {
  FluctuationProblem prob;
  prob.dim = 1;
  prob.logit_obs = logit_obs;
  prob.c_obs = c_obs;
  prob.y = y;
  return solve_scalar(prob, eps_cap);
}

double outcome_loss_from_logit(double logit_value, double y) {
  const double softplus = logit_value > 0.0 ? logit_value + std::log1p(std::exp(-logit_value))
                                            : std::log1p(std::exp(logit_value));
  return softplus - y * logit_value;
}

TmleResult fluctuate_and_solve(const Dataset& dataset, const OutcomeModel& q0,
                               const CleverCovariate& clever, const PropensityFn& g,
                               double eps_cap) {
  const FluctuationProblem prob = prepare(dataset, q0, clever);
  Eigen::VectorXd eps;
  if (clever.kind() == CleverCovariate::Kind::kScalar) {
    eps = Eigen::VectorXd::Constant(1, solve_scalar(prob, eps_cap));
  } else {
    eps = solve_two_dim(prob, eps_cap);
  }

  const Eigen::Index n = dataset.size();
  TmleResult result{0.0, eps, q0.with_fluctuation(clever, eps), 0.0, 0.0};

  Eigen::VectorXd blip(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double l1 = prob.logit_a1(i);
    double l0 = prob.logit_a0(i);
    for (int d = 0; d < prob.dim; ++d) {
      l1 += eps(d) * prob.c_a1(i, d);
      l0 += eps(d) * prob.c_a0(i, d);
    }
    blip(i) = expit(l1) - expit(l0);
  }
  result.psi = blip.mean();

  double score = 0.0;
  double second = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto w = dataset.covariates(i);
    const int a = dataset.treatment(i);
    double lp = prob.logit_obs(i);
    for (int d = 0; d < prob.dim; ++d) lp += eps(d) * prob.c_obs(i, d);
    const double resid = (2.0 * a - 1.0) / arm_likelihood(g(w), a) * (dataset.outcome(i) - expit(lp));
    const double d_star = resid + blip(i) - result.psi;
    score += d_star;
    second += d_star * d_star;
  }
  result.score_residual = score / static_cast<double>(n);
  result.upsilon = second / static_cast<double>(n);
  return result;
}

PropensityFn propensity_fn(const LassoPath& path, double h, const PropensityBounds& bounds) {
  bounds.validate();
  const LogisticCoefficients coef = path.coefficients(path.grid_index(h));
  return [coef, bounds](CovariateRow w) {
    return bounds.apply(expit(coef.intercept + coef.beta.dot(w)));
  };
}

std::function<double(CovariateRow)> propensity_derivative_fn(const LassoPath& path, double h,
                                                             const PropensityBounds& bounds) {
  const std::size_t idx = path.grid_index(h);
  const std::size_t nb = path.neighbour_index(idx);
  const LogisticCoefficients here = path.coefficients(idx);
  const LogisticCoefficients there = path.coefficients(nb);
  const double dh = path.grid().values[nb] - path.grid().values[idx];
  return [here, there, bounds, dh](CovariateRow w) {
    const double g_here = bounds.apply(expit(here.intercept + here.beta.dot(w)));
    const double g_there = bounds.apply(expit(there.intercept + there.beta.dot(w)));
    return (g_there - g_here) / dh;
  };
}

TmleResult plain_tmle(const Dataset& dataset, const OutcomeModel& q0, const LassoPath& path,
                      double h, const PropensityBounds& bounds) {
  PropensityFn g = propensity_fn(path, h, bounds);
  return fluctuate_and_solve(dataset, q0, CleverCovariate::scalar(g), g);
}

}  // namespace ctmle
