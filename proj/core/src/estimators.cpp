#include "ctmle/estimators.hpp"

#include <cmath>

#include "ctmle/errors.hpp"
#include "ctmle/math.hpp"

namespace ctmle {

namespace {

constexpr Eigen::Index kFirstFeature = 2;  // w3 (0-based)
constexpr Eigen::Index kFeatureCount = 8;  // w3..w10
constexpr double kProbFloor = 1e-12;

double probit_loss_and_grad(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                            const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
  const Eigen::Index n = y.size();
  const Eigen::VectorXd eta = x * theta;
  double loss = 0.0;
  if (grad) grad->setZero(theta.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double q = clamp(norm_cdf(eta(i)), kProbFloor, 1.0 - kProbFloor);
    loss += -y(i) * std::log(q) - (1.0 - y(i)) * std::log1p(-q);
    if (grad) {
      const double dq = norm_pdf(eta(i)) * (q - y(i)) / (q * (1.0 - q));
      *grad += dq * x.row(i).transpose();
    }
  }
  loss /= static_cast<double>(n);
  if (grad) *grad /= static_cast<double>(n);
  return loss;
}

// Gradient descent with backtracking line search on one arm's probit fit.
Eigen::VectorXd fit_arm(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(x.cols());
  if (y.size() == 0) return theta;
  Eigen::VectorXd grad(x.cols());
  double loss = probit_loss_and_grad(x, y, theta, &grad);
  double step = 1.0;
  for (int it = 0; it < 10000; ++it) {
    if (grad.lpNorm<Eigen::Infinity>() <= 1e-8) return theta;
    const double g2 = grad.squaredNorm();
    step = std::min(step * 2.0, 64.0);
    while (true) {
      const Eigen::VectorXd trial = theta - step * grad;
      const double trial_loss = probit_loss_and_grad(x, y, trial, nullptr);
      if (trial_loss <= loss - 0.5 * step * g2 || step < 1e-18) {
        theta = trial;
        loss = probit_loss_and_grad(x, y, theta, &grad);
        break;
      }
      step *= 0.5;
    }
  }
  return theta;  // gradient tolerance not reached within the budget
}

}  // namespace

double WorkingModelFit::predict(int a, CovariateRow w) const {
  const auto features = w.segment(kFirstFeature, kFeatureCount);
  const Eigen::VectorXd& theta = a == 1 ? theta1 : theta0;
  const double intercept = a == 1 ? intercept1 : intercept0;
  return norm_cdf(intercept + theta.dot(features));
}

OutcomeModel WorkingModelFit::outcome_model(double clip) const {
  WorkingModelFit copy = *this;
  return OutcomeModel([copy](int a, CovariateRow w) { return copy.predict(a, w); }, clip);
}

WorkingModelFit fit_working_model(const Dataset& dataset) {
  if (dataset.dim() < kFirstFeature + kFeatureCount) {
    throw std::invalid_argument("fit_working_model: needs covariates w3..w10");
  }
  const Eigen::Index n = dataset.size();
  std::vector<Eigen::Index> idx0, idx1;
  for (Eigen::Index i = 0; i < n; ++i) (dataset.treatment(i) == 1 ? idx1 : idx0).push_back(i);

  const auto arm_design = [&](const std::vector<Eigen::Index>& idx) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(idx.size()), kFeatureCount + 1);
    Eigen::VectorXd y(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      x(static_cast<Eigen::Index>(r), 0) = 1.0;
      x.row(static_cast<Eigen::Index>(r)).tail(kFeatureCount) =
          dataset.covariates(idx[r]).segment(kFirstFeature, kFeatureCount);
      y(static_cast<Eigen::Index>(r)) = dataset.outcome(idx[r]);
    }
    return std::make_pair(std::move(x), std::move(y));
  };

  WorkingModelFit fit;
  auto [x0, y0] = arm_design(idx0);
  auto [x1, y1] = arm_design(idx1);
  const Eigen::VectorXd full0 = fit_arm(x0, y0);
  const Eigen::VectorXd full1 = fit_arm(x1, y1);
  fit.intercept0 = full0(0);
  fit.intercept1 = full1(0);
  fit.theta0 = full0.tail(kFeatureCount);
  fit.theta1 = full1.tail(kFeatureCount);
  return fit;
}

double unadjusted(const Dataset& dataset) {
  double sum1 = 0.0, sum0 = 0.0;
  Eigen::Index n1 = 0, n0 = 0;
  for (Eigen::Index i = 0; i < dataset.size(); ++i) {
    if (dataset.treatment(i) == 1) {
      sum1 += dataset.outcome(i);
      ++n1;
    } else {
      sum0 += dataset.outcome(i);
      ++n0;
    }
  }
  if (n1 == 0 || n0 == 0) {
    throw DegenerateTreatmentError("unadjusted: dataset has a single treatment arm");
  }
  return sum1 / static_cast<double>(n1) - sum0 / static_cast<double>(n0);
}

double gcomp(const Dataset& dataset, const OutcomeModel& q) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < dataset.size(); ++i) {
    const auto w = dataset.covariates(i);
    acc += q(1, w) - q(0, w);
  }
  return acc / static_cast<double>(dataset.size());
}

double iptw(const Dataset& dataset, const PropensityFn& g) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < dataset.size(); ++i) {
    const int a = dataset.treatment(i);
    acc += (2.0 * a - 1.0) * dataset.outcome(i) / arm_likelihood(g(dataset.covariates(i)), a);
  }
  return acc / static_cast<double>(dataset.size());
}

double aiptw(const Dataset& dataset, const OutcomeModel& q, const PropensityFn& g) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < dataset.size(); ++i) {
    const auto w = dataset.covariates(i);
    const int a = dataset.treatment(i);
    acc += (2.0 * a - 1.0) / arm_likelihood(g(w), a) * (dataset.outcome(i) - q(a, w));
    acc += q(1, w) - q(0, w);
  }
  return acc / static_cast<double>(dataset.size());
}

double upsilon(const Dataset& dataset, const OutcomeModel& q, const PropensityFn& g, double psi) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < dataset.size(); ++i) {
    const double d = influence_curve(q, g, psi, dataset.row(i));
    acc += d * d;
  }
  return acc / static_cast<double>(dataset.size());
}

EstimateWithCI aiptw_with_ci(const Dataset& dataset, const OutcomeModel& q,
                             const PropensityFn& g) {
  const Eigen::Index n = dataset.size();
  Eigen::VectorXd integrand(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto w = dataset.covariates(i);
    const int a = dataset.treatment(i);
    integrand(i) = (2.0 * a - 1.0) / arm_likelihood(g(w), a) * (dataset.outcome(i) - q(a, w)) +
                   q(1, w) - q(0, w);
  }
  const double psi = integrand.mean();
  const double var = (integrand.array() - psi).square().mean();
  return wald_ci(psi, var, n, "aiptw");
}

EstimateWithCI wald_ci(double psi, double upsilon_value, Eigen::Index n,
                       const std::string& method) {
  if (upsilon_value < 0.0) throw std::invalid_argument("wald_ci: negative variance");
  if (n < 1) throw std::invalid_argument("wald_ci: n must be positive");
  EstimateWithCI e;
  e.psi = psi;
  e.se = std::sqrt(upsilon_value / static_cast<double>(n));
  e.ci_low = psi - 1.96 * e.se;
  e.ci_high = psi + 1.96 * e.se;
  e.method = method;
  return e;
}

}  // namespace ctmle
