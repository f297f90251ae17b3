#include "ctmle/lasso_path.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "ctmle/errors.hpp"
#include "ctmle/math.hpp"

namespace ctmle {

void PenaltyGrid::validate() const {
  if (values.size() < 1) throw std::invalid_argument("PenaltyGrid: empty grid");
  double prev = std::numeric_limits<double>::infinity();
  for (double h : values) {
    if (!(h > 0.0)) throw std::invalid_argument("PenaltyGrid: penalties must be positive");
    if (!(h < prev)) throw std::invalid_argument("PenaltyGrid: penalties must strictly decrease");
    prev = h;
  }
}

void PropensityBounds::validate() const {
  if (!(lower > 0.0 && lower < 0.5)) {
    throw std::invalid_argument("PropensityBounds: lower must lie in (0, 0.5)");
  }
}

namespace {

struct Standardized {
  Eigen::MatrixXd x;        // n x p, mean 0 and unit variance per column
  Eigen::MatrixXd x_sq;     // elementwise square of x
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;    // 0 flags an excluded constant column
};

Standardized standardize(const Dataset& dataset) {
  const Eigen::Index n = dataset.size();
  const Eigen::Index p = dataset.dim();
  Standardized s;
  s.x = dataset.covariate_matrix();
  s.mean = s.x.colwise().mean();
  s.scale.resize(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    s.x.col(j).array() -= s.mean(j);
    const double var = s.x.col(j).squaredNorm() / static_cast<double>(n);
    s.scale(j) = std::sqrt(var);
    if (s.scale(j) > 0.0) {
      s.x.col(j) /= s.scale(j);
    } else {
      s.x.col(j).setZero();
    }
  }
  s.x_sq = s.x.cwiseProduct(s.x);
  return s;
}

double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

// -a*eta + log(1 + exp(eta)), stable in both tails.
double logistic_term(double eta, double a) {
  const double lse = eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
  return lse - a * eta;
}

struct PathWorkspace {
  const Standardized& std;
  const Eigen::VectorXd a;      // treatments as doubles
  Eigen::VectorXd eta;          // linear predictor
  Eigen::VectorXd prob;         // expit(eta)
  Eigen::VectorXd wgt;          // prob * (1 - prob), floored
  Eigen::VectorXd resid;        // working residual w * (z - fit)
  Eigen::VectorXd nu;           // (1/n) sum w x^2 per column
  double b0 = 0.0;
  Eigen::VectorXd b;
  long sweeps = 0;

  PathWorkspace(const Standardized& s, const Eigen::VectorXi& treat)
      : std(s), a(treat.cast<double>()) {
    const Eigen::Index n = s.x.rows();
    eta.setZero(n);
    prob.setZero(n);
    wgt.setZero(n);
    resid.setZero(n);
    nu.setZero(s.x.cols());
    b.setZero(s.x.cols());
  }

  double n() const { return static_cast<double>(std.x.rows()); }

  void refresh_link() {
    for (Eigen::Index i = 0; i < eta.size(); ++i) prob(i) = expit(eta(i));
    wgt = (prob.array() * (1.0 - prob.array())).max(1e-9).matrix();
    resid = a - prob;
    nu = (std.x_sq.transpose() * wgt) / n();
  }

  void recompute_eta() { eta = (std.x * b).array() + b0; }

  double objective(double h) const {
    double loss = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) loss += logistic_term(eta(i), a(i));
    return loss / n() + h * b.template lpNorm<1>();
  }

  // One coordinate-descent sweep over the given column set plus the
  // intercept, on the current quadratic approximation. Returns the largest
  // coefficient change.
  double cd_sweep(double h, const std::vector<Eigen::Index>& cols) {
    double max_delta = 0.0;
    for (Eigen::Index j : cols) {
      if (nu(j) <= 0.0) continue;
      const double rho = std.x.col(j).dot(resid) / n() + nu(j) * b(j);
      const double bj = soft_threshold(rho, h) / nu(j);
      const double delta = bj - b(j);
      if (delta != 0.0) {
        resid -= delta * std.x.col(j).cwiseProduct(wgt);
        b(j) = bj;
        max_delta = std::max(max_delta, std::abs(delta));
      }
    }
    const double wsum = wgt.sum();
    const double d0 = resid.sum() / wsum;
    if (d0 != 0.0) {
      b0 += d0;
      resid -= d0 * wgt;
      max_delta = std::max(max_delta, std::abs(d0));
    }
    ++sweeps;
    return max_delta;
  }

  // Largest violation of the exact-gradient stationarity conditions,
  // including the unpenalized intercept.
  double kkt_violation(double h) const {
    Eigen::VectorXd grad = std.x.transpose() * (prob - a) / n();
    double viol = std::abs((prob - a).sum() / n());
    for (Eigen::Index j = 0; j < b.size(); ++j) {
      if (std.scale(j) <= 0.0) continue;
      if (b(j) == 0.0) {
        viol = std::max(viol, std::abs(grad(j)) - h);
      } else {
        viol = std::max(viol, std::abs(grad(j) + (b(j) > 0.0 ? h : -h)));
      }
    }
    return viol;
  }
};

constexpr double kKktTol = 1e-8;

// Penalized fit at one grid value, warm-started from the workspace state.
void solve_at(PathWorkspace& ws, double h, double tol, long max_iter) {
  const Eigen::Index p = ws.b.size();
  std::vector<Eigen::Index> all_cols;
  all_cols.reserve(static_cast<std::size_t>(p));
  for (Eigen::Index j = 0; j < p; ++j) {
    if (ws.std.scale(j) > 0.0) all_cols.push_back(j);
  }

  ws.recompute_eta();
  ws.refresh_link();
  double obj = ws.objective(h);

  while (true) {
    const double prev_b0 = ws.b0;
    const Eigen::VectorXd prev_b = ws.b;

    // Solve the weighted quadratic subproblem: one full sweep, then cycle
    // the active set, then re-check the full set for new violations.
    while (true) {
      double delta = ws.cd_sweep(h, all_cols);
      std::vector<Eigen::Index> active;
      for (Eigen::Index j : all_cols) {
        if (ws.b(j) != 0.0) active.push_back(j);
      }
      while (delta >= tol) {
        delta = ws.cd_sweep(h, active);
        if (ws.sweeps > max_iter) throw ConvergenceError("lasso path solver stalled", h);
      }
      const double full_delta = ws.cd_sweep(h, all_cols);
      if (full_delta < tol) break;
      if (ws.sweeps > max_iter) throw ConvergenceError("lasso path solver stalled", h);
    }

    // Guard the exact objective against an overshooting quadratic step.
    ws.recompute_eta();
    double new_obj = ws.objective(h);
    if (new_obj > obj + 1e-12 * (1.0 + std::abs(obj))) {
      const double prop_b0 = ws.b0;
      const Eigen::VectorXd prop_b = ws.b;
      double step = 1.0;
      for (int halvings = 0; halvings < 40; ++halvings) {
        step *= 0.5;
        ws.b0 = prev_b0 + step * (prop_b0 - prev_b0);
        ws.b = prev_b + step * (prop_b - prev_b);
        ws.recompute_eta();
        new_obj = ws.objective(h);
        if (new_obj <= obj + 1e-12 * (1.0 + std::abs(obj))) break;
      }
    }
    obj = new_obj;

    double max_change = std::abs(ws.b0 - prev_b0);
    for (Eigen::Index j = 0; j < p; ++j) {
      max_change = std::max(max_change, std::abs(ws.b(j) - prev_b(j)));
    }
    ws.refresh_link();
    if (max_change < tol && ws.kkt_violation(h) <= kKktTol) return;
    if (ws.sweeps > max_iter) throw ConvergenceError("lasso path solver stalled", h);
  }
}

}  // namespace

double penalty_ceiling(const Dataset& dataset) {
  if (!dataset.has_both_arms()) {
    throw DegenerateTreatmentError("penalty_ceiling: dataset has a single treatment arm");
  }
  const Standardized s = standardize(dataset);
  const Eigen::VectorXd a = dataset.treatments().cast<double>();
  const double abar = a.mean();
  const Eigen::VectorXd centered = a.array() - abar;
  double h_max = 0.0;
  for (Eigen::Index j = 0; j < s.x.cols(); ++j) {
    if (s.scale(j) <= 0.0) continue;
    h_max = std::max(h_max, std::abs(s.x.col(j).dot(centered)) / static_cast<double>(a.size()));
  }
  return h_max;
}

PenaltyGrid default_grid(const Dataset& dataset, int m, double min_ratio) {
  if (m < 2) throw std::invalid_argument("default_grid: need m >= 2");
  if (!(min_ratio > 0.0 && min_ratio < 1.0)) {
    throw std::invalid_argument("default_grid: min_ratio must lie in (0,1)");
  }
  const double h_max = penalty_ceiling(dataset);
  if (!(h_max > 0.0)) {
    throw std::invalid_argument("default_grid: no covariate is associated with treatment");
  }
  PenaltyGrid grid;
  grid.values.resize(static_cast<std::size_t>(m));
  const double log_ratio = std::log(min_ratio);
  for (int k = 0; k < m; ++k) {
    grid.values[static_cast<std::size_t>(k)] =
        h_max * std::exp(log_ratio * static_cast<double>(k) / static_cast<double>(m - 1));
  }
  grid.values.front() = h_max;
  grid.values.back() = h_max * min_ratio;
  grid.validate();
  return grid;
}

LassoPath fit_path(const Dataset& dataset, const PenaltyGrid& grid, double tol, long max_iter) {
  grid.validate();
  if (!(tol > 0.0)) throw std::invalid_argument("fit_path: tol must be positive");
  if (!dataset.has_both_arms()) {
    throw DegenerateTreatmentError("fit_path: dataset has a single treatment arm");
  }
  const Standardized s = standardize(dataset);
  PathWorkspace ws(s, dataset.treatments());
  // Warm start at the intercept-only maximum likelihood solution.
  ws.b0 = logit(clamp(ws.a.mean(), 1e-12, 1.0 - 1e-12));

  std::vector<LogisticCoefficients> fits;
  std::vector<double> risks;
  fits.reserve(grid.size());
  risks.reserve(grid.size());
  for (double h : grid.values) {
    ws.sweeps = 0;
    solve_at(ws, h, tol, max_iter);
    LogisticCoefficients c;
    c.beta.resize(s.x.cols());
    double shift = 0.0;
    for (Eigen::Index j = 0; j < s.x.cols(); ++j) {
      c.beta(j) = s.scale(j) > 0.0 ? ws.b(j) / s.scale(j) : 0.0;
      shift += c.beta(j) * s.mean(j);
    }
    c.intercept = ws.b0 - shift;
    fits.push_back(std::move(c));

    double risk = 0.0;
    for (Eigen::Index i = 0; i < ws.eta.size(); ++i) risk += logistic_term(ws.eta(i), ws.a(i));
    risks.push_back(risk / ws.n());
  }
  return LassoPath(grid, std::move(fits), std::move(risks), dataset.size());
}

LassoPath::LassoPath(PenaltyGrid grid, std::vector<LogisticCoefficients> fits,
                     std::vector<double> train_risk, Eigen::Index trained_n)
    : grid_(std::move(grid)),
      fits_(std::move(fits)),
      train_risk_(std::move(train_risk)),
      trained_n_(trained_n) {
  grid_.validate();
  if (fits_.size() != grid_.size() || train_risk_.size() != grid_.size()) {
    throw std::invalid_argument("LassoPath: one fit per grid value required");
  }
}

std::size_t LassoPath::grid_index(double h) const {
  for (std::size_t k = 0; k < grid_.size(); ++k) {
    const double g = grid_.values[k];
    if (h == g || std::abs(h - g) <= 1e-12 * std::abs(g)) return k;
  }
  throw std::invalid_argument("LassoPath: unknown penalty value");
}

double LassoPath::linear_predictor(std::size_t grid_index, CovariateRow w) const {
  const LogisticCoefficients& c = fits_.at(grid_index);
  return c.intercept + c.beta.dot(w);
}

double LassoPath::propensity_at(std::size_t grid_index, CovariateRow w,
                                const PropensityBounds& bounds) const {
  return bounds.apply(expit(linear_predictor(grid_index, w)));
}

double LassoPath::propensity(double h, CovariateRow w, const PropensityBounds& bounds) const {
  return propensity_at(grid_index(h), w, bounds);
}

std::size_t LassoPath::neighbour_index(std::size_t idx) const {
  const std::size_t m = grid_.size();
  if (m < 2) throw std::invalid_argument("LassoPath: derivative undefined on a single-point grid");
  if (idx == 0) return 1;
  if (idx == m - 1) return m - 2;
  const double h = grid_.values[idx];
  const double d_up = grid_.values[idx - 1] - h;
  const double d_down = h - grid_.values[idx + 1];
  return d_up <= d_down ? idx - 1 : idx + 1;
}

double LassoPath::derivative(double h, CovariateRow w, const PropensityBounds& bounds) const {
  const std::size_t idx = grid_index(h);
  const std::size_t nb = neighbour_index(idx);
  const double g_here = propensity_at(idx, w, bounds);
  const double g_there = propensity_at(nb, w, bounds);
  return (g_there - g_here) / (grid_.values[nb] - grid_.values[idx]);
}

double cv_select(const Dataset& dataset, const PenaltyGrid& grid, const FoldScheme& folds,
                 const PropensityBounds& bounds) {
  grid.validate();
  bounds.validate();
  // Validation scoring uses the raw path predictions with only a tiny
  // floor to keep the loss finite; the user truncation is an estimation
  // safeguard, and letting it shield confident mistakes here would drag the
  // selector toward overfitted penalties.
  constexpr PropensityBounds kScoringFloor{1e-5};
  const auto nll = [](double g, int a) {
    return a == 1 ? -std::log(g) : -std::log1p(-g);
  };
  std::vector<double> risk(grid.size(), 0.0);
  for (int k = 1; k <= folds.fold_count(); ++k) {
    auto [train, valid] = split_fold(dataset, folds, k);
    const LassoPath path = fit_path(train, grid);
    for (std::size_t idx = 0; idx < grid.size(); ++idx) {
      double acc = 0.0;
      for (Eigen::Index i = 0; i < valid.size(); ++i) {
        acc +=
            nll(path.propensity_at(idx, valid.covariates(i), kScoringFloor), valid.treatment(i));
      }
      risk[idx] += acc / static_cast<double>(valid.size());
    }
  }
  std::size_t best = 0;
  for (std::size_t idx = 1; idx < grid.size(); ++idx) {
    if (risk[idx] < risk[best]) best = idx;  // ties keep the larger penalty
  }
  return grid.values[best];
}

void write_path_csv(const LassoPath& path, const std::string& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("write_path_csv: cannot open " + file);
  const Eigen::Index p = path.coefficients(0).beta.size();
  out << "h,intercept";
  for (Eigen::Index j = 0; j < p; ++j) out << ",beta_" << (j + 1);
  out << ",train_risk\n";
  char buf[64];
  const auto put = [&](double x, char sep) {
    std::snprintf(buf, sizeof(buf), "%.17g%c", x, sep);
    out << buf;
  };
  for (std::size_t k = 0; k < path.grid().size(); ++k) {
    put(path.grid().values[k], ',');
    const auto& c = path.coefficients(k);
    put(c.intercept, ',');
    for (Eigen::Index j = 0; j < p; ++j) put(c.beta(j), ',');
    put(path.train_risk()[k], '\n');
  }
}

}  // namespace ctmle
