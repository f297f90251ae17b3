#pragma once

#include <cmath>
#include <utility>
#include <vector>

namespace ctmle {

inline double expit(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// Standard normal distribution function, accurate in both tails.
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

inline double norm_pdf(double x) {
  static const double kInvSqrt2Pi = 0.3989422804014326779;
  return kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline double clamp(double x, double lo, double hi) {
  return x < lo ? lo : (x > hi ? hi : x);
}

/// Gauss-Hermite rule for the weight exp(-x^2): nodes and weights such that
/// integral f(x) exp(-x^2) dx ~= sum w_i f(x_i). Computed by the
/// Golub-Welsch eigendecomposition of the Jacobi matrix.
struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

GaussHermiteRule gauss_hermite(int n);

/// E[f(Z)] for Z ~ Normal(mu, sigma^2) under a precomputed rule.
template <typename F>
double gauss_hermite_mean(const GaussHermiteRule& rule, double mu, double sigma, F&& f) {
  static const double kInvSqrtPi = 0.5641895835477562869;
  const double scale = sigma * M_SQRT2;
  double acc = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    acc += rule.weights[i] * f(mu + scale * rule.nodes[i]);
  }
  return acc * kInvSqrtPi;
}

}  // namespace ctmle
