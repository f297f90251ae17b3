#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include "ctmle/dataset.hpp"
#include "ctmle/math.hpp"
#include "ctmle/rng.hpp"
#include "ctmle/targeting.hpp"

namespace ctmle {

/// The synthetic law: W from a centered Gaussian with a block-diagonal
/// covariance (10-dimensional blocks, the first one the identity), treatment
/// from a logistic model shifted by delta, and the outcome the expit of a
/// Gaussian around a linear signal in six coordinates.
struct SyntheticConfig {
  int p = 10;
  double delta = 0.0;

  /// (1, 1, 3/(p-2), ..., 3/(p-2)).
  Eigen::VectorXd coefficients() const;
  void validate() const;
};

class SyntheticSampler {
 public:
  explicit SyntheticSampler(SyntheticConfig config);

  const SyntheticConfig& config() const { return config_; }

  Eigen::VectorXd sample_w(Rng& rng) const;
  Dataset sample(Eigen::Index n, Rng rng) const;

  /// True propensity expit(delta + beta . w).
  double g0(CovariateRow w) const;

  /// Mean of the latent outcome signal: 0.4 (1 + w1 + w2 + w5 + w6 + w8 + a).
  double f0(int a, CovariateRow w) const;

  /// Block-diagonal covariance, assembled (mostly for validation/tests).
  Eigen::MatrixXd covariance() const;

  static constexpr double kOutcomeSd = 0.2;  // conditional variance 1/25

 private:
  SyntheticConfig config_;
  int blocks_;
  std::vector<Eigen::MatrixXd> cholesky_;  // one 10x10 lower factor per block
  Eigen::VectorXd beta_;
};

struct OracleEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// True conditional outcome mean E[expit(Normal(f0(a,w), 1/25))], by
/// Gauss-Hermite quadrature; absolute accuracy ~1e-8 from 40 nodes up.
double oracle_qbar0(const SyntheticConfig& config, int a, CovariateRow w, int nodes = 64);

/// True average treatment effect by outer Monte-Carlo over W and inner
/// quadrature, sharded deterministically (the result does not depend on the
/// thread count).
OracleEstimate oracle_psi0(const SyntheticConfig& config, long draws, RngSpec rng,
                           int nodes = 64, int threads = 1);

struct Rem20Estimate {
  OracleEstimate remainder;     // E[(2A-1)(1 - lG0/lG)(qbar - qbar0)]
  OracleEstimate q_moment;      // E[(qbar - qbar0)^2]
  OracleEstimate g_moment;      // E[((G - G0)/lG)^2]
};

/// Second-order remainder of a (qbar, G) pair under the synthetic law,
/// with the two factor moments of its Cauchy-Schwarz bound.
Rem20Estimate oracle_rem20(const SyntheticConfig& config, const OutcomeModel& q,
                           const PropensityFn& g, long draws, RngSpec rng, int nodes = 64);

/// JSON-backed cache of psi0 estimates keyed by (p, delta, draws, seed).
class OracleCache {
 public:
  explicit OracleCache(std::string file);

  std::optional<OracleEstimate> find(const SyntheticConfig& config, long draws,
                                     std::uint64_t seed) const;
  void store(const SyntheticConfig& config, long draws, std::uint64_t seed,
             const OracleEstimate& estimate);

  /// Cached or freshly computed estimate (persisted on computation).
  OracleEstimate get_or_compute(const SyntheticConfig& config, long draws, std::uint64_t seed,
                                int threads);

 private:
  void load();
  void save() const;

  struct Entry {
    int p;
    double delta;
    long draws;
    std::uint64_t seed;
    OracleEstimate estimate;
  };

  std::string file_;
  std::vector<Entry> entries_;
};

}  // namespace ctmle
