#include "ctmle/synthetic.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ctmle/errors.hpp"
#include "ctmle/parallel.hpp"

namespace ctmle {

namespace {

constexpr int kBlockDim = 10;

// Correlated sub-blocks of every covariance block after the first:
// 3x3 with 0.25 links into the third coordinate, two 2x2 with 0.5, and a
// 3x3 whose first two coordinates are 0.5-correlated.
Eigen::MatrixXd correlated_block() {
  Eigen::MatrixXd b = Eigen::MatrixXd::Identity(kBlockDim, kBlockDim);
  b(0, 2) = b(2, 0) = 0.25;
  b(1, 2) = b(2, 1) = 0.25;
  b(3, 4) = b(4, 3) = 0.5;
  b(5, 6) = b(6, 5) = 0.5;
  b(7, 8) = b(8, 7) = 0.5;
  return b;
}

}  // namespace

Eigen::VectorXd SyntheticConfig::coefficients() const {
  Eigen::VectorXd beta(p);
  beta(0) = 1.0;
  beta(1) = 1.0;
  const double tail = 3.0 / static_cast<double>(p - 2);
  for (int j = 2; j < p; ++j) beta(j) = tail;
  return beta;
}

void SyntheticConfig::validate() const {
  if (p < 10) throw std::invalid_argument("SyntheticConfig: p must be at least 10");
  if (!(delta >= 0.0)) throw std::invalid_argument("SyntheticConfig: delta must be >= 0");
}

SyntheticSampler::SyntheticSampler(SyntheticConfig config) : config_(config) {
  config_.validate();
  blocks_ = (config_.p + kBlockDim - 1) / kBlockDim;
  cholesky_.reserve(static_cast<std::size_t>(blocks_));
  cholesky_.push_back(Eigen::MatrixXd::Identity(kBlockDim, kBlockDim));
  if (blocks_ > 1) {
    const Eigen::LLT<Eigen::MatrixXd> llt(correlated_block());
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error("SyntheticSampler: covariance block not positive definite");
    }
    const Eigen::MatrixXd factor = llt.matrixL();
    for (int b = 1; b < blocks_; ++b) cholesky_.push_back(factor);
  }
  beta_ = config_.coefficients();
}

Eigen::MatrixXd SyntheticSampler::covariance() const {
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(blocks_ * kBlockDim, blocks_ * kBlockDim);
  sigma.topLeftCorner(kBlockDim, kBlockDim).setIdentity();
  for (int b = 1; b < blocks_; ++b) {
    sigma.block(b * kBlockDim, b * kBlockDim, kBlockDim, kBlockDim) = correlated_block();
  }
  return sigma;
}

Eigen::VectorXd SyntheticSampler::sample_w(Rng& rng) const {
  Eigen::VectorXd latent(blocks_ * kBlockDim);
  Eigen::VectorXd z(kBlockDim);
  for (int b = 0; b < blocks_; ++b) {
    for (int j = 0; j < kBlockDim; ++j) z(j) = rng.next_normal();
    if (b == 0) {
      latent.segment(0, kBlockDim) = z;
    } else {
      latent.segment(b * kBlockDim, kBlockDim) = cholesky_[static_cast<std::size_t>(b)] * z;
    }
  }
  return latent.head(config_.p);
}

double SyntheticSampler::g0(CovariateRow w) const { return expit(config_.delta + beta_.dot(w)); }

double SyntheticSampler::f0(int a, CovariateRow w) const {
  return 0.4 * (1.0 + w(0) + w(1) + w(4) + w(5) + w(7) + static_cast<double>(a));
}

Dataset SyntheticSampler::sample(Eigen::Index n, Rng rng) const {
  if (n < 1) throw std::invalid_argument("SyntheticSampler: n must be positive");
  CovariateMatrix w(n, config_.p);
  Eigen::VectorXi a(n);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd wi = sample_w(rng);
    w.row(i) = wi;
    a(i) = rng.next_bernoulli(g0(wi));
    const double latent = f0(a(i), wi) + kOutcomeSd * rng.next_normal();
    y(i) = expit(latent);
  }
  return Dataset(std::move(w), std::move(a), std::move(y));
}

double oracle_qbar0(const SyntheticConfig& config, int a, CovariateRow w, int nodes) {
  const SyntheticSampler sampler(config);
  const GaussHermiteRule rule = gauss_hermite(nodes);
  return gauss_hermite_mean(rule, sampler.f0(a, w), SyntheticSampler::kOutcomeSd,
                            [](double v) { return expit(v); });
}

namespace {

struct MomentAccumulator {
  double sum = 0.0;
  double sum_sq = 0.0;
  long count = 0;

  void add(double x) {
    sum += x;
    sum_sq += x * x;
    ++count;
  }
  void merge(const MomentAccumulator& other) {
    sum += other.sum;
    sum_sq += other.sum_sq;
    count += other.count;
  }
  OracleEstimate estimate() const {
    OracleEstimate e;
    const double n = static_cast<double>(count);
    e.value = sum / n;
    const double var = sum_sq / n - e.value * e.value;
    e.std_error = std::sqrt(std::max(var, 0.0) / n);
    return e;
  }
};

}  // namespace

OracleEstimate oracle_psi0(const SyntheticConfig& config, long draws, RngSpec rng, int nodes,
                           int threads) {
  if (draws < 10000) throw std::invalid_argument("oracle_psi0: need at least 1e4 draws");
  const SyntheticSampler sampler(config);
  const GaussHermiteRule rule = gauss_hermite(nodes);

  // Fixed shard count and per-shard streams keep the reduction identical for
  // every thread count.
  const int n_shards = static_cast<int>(std::min<long>(128, draws));
  std::vector<MomentAccumulator> acc(static_cast<std::size_t>(n_shards));
  const Rng base{rng};
  parallel_tasks(n_shards, threads, [&](long s) {
    const long lo = draws * s / n_shards;
    const long hi = draws * (s + 1) / n_shards;
    Rng local = base.fork(static_cast<std::uint64_t>(s));
    MomentAccumulator& a = acc[static_cast<std::size_t>(s)];
    for (long d = lo; d < hi; ++d) {
      const Eigen::VectorXd w = sampler.sample_w(local);
      const double q1 = gauss_hermite_mean(rule, sampler.f0(1, w), SyntheticSampler::kOutcomeSd,
                                           [](double v) { return expit(v); });
      const double q0 = gauss_hermite_mean(rule, sampler.f0(0, w), SyntheticSampler::kOutcomeSd,
                                           [](double v) { return expit(v); });
      a.add(q1 - q0);
    }
  });
  MomentAccumulator total;
  for (const auto& a : acc) total.merge(a);
  return total.estimate();
}

Rem20Estimate oracle_rem20(const SyntheticConfig& config, const OutcomeModel& q,
                           const PropensityFn& g, long draws, RngSpec rng, int nodes) {
  if (draws < 1) throw std::invalid_argument("oracle_rem20: draws must be positive");
  const SyntheticSampler sampler(config);
  const GaussHermiteRule rule = gauss_hermite(nodes);

  MomentAccumulator rem, qm, gm;
  Rng local{rng};
  for (long d = 0; d < draws; ++d) {
    const Eigen::VectorXd w = sampler.sample_w(local);
    const double g0 = sampler.g0(w);
    const int a = local.next_bernoulli(g0);
    const double qbar0 = gauss_hermite_mean(rule, sampler.f0(a, w),
                                            SyntheticSampler::kOutcomeSd,
                                            [](double v) { return expit(v); });
    const double lg0 = arm_likelihood(g0, a);
    const double lg = arm_likelihood(g(w), a);
    const double dq = q(a, w) - qbar0;
    rem.add((2.0 * a - 1.0) * (1.0 - lg0 / lg) * dq);
    qm.add(dq * dq);
    const double gr = (g(w) - g0) / lg;
    gm.add(gr * gr);
  }
  return Rem20Estimate{rem.estimate(), qm.estimate(), gm.estimate()};
}

OracleCache::OracleCache(std::string file) : file_(std::move(file)) { load(); }

void OracleCache::load() {
  entries_.clear();
  std::ifstream in(file_);
  if (!in) return;  // absent cache is an empty cache
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception&) {
    return;  // unreadable cache is rebuilt from scratch
  }
  if (!doc.contains("entries")) return;
  for (const auto& e : doc["entries"]) {
    Entry entry;
    entry.p = e.at("p").get<int>();
    entry.delta = e.at("delta").get<double>();
    entry.draws = e.at("draws").get<long>();
    entry.seed = e.at("seed").get<std::uint64_t>();
    entry.estimate.value = e.at("psi0").get<double>();
    entry.estimate.std_error = e.at("se").get<double>();
    entries_.push_back(entry);
  }
}

void OracleCache::save() const {
  nlohmann::json doc;
  doc["entries"] = nlohmann::json::array();
  for (const auto& e : entries_) {
    doc["entries"].push_back({{"p", e.p},
                              {"delta", e.delta},
                              {"draws", e.draws},
                              {"seed", e.seed},
                              {"psi0", e.estimate.value},
                              {"se", e.estimate.std_error}});
  }
  const auto parent = std::filesystem::path(file_).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(file_);
  if (!out) throw std::runtime_error("OracleCache: cannot write " + file_);
  out << doc.dump(2) << '\n';
}

std::optional<OracleEstimate> OracleCache::find(const SyntheticConfig& config, long draws,
                                                std::uint64_t seed) const {
  for (const auto& e : entries_) {
    if (e.p == config.p && e.delta == config.delta && e.draws == draws && e.seed == seed) {
      return e.estimate;
    }
  }
  return std::nullopt;
}

void OracleCache::store(const SyntheticConfig& config, long draws, std::uint64_t seed,
                        const OracleEstimate& estimate) {
  entries_.push_back(Entry{config.p, config.delta, draws, seed, estimate});
  save();
}

OracleEstimate OracleCache::get_or_compute(const SyntheticConfig& config, long draws,
                                           std::uint64_t seed, int threads) {
  if (auto hit = find(config, draws, seed)) return *hit;
  const OracleEstimate estimate = oracle_psi0(config, draws, RngSpec{seed, 0}, 64, threads);
  store(config, draws, seed, estimate);
  return estimate;
}

}  // namespace ctmle
