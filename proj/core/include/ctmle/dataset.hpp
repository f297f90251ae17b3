#pragma once

#include <Eigen/Dense>

#include <string>
#include <utility>
#include <vector>

#include "ctmle/rng.hpp"

namespace ctmle {

/// Row-major covariate storage so that per-observation rows are contiguous.
using CovariateMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CovariateRow = Eigen::Ref<const Eigen::VectorXd>;

/// One observation (w, a, y): baseline covariates, binary treatment,
/// outcome in [0, 1]. Validated on construction.
struct Observation {
  Eigen::VectorXd w;
  int a = 0;
  double y = 0.0;

  Observation() = default;
  Observation(Eigen::VectorXd w_in, int a_in, double y_in);
};

/// Immutable container of observations with a common covariate dimension;
/// empirical averages are computed over it. Build-then-freeze: safe to share
/// across concurrent workers.
class Dataset {
 public:
  explicit Dataset(const std::vector<Observation>& rows);
  Dataset(CovariateMatrix w, Eigen::VectorXi a, Eigen::VectorXd y);

  Eigen::Index size() const { return a_.size(); }
  Eigen::Index dim() const { return w_.cols(); }

  CovariateRow covariates(Eigen::Index i) const { return w_.row(i); }
  int treatment(Eigen::Index i) const { return a_(i); }
  double outcome(Eigen::Index i) const { return y_(i); }
  Observation row(Eigen::Index i) const { return Observation(w_.row(i), a_(i), y_(i)); }

  const CovariateMatrix& covariate_matrix() const { return w_; }
  const Eigen::VectorXi& treatments() const { return a_; }
  const Eigen::VectorXd& outcomes() const { return y_; }

  bool has_both_arms() const;

  /// Subset by row indices (order preserved).
  Dataset subset(const std::vector<Eigen::Index>& idx) const;

 private:
  void validate() const;

  CovariateMatrix w_;
  Eigen::VectorXi a_;
  Eigen::VectorXd y_;
};

/// V-fold partition: per-row labels in {1..v}, every fold non-empty, fold
/// sizes differing by at most one.
class FoldScheme {
 public:
  FoldScheme(int v, std::vector<int> assignment);

  int fold_count() const { return v_; }
  const std::vector<int>& assignment() const { return assignment_; }
  int label(Eigen::Index i) const { return assignment_[static_cast<std::size_t>(i)]; }

 private:
  int v_;
  std::vector<int> assignment_;
};

/// Uniformly random balanced partition: random permutation, then round-robin
/// labels. Deterministic given the stream.
FoldScheme make_folds(const Dataset& dataset, int v, Rng rng);

/// (train, valid): valid = rows labeled k (1-based), train = the complement.
std::pair<Dataset, Dataset> split_fold(const Dataset& dataset, const FoldScheme& folds, int k);

/// Row indices of the two halves, in dataset order.
std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> fold_indices(
    const FoldScheme& folds, int k);

template <typename RowFn>
double empirical_mean(const Dataset& dataset, RowFn&& f) {
  if (dataset.size() == 0) throw std::invalid_argument("empirical_mean: empty dataset");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < dataset.size(); ++i) acc += f(dataset.row(i));
  return acc / static_cast<double>(dataset.size());
}

/// CSV with header `w1,...,wp,a,y`; values round-trip exactly at 17
/// significant digits.
Dataset read_dataset_csv(const std::string& path);
void write_dataset_csv(const Dataset& dataset, const std::string& path);

}  // namespace ctmle
