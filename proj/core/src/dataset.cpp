#include "ctmle/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ctmle {

Observation::Observation(Eigen::VectorXd w_in, int a_in, double y_in)
    : w(std::move(w_in)), a(a_in), y(y_in) {
  if (a != 0 && a != 1) throw std::invalid_argument("Observation: a must be 0 or 1");
  if (!(y >= 0.0 && y <= 1.0)) throw std::invalid_argument("Observation: y must lie in [0,1]");
  if (!w.allFinite()) throw std::invalid_argument("Observation: covariates must be finite");
}

Dataset::Dataset(const std::vector<Observation>& rows) {
  if (rows.empty()) throw std::invalid_argument("Dataset: need at least one row");
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index p = rows.front().w.size();
  w_.resize(n, p);
  a_.resize(n);
  y_.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Observation& o = rows[static_cast<std::size_t>(i)];
    if (o.w.size() != p) throw std::invalid_argument("Dataset: covariate dimension mismatch");
    w_.row(i) = o.w;
    a_(i) = o.a;
    y_(i) = o.y;
  }
  validate();
}

Dataset::Dataset(CovariateMatrix w, Eigen::VectorXi a, Eigen::VectorXd y)
    : w_(std::move(w)), a_(std::move(a)), y_(std::move(y)) {
  validate();
}

void Dataset::validate() const {
  const Eigen::Index n = a_.size();
  if (n < 1) throw std::invalid_argument("Dataset: need at least one row");
  if (w_.rows() != n || y_.size() != n) throw std::invalid_argument("Dataset: ragged columns");
  if (!w_.allFinite()) throw std::invalid_argument("Dataset: covariates must be finite");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (a_(i) != 0 && a_(i) != 1) throw std::invalid_argument("Dataset: a must be 0 or 1");
    if (!(y_(i) >= 0.0 && y_(i) <= 1.0)) throw std::invalid_argument("Dataset: y must lie in [0,1]");
  }
}

bool Dataset::has_both_arms() const {
  bool seen0 = false, seen1 = false;
  for (Eigen::Index i = 0; i < a_.size(); ++i) (a_(i) == 1 ? seen1 : seen0) = true;
  return seen0 && seen1;
}

Dataset Dataset::subset(const std::vector<Eigen::Index>& idx) const {
  if (idx.empty()) throw std::invalid_argument("Dataset::subset: empty index set");
  CovariateMatrix w(static_cast<Eigen::Index>(idx.size()), w_.cols());
  Eigen::VectorXi a(static_cast<Eigen::Index>(idx.size()));
  Eigen::VectorXd y(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    w.row(static_cast<Eigen::Index>(r)) = w_.row(idx[r]);
    a(static_cast<Eigen::Index>(r)) = a_(idx[r]);
    y(static_cast<Eigen::Index>(r)) = y_(idx[r]);
  }
  return Dataset(std::move(w), std::move(a), std::move(y));
}

FoldScheme::FoldScheme(int v, std::vector<int> assignment)
    : v_(v), assignment_(std::move(assignment)) {
  if (v_ < 1) throw std::invalid_argument("FoldScheme: v must be positive");
  std::vector<std::size_t> counts(static_cast<std::size_t>(v_), 0);
  for (int label : assignment_) {
    if (label < 1 || label > v_) throw std::invalid_argument("FoldScheme: label out of range");
    ++counts[static_cast<std::size_t>(label - 1)];
  }
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  if (*lo == 0) throw std::invalid_argument("FoldScheme: empty fold");
  if (*hi - *lo > 1) throw std::invalid_argument("FoldScheme: fold sizes differ by more than 1");
}

FoldScheme make_folds(const Dataset& dataset, int v, Rng rng) {
  const Eigen::Index n = dataset.size();
  if (v < 2 || static_cast<Eigen::Index>(v) > n) {
    throw std::invalid_argument("make_folds: need 2 <= v <= n");
  }
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  for (Eigen::Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Eigen::Index>(rng.next_below(static_cast<std::uint64_t>(i) + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Eigen::Index pos = 0; pos < n; ++pos) {
    labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(pos)])] =
        static_cast<int>(pos % v) + 1;
  }
  return FoldScheme(v, std::move(labels));
}

std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> fold_indices(
    const FoldScheme& folds, int k) {
  if (k < 1 || k > folds.fold_count()) throw std::out_of_range("fold index out of range");
  std::vector<Eigen::Index> train, valid;
  const auto& labels = folds.assignment();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (labels[i] == k ? valid : train).push_back(static_cast<Eigen::Index>(i));
  }
  return {std::move(train), std::move(valid)};
}

std::pair<Dataset, Dataset> split_fold(const Dataset& dataset, const FoldScheme& folds, int k) {
  if (static_cast<Eigen::Index>(folds.assignment().size()) != dataset.size()) {
    throw std::invalid_argument("split_fold: fold scheme size mismatch");
  }
  auto [train_idx, valid_idx] = fold_indices(folds, k);
  return {dataset.subset(train_idx), dataset.subset(valid_idx)};
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void format_g17(std::string& out, double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  out += buf;
}

}  // namespace

Dataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_dataset_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("read_dataset_csv: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_line(line);
  if (header.size() < 3 || header[header.size() - 2] != "a" || header.back() != "y") {
    throw std::runtime_error("read_dataset_csv: expected header w1,...,wp,a,y");
  }
  const std::size_t p = header.size() - 2;
  for (std::size_t j = 0; j < p; ++j) {
    if (header[j] != "w" + std::to_string(j + 1)) {
      throw std::runtime_error("read_dataset_csv: expected header w1,...,wp,a,y");
    }
  }
  std::vector<Observation> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw std::runtime_error("read_dataset_csv: ragged row in " + path);
    }
    Eigen::VectorXd w(static_cast<Eigen::Index>(p));
    for (std::size_t j = 0; j < p; ++j) w(static_cast<Eigen::Index>(j)) = std::stod(cells[j]);
    const long a_raw = std::stol(cells[p]);
    if (a_raw != 0 && a_raw != 1) throw std::runtime_error("read_dataset_csv: a must be 0 or 1");
    rows.emplace_back(std::move(w), static_cast<int>(a_raw), std::stod(cells[p + 1]));
  }
  return Dataset(rows);
}

void write_dataset_csv(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_dataset_csv: cannot open " + path);
  std::string buf;
  for (Eigen::Index j = 0; j < dataset.dim(); ++j) {
    buf += "w" + std::to_string(j + 1) + ",";
  }
  buf += "a,y\n";
  for (Eigen::Index i = 0; i < dataset.size(); ++i) {
    const auto w = dataset.covariates(i);
    for (Eigen::Index j = 0; j < w.size(); ++j) {
      format_g17(buf, w(j));
      buf += ',';
    }
    buf += std::to_string(dataset.treatment(i));
    buf += ',';
    format_g17(buf, dataset.outcome(i));
    buf += '\n';
  }
  out << buf;
  if (!out) throw std::runtime_error("write_dataset_csv: write failed for " + path);
}

}  // namespace ctmle
