#pragma once

#include <stdexcept>
#include <string>

namespace ctmle {

/// Dataset has rows from only one treatment arm where both are required.
class DegenerateTreatmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A solver exhausted its iteration budget. `penalty` carries the grid value
/// at which the path solver gave up (NaN when not applicable).
class ConvergenceError : public std::runtime_error {
 public:
  explicit ConvergenceError(const std::string& what, double penalty = 0.0 / 0.0)
      : std::runtime_error(what), penalty_(penalty) {}
  double penalty() const { return penalty_; }

 private:
  double penalty_;
};

/// The fluctuation parameter ran past its cap, signalling near-separation.
class FluctuationDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The collaborative construction had no candidate penalty to start from.
class NoCandidateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A whole estimator run failed after exhausting its fallbacks.
class EstimationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ctmle
