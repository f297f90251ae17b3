#pragma once

#include <cstdint>
#include <cmath>

namespace ctmle {

/// Identifies one deterministic random stream. Identical (master_seed,
/// stream_id) pairs reproduce identical draws regardless of execution order
/// or thread count; Monte-Carlo repetition b conventionally uses
/// stream_id = b.
struct RngSpec {
  std::uint64_t master_seed = 0;
  std::uint64_t stream_id = 0;
};

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Counter-based generator (splitmix64 in counter mode). The stream key is a
/// hash of (master_seed, stream_id); draws are a pure function of
/// (key, counter), so streams never interfere across threads.
class Rng {
 public:
  explicit Rng(RngSpec spec)
      : key_(detail::mix64(spec.master_seed ^ detail::mix64(spec.stream_id ^ 0xD1B54A32D192ED03ull))) {}
  Rng(std::uint64_t master_seed, std::uint64_t stream_id) : Rng(RngSpec{master_seed, stream_id}) {}

  /// Derived independent stream; independent of this stream's position.
  Rng fork(std::uint64_t tag) const {
    Rng child(*this);
    child.key_ = detail::mix64(key_ ^ detail::mix64(tag ^ 0x8CB92BA72F3D8DD7ull));
    child.counter_ = 0;
    child.has_cached_normal_ = false;
    return child;
  }

  std::uint64_t next_u64() { return detail::mix64(key_ + (++counter_) * 0x9E3779B97F4A7C15ull); }

  /// Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (no rejection, draws in fixed pairs).
  double next_normal() {
    if (has_cached_normal_) {
      has_cached_normal_ = false;
      return cached_normal_;
    }
    const double u1 = 1.0 - next_double();  // (0, 1]
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586477 * u2;
    cached_normal_ = r * std::sin(theta);
    has_cached_normal_ = true;
    return r * std::cos(theta);
  }

  int next_bernoulli(double p) { return next_double() < p ? 1 : 0; }

  /// Unbiased draw from {0, ..., n-1} (rejection on the top range).
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace ctmle
