#pragma once

// Counter-based random number generation (SplitMix64 applied to a keyed
// counter). Streams are derived by hashing a seed with a path of stream
// labels, so per-(rep, delta) substreams are reproducible regardless of
// execution order.

#include <cstdint>
#include <initializer_list>

#include <Eigen/Core>

namespace scorewatch {

class Rng {
 public:
  explicit Rng(std::uint64_t key) : key_(key) {}

  /// Derives an independent stream from a seed and a label path.
  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

  std::uint64_t next_u64();

  /// Uniform on (0, 1), 53-bit resolution, never exactly 0 or 1.
  double uniform01();

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via the inverse CDF (deterministic, one draw per call).
  double normal();

  /// Gamma(shape, 1) via Marsaglia-Tsang squeeze; shape < 1 handled by boosting.
  double gamma(double shape);

  Eigen::VectorXd normal_vector(int k);
  Eigen::VectorXd dirichlet(double concentration, int k);

  int uniform_int(int lo, int hi);  // inclusive bounds

 private:
  std::uint64_t key_;
  std::uint64_t counter_{0};
};

/// Inverse standard normal CDF, accurate to full double precision after
/// refinement. Exposed for reuse in quantile computations.
double inverse_normal_cdf(double p);

}  // namespace scorewatch
