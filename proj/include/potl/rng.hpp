#pragma once

#include <cstdint>
#include <random>

namespace potl {

/// Portable random stream: std::mt19937_64 (sequence fixed by the standard)
/// with hand-written variate transforms, so draws are identical on every
/// platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on the open interval (0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal via Box-Muller (one variate per call).
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::mt19937_64 engine_;
};

/// Decorrelated seed for substream `index` of `seed` (splitmix64 finalizer).
std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace potl
