#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "flowdet/mathutil.hpp"

namespace flowdet {

// Seeded random stream. All randomness in the project flows through explicit
// Rng instances; there is no global generator. Distribution transforms are
// implemented here (not via <random> distributions) so results are identical
// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Independent substream derived from (seed, a, b). Used to give every
  // (training step, batch item) and (eval run, scene) its own stream so runs
  // are reproducible regardless of execution order or thread count.
  static Rng child(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return Rng(splitmix64(hash_combine(hash_combine(seed, a), b)));
  }

  // Uniform on [0,1) with 53 random bits.
  double u01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    // Rejection sampling keeps the draw unbiased.
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  // Standard normal via inverse-CDF of a uniform draw.
  double normal() {
    double u = u01();
    // Avoid icdf(0) = -inf.
    if (u <= 0.0) u = 0x1.0p-53;
    return normal_icdf(u);
  }

  std::uint64_t raw() { return engine_(); }

  std::string serialize() const;
  static Rng deserialize(const std::string& text);

 private:
  std::mt19937_64 engine_;
};

}  // namespace flowdet
