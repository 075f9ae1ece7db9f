#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

namespace flowdet {

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Standard normal CDF via erfc; accurate in both tails.
inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

// Inverse standard normal CDF. Acklam's rational approximation followed by one
// Halley refinement step; |error| < 1e-14 over (0,1).
double normal_icdf(double p);

// splitmix64: used to derive child seeds from a parent seed deterministically.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// The seed is pre-mixed so that adjacent (seed, v) pairs cannot alias:
// with a raw xor, (seed, v+1) and (seed^1, v) often map to the same stream,
// which would let one run's val split reappear as another seed's train split.
inline std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t v) {
  return splitmix64(splitmix64(seed) ^ (v + 0x9e3779b97f4a7c15ull));
}

std::uint64_t fnv1a64(const std::string& text);

// Canonical 16-hex-digit hash of a flat key=value map ("k=v\n" lines in map
// order). Stamped on datasets, checkpoints, and result files for provenance.
std::string config_hash_hex(const std::map<std::string, std::string>& kv);

// Lossless text form of a double ("%.17g"); parse with strtod round-trips
// bit-exactly, which dataset and checkpoint files rely on.
std::string format_double(double v);

}  // namespace flowdet
