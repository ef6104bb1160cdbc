#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Core>

namespace sflabel {

/// FNV-1a over a string; stable across platforms (std::hash is not).
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and salts.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt_a, std::uint64_t salt_b = 0) {
  return splitmix64(splitmix64(seed ^ 0x5bf0363546bc9d4bull) ^ splitmix64(salt_a) ^ (salt_b * 0x9e3779b97f4a7c15ull));
}

/// Deterministic RNG with portable draw functions (the std distributions are
/// implementation-defined, so uniform/normal are built from raw engine bits).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1].
  double uniform_pos() { return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n); unbiased via rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    const std::uint64_t limit = n * (UINT64_MAX / n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller (one fresh pair per call).
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// N(0, sigma) truncated to |x| <= k*sigma by rejection. sigma == 0 draws
  /// nothing from the stream and returns exactly 0.
  double truncated_normal(double sigma, double k = 3.0) {
    if (sigma == 0.0) return 0.0;
    double z;
    do {
      z = normal();
    } while (std::abs(z) > k);
    return sigma * z;
  }

  /// Uniform direction on the unit sphere.
  Eigen::Vector3d unit_sphere() {
    const double z = uniform(-1.0, 1.0);
    const double phi = uniform(0.0, 2.0 * 3.14159265358979323846);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    return {r * std::cos(phi), r * std::sin(phi), z};
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace sflabel
