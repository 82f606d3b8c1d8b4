#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace grouppose {

/// Seeded random stream. All randomness in the library flows through an
/// explicit instance of this class; there is no global generator.
///
/// The conversions to uniform and normal variates are written out here
/// instead of using the <random> distributions, whose algorithms are
/// implementation-defined, so that streams are reproducible bit for bit
/// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform in the open interval (0, 1).
  double uniform_open() {
    double u = 0.0;
    do {
      u = uniform();
    } while (u == 0.0);
    return u;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = 0;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Derive an independent child stream (e.g. one per sample).
  Rng split() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ULL); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace grouppose
