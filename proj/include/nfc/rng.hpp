#pragma once

// Deterministic random number generation. All stochastic code in the
// library draws through this wrapper so that a run is reproducible from
// its seed alone: no wall clock, no OS entropy, no platform-dependent
// distribution implementations.

#include "nfc/common.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace nfc {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(mix64(seed ^ 0x9e3779b97f4a7c15ull)) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is negligible for the n used
  // here (n << 2^64) and keeps the draw count per call fixed at one.
  int uniform_int(int n) {
    require(n > 0, "Rng::uniform_int: n must be positive");
    return static_cast<int>(eng_() % static_cast<std::uint64_t>(n));
  }

  // Standard normal via Box-Muller; the spare value is cached so a pair of
  // uniforms yields two normals.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  Vec normal_vec(Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Vec uniform_vec(Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = uniform();
    return v;
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace nfc
