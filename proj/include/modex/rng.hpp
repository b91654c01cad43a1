#pragma once

// Seeded generator with portable distributions. std::normal_distribution and
// friends are implementation-defined, which would make fixture files differ
// between standard libraries; the engine itself is fully specified.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "modex/numerics.hpp"

namespace modex {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * n); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Student-t with `dof` degrees of freedom (heavy tails for weight fixtures).
  double student_t(int dof) {
    const double z = normal();
    double chi2 = 0.0;
    for (int i = 0; i < dof; ++i) {
      const double g = normal();
      chi2 += g * g;
    }
    return z / std::sqrt(chi2 / dof);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Tensor random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
  Tensor t(rows, cols);
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

inline Tensor random_student_t(std::size_t rows, std::size_t cols, Rng& rng, int dof = 3) {
  Tensor t(rows, cols);
  for (double& v : t.data()) v = rng.student_t(dof);
  return t;
}

}  // namespace modex
