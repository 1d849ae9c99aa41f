#pragma once

#include <cstdint>
#include <random>

#include "memvit/numerics/tensor.hpp"

namespace memvit {

/// Seeded parameter initializer. Draw order is the construction order of the
/// model, so identical seeds give bit-identical parameters.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  /// Normal(0, std) resampled outside ±2 std.
  template <typename Scalar>
  Matrix<Scalar> truncated_normal(Index rows, Index cols, double std = 0.02) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix<Scalar> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
      double v = dist(rng_);
      while (v < -2.0 || v > 2.0) v = dist(rng_);
      m.data()[i] = static_cast<Scalar>(v * std);
    }
    return m;
  }

  template <typename Scalar>
  static Matrix<Scalar> constant(Index rows, Index cols, double value) {
    return Matrix<Scalar>::Constant(rows, cols, static_cast<Scalar>(value));
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace memvit
