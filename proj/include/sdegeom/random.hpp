#pragma once

// Deterministic random streams.
//
// Stream (seed, index) is an mt19937_64 whose state is seeded with
// splitmix64(seed) xor splitmix64(index + golden ratio). Uniforms take the top 53 bits;
// Gaussians use the Box-Muller transform, both outputs consumed in order.
// std::normal_distribution is avoided because its algorithm is
// implementation-defined.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "sdegeom/numeric.hpp"

namespace sdegeom {

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t index = 0)
      : engine_(splitmix64(seed) ^ splitmix64(index + 0x9e3779b97f4a7c15ULL)) {}

  /// Uniform on the open interval (0, 1).
  double uniform() {
    const std::uint64_t bits = engine_() >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

  Vec normal_vec(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  Mat normal_mat(int rows, int cols) {
    Mat a(rows, cols);
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows; ++i) a(i, j) = normal();
    return a;
  }

  /// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with sign fix).
  Mat orthogonal(int n) {
    const Mat a = normal_mat(n, n);
    Eigen::HouseholderQR<Mat> qr(a);
    Mat q = qr.householderQ() * Mat::Identity(n, n);
    const Mat r = qr.matrixQR().template triangularView<Eigen::Upper>();
    for (int i = 0; i < n; ++i) {
      if (r(i, i) < 0.0) q.col(i) *= -1.0;
    }
    return q;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sdegeom
