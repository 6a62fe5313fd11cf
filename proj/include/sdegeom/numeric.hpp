#pragma once

// Small dense linear algebra and the finite-difference derivative oracle.
//
// Every derivative of a coefficient field in the library goes through
// directional_derivative / second_derivative below, so the accuracy of all
// tensor quantities is governed by one DerivOracle.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <type_traits>
#include <vector>

#include "sdegeom/error.hpp"

namespace sdegeom {

/// Upper bound on manifold dimension n, noise dimension m and embedding
/// dimension. Storage is inline (no heap) up to this size.
inline constexpr int kMaxDim = 16;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxDim, kMaxDim>;

inline Vec unit_vector(int n, int j) {
  Vec e = Vec::Zero(n);
  e(j) = 1.0;
  return e;
}

inline bool all_finite(const Mat& a) { return a.allFinite(); }

/// Central differences with Richardson extrapolation.
///
/// The probe step is base_step * max(1, |x|) along the unit direction.
/// Each Richardson level halves the step and cancels the next even power
/// of the truncation error, so one level gives an O(h^4) first derivative.
struct DerivOracle {
  double base_step = 1e-4;
  int richardson_levels = 1;

  double step_at(const Vec& x) const { return base_step * std::max(1.0, x.norm()); }

  /// Oracle used when the differentiated field is itself computed by this
  /// oracle (curvature from Christoffel symbols, d of a codifferential).
  /// The coarser step keeps the amplified round-off of the inner
  /// differences below the truncation error of the outer one.
  DerivOracle nested() const { return DerivOracle{base_step * 10.0, richardson_levels}; }
};

namespace detail {

template <class F>
auto probe(F& f, const Vec& x) {
  try {
    return f(x);
  } catch (const Error& e) {
    if (e.code() == Errc::EvalFailure) throw;
    throw Error(Errc::EvalFailure, std::string("field evaluation failed at probe point: ") + e.what());
  } catch (const std::exception& e) {
    throw Error(Errc::EvalFailure, std::string("field evaluation failed at probe point: ") + e.what());
  }
}

template <class T>
T richardson(std::vector<T> table) {
  // table[l] holds the estimate at step h / 2^l; error expansion in even powers.
  double factor = 4.0;
  for (std::size_t level = 1; level < table.size(); ++level) {
    for (std::size_t l = 0; l + level < table.size(); ++l) {
      table[l] = T((table[l + 1] * factor - table[l]) * (1.0 / (factor - 1.0)));
    }
    factor *= 4.0;
  }
  return table.front();
}

}  // namespace detail

/// Df(x)(v) for a vector-, matrix- or tensor-valued f.
///
/// The value type must support T+T, T-T and T*double. Throws EvalFailure
/// when f throws on any probe point.
template <class F>
auto directional_derivative(F&& f, const Vec& x, const Vec& v, const DerivOracle& oracle) {
  using T = std::decay_t<decltype(f(x))>;
  const double speed = v.norm();
  if (speed == 0.0) {
    T at = detail::probe(f, x);
    return T(at * 0.0);
  }
  const Vec dir = v / speed;
  const double h0 = oracle.step_at(x);
  std::vector<T> table;
  table.reserve(oracle.richardson_levels + 1);
  double h = h0;
  for (int l = 0; l <= oracle.richardson_levels; ++l, h *= 0.5) {
    const Vec xp = x + h * dir;
    const Vec xm = x - h * dir;
    T fp = detail::probe(f, xp);
    T fm = detail::probe(f, xm);
    table.push_back(T((fp - fm) * (1.0 / (2.0 * h))));
  }
  T d = detail::richardson(std::move(table));
  return T(d * speed);
}

/// Mixed second derivative D^2 f(x)(u, v) by the four-point central stencil.
///
/// Uses ten times the first-derivative step: the stencil divides by h^2,
/// so a larger step keeps round-off at the 1e-10 level.
template <class F>
auto second_derivative(F&& f, const Vec& x, const Vec& u, const Vec& v, const DerivOracle& oracle) {
  using T = std::decay_t<decltype(f(x))>;
  const double su = u.norm();
  const double sv = v.norm();
  if (su == 0.0 || sv == 0.0) {
    T at = detail::probe(f, x);
    return T(at * 0.0);
  }
  const Vec du = u / su;
  const Vec dv = v / sv;
  double h = 10.0 * oracle.step_at(x);
  std::vector<T> table;
  table.reserve(oracle.richardson_levels + 1);
  for (int l = 0; l <= oracle.richardson_levels; ++l, h *= 0.5) {
    T fpp = detail::probe(f, Vec(x + h * du + h * dv));
    T fpm = detail::probe(f, Vec(x + h * du - h * dv));
    T fmp = detail::probe(f, Vec(x - h * du + h * dv));
    T fmm = detail::probe(f, Vec(x - h * du - h * dv));
    table.push_back(T((fpp - fpm - fmp + fmm) * (1.0 / (4.0 * h * h))));
  }
  T d = detail::richardson(std::move(table));
  return T(d * (su * sv));
}

/// Jacobian of a vector-valued field: column j is Df(x)(e_j).
template <class F>
Mat jacobian(F&& f, const Vec& x, const DerivOracle& oracle) {
  const int n = static_cast<int>(x.size());
  std::vector<Vec> cols;
  cols.reserve(n);
  for (int j = 0; j < n; ++j) cols.push_back(directional_derivative(f, x, unit_vector(n, j), oracle));
  Mat jac(cols.empty() ? 0 : cols.front().size(), n);
  for (int j = 0; j < n; ++j) jac.col(j) = cols[j];
  return jac;
}

namespace detail {

inline void require_symmetric(const Mat& a) {
  if (a.rows() != a.cols()) throw Error(Errc::NotSPD, "matrix is not square");
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw Error(Errc::NotSPD, "matrix is not symmetric");
  }
}

inline Eigen::LLT<Mat> factor_spd(const Mat& a) {
  require_symmetric(a);
  if (!a.allFinite()) throw Error(Errc::NotSPD, "matrix has non-finite entries");
  Eigen::LLT<Mat> llt(a);
  if (llt.info() != Eigen::Success) throw Error(Errc::NotSPD, "Cholesky factorization failed");
  const auto& l = llt.matrixLLT();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (!(l(i, i) > 0.0)) throw Error(Errc::NotSPD, "matrix is not positive definite");
  }
  return llt;
}

}  // namespace detail

/// Solves a x = b for symmetric positive definite a (Cholesky).
inline Vec solve_spd(const Mat& a, const Vec& b) {
  auto llt = detail::factor_spd(a);
  return llt.solve(b);
}

inline Mat inverse_spd(const Mat& a) {
  auto llt = detail::factor_spd(a);
  Mat id = Mat::Identity(a.rows(), a.cols());
  Mat inv = llt.solve(id);
  return 0.5 * (inv + inv.transpose());
}

inline double min_singular_value(const Mat& a) {
  if (a.size() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(a);
  return svd.singularValues().minCoeff();
}

inline double max_singular_value(const Mat& a) {
  if (a.size() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(a);
  return svd.singularValues().maxCoeff();
}

/// Gram-Schmidt on the chart basis e_1..e_n under the inner product g.
/// Column a of the result is f_a with <f_a, f_b>_g = delta_ab.
inline Mat orthonormal_frame(const Mat& g) {
  const int n = static_cast<int>(g.rows());
  Mat frame = Mat::Identity(n, n);
  for (int a = 0; a < n; ++a) {
    Vec f = frame.col(a);
    for (int b = 0; b < a; ++b) {
      const Vec fb = frame.col(b);
      f -= (fb.dot(g * f)) * fb;
    }
    const double norm = std::sqrt(f.dot(g * f));
    if (!(norm > 0.0)) throw Error(Errc::NotSPD, "metric is not positive definite");
    frame.col(a) = f / norm;
  }
  return frame;
}

/// Symmetric eigenvalues of the quadratic form q restricted to the
/// g-unit sphere (ascending).
inline Vec form_eigenvalues(const Mat& q, const Mat& g) {
  const Mat frame = orthonormal_frame(g);
  Mat sym = frame.transpose() * (0.5 * (q + q.transpose())) * frame;
  Eigen::SelfAdjointEigenSolver<Mat> es(sym, Eigen::EigenvaluesOnly);
  return es.eigenvalues();
}

/// Isometric part U V^T of a matrix with SVD U S V^T (thin).
inline Mat polar_factor(const Mat& a) {
  Eigen::JacobiSVD<Mat> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return svd.matrixU() * svd.matrixV().transpose();
}

/// Pairwise (fixed binary tree) summation; result independent of how the
/// caller produced the sequence, which keeps parallel reductions reproducible.
inline double pairwise_sum(const double* data, std::size_t count) {
  if (count == 0) return 0.0;
  if (count <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < count; ++i) s += data[i];
    return s;
  }
  const std::size_t half = count / 2;
  return pairwise_sum(data, half) + pairwise_sum(data + half, count - half);
}

inline double pairwise_sum(const std::vector<double>& values) {
  return pairwise_sum(values.data(), values.size());
}

}  // namespace sdegeom
