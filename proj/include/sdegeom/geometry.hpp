#pragma once

// Pointwise tensor calculus for the connections induced by an SDE.
//
// Index convention: Gamma(v, w)^i = Gamma^i_{jk} v^j w^k with j the
// direction of differentiation, so nabla_v Z = DZ(v) + Gamma(v, Z).
// Curvature: R(u, v) w = nabla_u nabla_v W - nabla_v nabla_u W - nabla_[U,V] W,
// stored as R^i_{jkl} u^j v^k w^l.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "sdegeom/error.hpp"
#include "sdegeom/model.hpp"
#include "sdegeom/numeric.hpp"
#include "sdegeom/random.hpp"

namespace sdegeom {

using VectorField = std::function<Vec(const Vec&)>;
using ScalarField = std::function<double(const Vec&)>;
/// A 1-form in chart coordinates: the row of components phi_k(x) as a vector.
using FormField = std::function<Vec(const Vec&)>;

/// Rank-3 array with components T^i_{jk}, stored as n slices over j.
class Tensor3 {
 public:
  Tensor3() = default;
  explicit Tensor3(int n) : slices_(n, Mat::Zero(n, n)) {}

  int dim() const { return static_cast<int>(slices_.size()); }

  double operator()(int i, int j, int k) const { return slices_[j](i, k); }
  double& operator()(int i, int j, int k) { return slices_[j](i, k); }

  const Mat& slice(int j) const { return slices_[j]; }
  Mat& slice(int j) { return slices_[j]; }

  /// The matrix w -> T(v, w).
  Mat contract(const Vec& v) const {
    Mat out = Mat::Zero(dim(), dim());
    for (int j = 0; j < dim(); ++j) out += v(j) * slices_[j];
    return out;
  }

  Vec apply(const Vec& v, const Vec& w) const { return contract(v) * w; }

  /// Swaps the two lower indices.
  Tensor3 swapped() const {
    const int n = dim();
    Tensor3 out(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) out(i, j, k) = (*this)(i, k, j);
    return out;
  }

  double max_abs() const {
    double m = 0.0;
    for (const auto& s : slices_) m = std::max(m, s.cwiseAbs().maxCoeff());
    return m;
  }

  Tensor3 operator+(const Tensor3& o) const {
    Tensor3 out(*this);
    for (int j = 0; j < dim(); ++j) out.slices_[j] += o.slices_[j];
    return out;
  }
  Tensor3 operator-(const Tensor3& o) const {
    Tensor3 out(*this);
    for (int j = 0; j < dim(); ++j) out.slices_[j] -= o.slices_[j];
    return out;
  }
  Tensor3 operator*(double s) const {
    Tensor3 out(*this);
    for (auto& m : out.slices_) m *= s;
    return out;
  }

 private:
  std::vector<Mat> slices_;
};

/// Curvature components R^i_{jkl}; block(j, k) is the matrix w -> R(e_j, e_k) w.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(int n) : n_(n), blocks_(n * n, Mat::Zero(n, n)) {}

  int dim() const { return n_; }
  const Mat& block(int j, int k) const { return blocks_[j * n_ + k]; }
  Mat& block(int j, int k) { return blocks_[j * n_ + k]; }
  double operator()(int i, int j, int k, int l) const { return block(j, k)(i, l); }

  /// The endomorphism R(u, v).
  Mat endo(const Vec& u, const Vec& v) const {
    Mat out = Mat::Zero(n_, n_);
    for (int j = 0; j < n_; ++j)
      for (int k = 0; k < n_; ++k) out += (u(j) * v(k)) * block(j, k);
    return out;
  }

  Vec apply(const Vec& u, const Vec& v, const Vec& w) const { return endo(u, v) * w; }

  double max_abs() const {
    double m = 0.0;
    for (const auto& b : blocks_) m = std::max(m, b.cwiseAbs().maxCoeff());
    return m;
  }

 private:
  int n_ = 0;
  std::vector<Mat> blocks_;
};

struct Metric {
  Mat X;      // n x m
  Mat g;      // n x n
  Mat g_inv;  // X X^T
  Mat Y;      // m x n, X^T g
  Mat P_T;    // m x m, Y X
  Mat P_N;    // m x m, I - P_T
};

inline Metric metric_from_X(const Mat& x) {
  if (!x.allFinite() || min_singular_value(x) < 1e-8) {
    throw Error(Errc::DegenerateX, "X(x) is not surjective (smallest singular value < 1e-8)");
  }
  Metric m;
  m.X = x;
  m.g_inv = x * x.transpose();
  m.g_inv = 0.5 * (m.g_inv + m.g_inv.transpose());
  m.g = inverse_spd(m.g_inv);
  m.Y = x.transpose() * m.g;
  m.P_T = m.Y * x;
  m.P_N = Mat::Identity(x.cols(), x.cols()) - m.P_T;
  return m;
}

inline Metric induced_metric(const SdeSystem& sys, const Point& at) { return metric_from_X(sys.X_at(at)); }

inline Point moved(const Point& at, const Vec& y) { return Point{at.chart, y, at.anchor}; }

/// DX(x)(e_j) for j = 0..n-1.
inline std::vector<Mat> dX_slices(const SdeSystem& sys, const Point& at) {
  auto field = [&](const Vec& y) { return sys.X(at.chart, y); };
  std::vector<Mat> out;
  out.reserve(sys.dim);
  for (int j = 0; j < sys.dim; ++j) out.push_back(directional_derivative(field, at.x, unit_vector(sys.dim, j), sys.oracle));
  return out;
}

inline std::vector<Vec> dA_slices(const SdeSystem& sys, const Point& at) {
  auto field = [&](const Vec& y) { return sys.A(at.chart, y); };
  std::vector<Vec> out;
  out.reserve(sys.dim);
  for (int j = 0; j < sys.dim; ++j) out.push_back(directional_derivative(field, at.x, unit_vector(sys.dim, j), sys.oracle));
  return out;
}

/// LW Christoffel symbols from the derivative of X: Gamma(v, w) = -DX(v) Y w.
inline Tensor3 lw_christoffel_from(const std::vector<Mat>& dX, const Mat& Y) {
  const int n = static_cast<int>(dX.size());
  Tensor3 gamma(n);
  for (int j = 0; j < n; ++j) gamma.slice(j) = -dX[j] * Y;
  return gamma;
}

inline Tensor3 lw_christoffel(const SdeSystem& sys, const Point& at) {
  const Metric m = induced_metric(sys, at);
  return lw_christoffel_from(dX_slices(sys, at), m.Y);
}

/// Differentiates <Z, X^{e_i}> along v for a given orthonormal basis
/// (columns of q) of R^m, with Z constant in the chart.
inline Tensor3 lw_christoffel_orthobasis(const SdeSystem& sys, const Point& at, const Mat& q) {
  const Metric m = induced_metric(sys, at);
  auto field = [&](const Vec& y) {
    const Mat xy = sys.X(at.chart, y);
    const Mat gy = inverse_spd(Mat(xy * xy.transpose()));
    return Mat(q.transpose() * xy.transpose() * gy);
  };
  const Mat xq = m.X * q;
  Tensor3 gamma(sys.dim);
  for (int j = 0; j < sys.dim; ++j) {
    gamma.slice(j) = xq * directional_derivative(field, at.x, unit_vector(sys.dim, j), sys.oracle);
  }
  return gamma;
}

/// [U, V](x) = DV(x)(U(x)) - DU(x)(V(x)).
template <class U, class V>
Vec bracket(U&& u, V&& v, const Vec& x, const DerivOracle& oracle) {
  return Vec(directional_derivative(v, x, u(x), oracle) - directional_derivative(u, x, v(x), oracle));
}

/// Christoffel symbols from the bracket expression with non-constant
/// probe fields V(y) = v + mv (y - x), Z(y) = w + mz (y - x).
inline Tensor3 lw_christoffel_brackets(const SdeSystem& sys, const Point& at, const Mat& mv, const Mat& mz) {
  const Metric m = induced_metric(sys, at);
  const int n = sys.dim;
  Tensor3 gamma(n);
  for (int j = 0; j < n; ++j) {
    const Vec v = unit_vector(n, j);
    auto vf = [&](const Vec& y) { return Vec(v + mv * (y - at.x)); };
    std::vector<Vec> xv;  // [X^i, V](x0)
    for (int i = 0; i < sys.noise_dim; ++i) {
      auto xi = [&, i](const Vec& y) { return Vec(sys.X(at.chart, y).col(i)); };
      xv.push_back(bracket(xi, vf, at.x, sys.oracle));
    }
    for (int k = 0; k < n; ++k) {
      const Vec w = unit_vector(n, k);
      auto zf = [&](const Vec& y) { return Vec(w + mz * (y - at.x)); };
      const Vec coeff = m.Y * w;  // <X^i(x0), Z(x0)>
      Vec cov = bracket(vf, zf, at.x, sys.oracle);
      for (int i = 0; i < sys.noise_dim; ++i) cov += coeff(i) * xv[i];
      gamma.slice(j).col(k) = cov - mz * v;
    }
  }
  return gamma;
}

/// Adjoint connection: the lower indices swapped.
inline Tensor3 adjoint_christoffel(const Tensor3& lw) { return lw.swapped(); }

inline Tensor3 levi_civita_from(const Mat& g_inv, const std::vector<Mat>& dg) {
  const int n = static_cast<int>(dg.size());
  Tensor3 gamma(n);
  for (int j = 0; j < n; ++j) {
    for (int k = 0; k < n; ++k) {
      Vec lower(n);  // Gamma_{l jk} = (d_j g_{lk} + d_k g_{lj} - d_l g_{jk}) / 2
      for (int l = 0; l < n; ++l) lower(l) = 0.5 * (dg[j](l, k) + dg[k](l, j) - dg[l](j, k));
      gamma.slice(j).col(k) = g_inv * lower;
    }
  }
  return gamma;
}

/// Levi-Civita symbols with the derivatives of g taken by the oracle.
inline Tensor3 levi_civita_christoffel(const SdeSystem& sys, const Point& at) {
  const Metric m = induced_metric(sys, at);
  auto gfield = [&](const Vec& y) { return induced_metric(sys, moved(at, y)).g; };
  std::vector<Mat> dg;
  for (int j = 0; j < sys.dim; ++j) dg.push_back(directional_derivative(gfield, at.x, unit_vector(sys.dim, j), sys.oracle));
  return levi_civita_from(m.g_inv, dg);
}

/// Same symbols with Dg from the chain rule on DX: Dg = -g (DX X^T + X DX^T) g.
inline Tensor3 levi_civita_from_dX(const Metric& m, const std::vector<Mat>& dX) {
  std::vector<Mat> dg;
  for (const Mat& d : dX) dg.push_back(-m.g * (d * m.X.transpose() + m.X * d.transpose()) * m.g);
  return levi_civita_from(m.g_inv, dg);
}

/// nabla Z(v) = DZ(x)(v) + Gamma(v, Z(x)).
template <class F>
Vec covariant_derivative(const Tensor3& gamma, F&& z, const Vec& x, const Vec& v, const DerivOracle& oracle) {
  return Vec(directional_derivative(z, x, v, oracle) + gamma.apply(v, z(x)));
}

inline Tensor3 torsion(const Tensor3& gamma) { return gamma - gamma.swapped(); }

/// Torsion as X(x) dY(v1, v2) with dY differentiated by the oracle.
inline Tensor3 torsion_via_dY(const SdeSystem& sys, const Point& at) {
  const Metric m = induced_metric(sys, at);
  auto yfield = [&](const Vec& y) { return induced_metric(sys, moved(at, y)).Y; };
  std::vector<Mat> dY;
  for (int j = 0; j < sys.dim; ++j) dY.push_back(directional_derivative(yfield, at.x, unit_vector(sys.dim, j), sys.oracle));
  Tensor3 t(sys.dim);
  for (int j = 0; j < sys.dim; ++j)
    for (int k = 0; k < sys.dim; ++k) t.slice(j).col(k) = m.X * (dY[j].col(k) - dY[k].col(j));
  return t;
}

/// Torsion as -[Z^{v1}, Z^{v2}](x) with Z^v = X(.) Y(x) v.
inline Vec torsion_via_brackets(const SdeSystem& sys, const Point& at, const Vec& v1, const Vec& v2) {
  const Metric m = induced_metric(sys, at);
  const Vec e1 = m.Y * v1;
  const Vec e2 = m.Y * v2;
  auto z1 = [&](const Vec& y) { return Vec(sys.X(at.chart, y) * e1); };
  auto z2 = [&](const Vec& y) { return Vec(sys.X(at.chart, y) * e2); };
  return Vec(-bracket(z1, z2, at.x, sys.oracle));
}

using ChristoffelField = std::function<Tensor3(const Vec&)>;

/// Curvature by differentiating a Christoffel field (nested oracle).
inline Tensor4 curvature_from_christoffel(const ChristoffelField& field, const Vec& x, const DerivOracle& oracle) {
  const Tensor3 gamma = field(x);
  const int n = gamma.dim();
  const DerivOracle outer = oracle.nested();
  std::vector<Tensor3> d;
  for (int j = 0; j < n; ++j) d.push_back(directional_derivative(field, x, unit_vector(n, j), outer));
  Tensor4 r(n);
  for (int j = 0; j < n; ++j) {
    for (int k = 0; k < n; ++k) {
      r.block(j, k) = d[j].slice(k) - d[k].slice(j) + gamma.slice(j) * gamma.slice(k) - gamma.slice(k) * gamma.slice(j);
    }
  }
  return r;
}

inline ChristoffelField lw_field(const SdeSystem& sys, const Point& at) {
  return [&sys, at](const Vec& y) { return lw_christoffel(sys, moved(at, y)); };
}

inline ChristoffelField levi_civita_field(const SdeSystem& sys, const Point& at) {
  return [&sys, at](const Vec& y) { return levi_civita_christoffel(sys, moved(at, y)); };
}

/// N_u = DX(u) K: column i is the LW derivative of X^i along u.
inline Mat lw_dX(const std::vector<Mat>& dX, const Metric& m, const Vec& u) {
  Mat du = Mat::Zero(m.X.rows(), m.X.cols());
  for (std::size_t j = 0; j < dX.size(); ++j) du += u(static_cast<int>(j)) * dX[j];
  return du * m.P_N;
}

/// LW curvature as sum_i nabla_u X^i <nabla_v X^i, w> - nabla_v X^i <nabla_u X^i, w>.
inline Vec curvature_lw_direct(const std::vector<Mat>& dX, const Metric& m, const Vec& u, const Vec& v, const Vec& w) {
  const Mat nu = lw_dX(dX, m, u);
  const Mat nv = lw_dX(dX, m, v);
  return Vec(nu * (nv.transpose() * (m.g * w)) - nv * (nu.transpose() * (m.g * w)));
}

inline Vec curvature_lw_direct(const SdeSystem& sys, const Point& at, const Vec& u, const Vec& v, const Vec& w) {
  return curvature_lw_direct(dX_slices(sys, at), induced_metric(sys, at), u, v, w);
}

inline Tensor4 curvature_lw_direct_tensor(const std::vector<Mat>& dX, const Metric& m) {
  const int n = static_cast<int>(dX.size());
  std::vector<Mat> nmat;
  for (int j = 0; j < n; ++j) nmat.push_back(dX[j] * m.P_N);
  Tensor4 r(n);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < n; ++k)
      r.block(j, k) = (nmat[j] * nmat[k].transpose() - nmat[k] * nmat[j].transpose()) * m.g;
  return r;
}

/// <R(u,v)v, u> / (|u|^2 |v|^2 - <u,v>^2).
inline double sectional_curvature(const Tensor4& r, const Mat& g, const Vec& u, const Vec& v) {
  const double uu = u.dot(g * u);
  const double vv = v.dot(g * v);
  const double uv = u.dot(g * v);
  const double area = uu * vv - uv * uv;
  if (!(area > 0.0)) throw Error(Errc::ZeroVector, "sectional curvature needs independent vectors");
  return r.apply(u, v, v).dot(g * u) / area;
}

struct Ricci {
  Mat ric;    // Ric(v, w) = v^T ric w
  Mat sharp;  // <sharp v, w>_g = Ric(v, w)
};

/// Ric#(v) = sum_a R(v, f_a) f_a over a g-orthonormal frame.
inline Ricci ricci(const Tensor4& r, const Mat& g) {
  const int n = r.dim();
  const Mat frame = orthonormal_frame(g);
  Ricci out;
  out.sharp = Mat::Zero(n, n);
  for (int c = 0; c < n; ++c) {
    const Vec v = unit_vector(n, c);
    Vec acc = Vec::Zero(n);
    for (int a = 0; a < n; ++a) acc += r.apply(v, frame.col(a), frame.col(a));
    out.sharp.col(c) = acc;
  }
  out.ric = out.sharp.transpose() * g;
  return out;
}

/// Everything pointwise about the system at one point.
struct GeometryPoint {
  Point at;
  Metric metric;
  Vec A;
  std::vector<Mat> dX;
  std::vector<Vec> dA;
  Tensor3 lw;
  Tensor3 adjoint;
  Tensor3 lc;
};

inline GeometryPoint compute_geometry(const SdeSystem& sys, const Point& at) {
  GeometryPoint gp;
  gp.at = at;
  gp.metric = induced_metric(sys, at);
  gp.A = sys.A_at(at);
  gp.dX = dX_slices(sys, at);
  gp.dA = dA_slices(sys, at);
  gp.lw = lw_christoffel_from(gp.dX, gp.metric.Y);
  gp.adjoint = adjoint_christoffel(gp.lw);
  gp.lc = levi_civita_christoffel(sys, at);
  return gp;
}

/// Random affine probe field Z(y) = a + B (y - x).
struct AffineField {
  Vec offset;
  Vec a;
  Mat b;
  Vec operator()(const Vec& y) const { return Vec(a + b * (y - offset)); }
};

inline AffineField random_affine_field(Rng& rng, const Vec& x) {
  const int n = static_cast<int>(x.size());
  return AffineField{x, rng.normal_vec(n), rng.normal_mat(n, n)};
}

struct MetricityResult {
  double residual = 0.0;       // |d<Z,Z>(v) - 2 <nabla_v Z, Z>|
  double form_residual = 0.0;  // sum X^i <Z, nabla_v X^i> + nabla_v X^i <Z, X^i>
};

inline MetricityResult metricity_check(const SdeSystem& sys, const Point& at, const Tensor3& gamma, Rng& rng, int probes = 20) {
  const Metric m = induced_metric(sys, at);
  const std::vector<Mat> dX = dX_slices(sys, at);
  MetricityResult res;
  for (int p = 0; p < probes; ++p) {
    const AffineField z = random_affine_field(rng, at.x);
    const Vec v = rng.normal_vec(sys.dim);
    auto sq = [&](const Vec& y) {
      const Vec zy = z(y);
      Vec out(1);
      out(0) = zy.dot(induced_metric(sys, moved(at, y)).g * zy);
      return out;
    };
    const double lhs = directional_derivative(sq, at.x, v, sys.oracle)(0);
    const Vec cov = covariant_derivative(gamma, z, at.x, v, sys.oracle);
    const Vec zx = z(at.x);
    const double scale = std::max(1.0, zx.norm() * zx.norm() * v.norm());
    res.residual = std::max(res.residual, std::abs(lhs - 2.0 * cov.dot(m.g * zx)) / scale);
    Mat nv = Mat::Zero(sys.dim, sys.noise_dim);  // columns nabla_v X^i
    for (int j = 0; j < sys.dim; ++j) nv += v(j) * dX[j];
    nv += gamma.contract(v) * m.X;
    const Vec form = m.X * (nv.transpose() * (m.g * zx)) + nv * (m.X.transpose() * (m.g * zx));
    res.form_residual = std::max(res.form_residual, form.norm() / std::max(1.0, zx.norm() * v.norm()));
  }
  return res;
}

struct TssResult {
  bool is_tss = false;
  double torsion_residual = 0.0;   // max |<T(u,v),w> + <T(w,v),u>|
  double lc_residual = 0.0;        // max |nabla_v Z^w + nabla_w Z^v| (Levi-Civita)
  double identity_residual = 0.0;  // torsion form vs -(<w, nabla_u Z^v> + <u, nabla_w Z^v>)
};

inline constexpr double kTssTolerance = 1e-6;

inline TssResult tss_check(const SdeSystem& sys, const Point& at, Rng& rng, int probes = 10) {
  const Metric m = induced_metric(sys, at);
  const Tensor3 t = torsion(lw_christoffel(sys, at));
  const Tensor3 lc = levi_civita_christoffel(sys, at);
  auto zfield = [&](const Vec& v) {
    const Vec e = m.Y * v;
    return [&sys, at, e](const Vec& y) { return Vec(sys.X(at.chart, y) * e); };
  };
  TssResult res;
  for (int p = 0; p < probes; ++p) {
    const Vec u = rng.normal_vec(sys.dim);
    const Vec v = rng.normal_vec(sys.dim);
    const Vec w = rng.normal_vec(sys.dim);
    const double scale = std::max(1.0, u.norm() * v.norm() * w.norm());
    const double s = t.apply(u, v).dot(m.g * w) + t.apply(w, v).dot(m.g * u);
    res.torsion_residual = std::max(res.torsion_residual, std::abs(s) / scale);
    const Vec nuzv = covariant_derivative(lc, zfield(v), at.x, u, sys.oracle);
    const Vec nwzv = covariant_derivative(lc, zfield(v), at.x, w, sys.oracle);
    const double rhs = -(w.dot(m.g * nuzv) + u.dot(m.g * nwzv));
    res.identity_residual = std::max(res.identity_residual, std::abs(s - rhs) / scale);
    const Vec sym = covariant_derivative(lc, zfield(w), at.x, v, sys.oracle) +
                    covariant_derivative(lc, zfield(v), at.x, w, sys.oracle);
    res.lc_residual = std::max(res.lc_residual, sym.norm() / std::max(1.0, v.norm() * w.norm()));
  }
  res.is_tss = res.torsion_residual < kTssTolerance;
  return res;
}

struct LeviCivitaShiftResult {
  double residual = 0.0;      // nabla Z(v) - breve nabla Z(v) + T(v, Z) / 2
  double per_field = 0.0;     // max_i |nabla X^i(X^i)|
};

inline LeviCivitaShiftResult levi_civita_from_lw_check(const SdeSystem& sys, const Point& at, Rng& rng, int probes = 10) {
  const Tensor3 lw = lw_christoffel(sys, at);
  const Tensor3 lc = levi_civita_christoffel(sys, at);
  const Tensor3 t = torsion(lw);
  LeviCivitaShiftResult res;
  for (int p = 0; p < probes; ++p) {
    const AffineField z = random_affine_field(rng, at.x);
    const Vec v = rng.normal_vec(sys.dim);
    const Vec diff = covariant_derivative(lc, z, at.x, v, sys.oracle) - covariant_derivative(lw, z, at.x, v, sys.oracle) +
                     0.5 * t.apply(v, z(at.x));
    res.residual = std::max(res.residual, diff.norm() / std::max(1.0, z(at.x).norm() * v.norm()));
  }
  for (int i = 0; i < sys.noise_dim; ++i) {
    auto xi = [&, i](const Vec& y) { return Vec(sys.X(at.chart, y).col(i)); };
    res.per_field = std::max(res.per_field, covariant_derivative(lc, xi, at.x, xi(at.x), sys.oracle).norm());
  }
  return res;
}

struct StratonovichCorrection {
  Vec lw_term;  // sum_i breve nabla X^i (X^i)
  Vec lc_term;  // sum_i nabla X^i (X^i)
};

inline StratonovichCorrection stratonovich_correction(const SdeSystem& sys, const Point& at) {
  const Tensor3 lw = lw_christoffel(sys, at);
  const Tensor3 lc = levi_civita_christoffel(sys, at);
  StratonovichCorrection out{Vec::Zero(sys.dim), Vec::Zero(sys.dim)};
  for (int i = 0; i < sys.noise_dim; ++i) {
    auto xi = [&, i](const Vec& y) { return Vec(sys.X(at.chart, y).col(i)); };
    const Vec dir = xi(at.x);
    out.lw_term += covariant_derivative(lw, xi, at.x, dir, sys.oracle);
    out.lc_term += covariant_derivative(lc, xi, at.x, dir, sys.oracle);
  }
  return out;
}

/// Quadratic pieces of H_p at a point:
///   H_p(v, v) = v^T q v + (p - 2) sum_i (v^T b_i v)^2 / |v|^2,
/// with q holding 2<nabla A v, v> - <Ric# v, v> + sum |nabla X^i v|^2 and
/// b_i the symmetric form v -> <nabla X^i(v), v>.
struct HpForms {
  Mat g;
  Mat q;
  std::vector<Mat> b;
};

inline HpForms hp_forms(const Metric& m, const Vec& a, const std::vector<Mat>& dX, const std::vector<Vec>& dA,
                        const Tensor3& lw, const Ricci& ric) {
  const int n = static_cast<int>(m.g.rows());
  std::vector<Mat> nmat;  // N_j = DX(e_j) K
  for (int j = 0; j < n; ++j) nmat.push_back(dX[j] * m.P_N);
  Mat nabla_a(n, n);  // column k: breve nabla A (e_k)
  for (int k = 0; k < n; ++k) nabla_a.col(k) = dA[k] + lw.slice(k) * a;
  Mat q = 2.0 * m.g * nabla_a - m.g * ric.sharp;
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < n; ++k) q(j, k) += (nmat[j].transpose() * m.g * nmat[k]).trace();
  HpForms f;
  f.g = m.g;
  f.q = 0.5 * (q + q.transpose());
  for (int i = 0; i < static_cast<int>(m.X.cols()); ++i) {
    Mat b(n, n);
    for (int k = 0; k < n; ++k) b.col(k) = m.g * nmat[k].col(i);
    f.b.push_back(0.5 * (b + b.transpose()));
  }
  return f;
}

inline HpForms hp_forms(const SdeSystem& sys, const Point& at) {
  const Metric m = induced_metric(sys, at);
  const auto dX = dX_slices(sys, at);
  const Tensor3 lw = lw_christoffel_from(dX, m.Y);
  return hp_forms(m, sys.A_at(at), dX, dA_slices(sys, at), lw, ricci(curvature_lw_direct_tensor(dX, m), m.g));
}

inline double h_p(const HpForms& f, const Vec& v, double p) {
  const double vv = v.dot(f.g * v);
  if (!(vv > 0.0)) throw Error(Errc::ZeroVector, "H_p needs a nonzero vector");
  double out = v.dot(f.q * v);
  if (p != 2.0) {
    double s = 0.0;
    for (const Mat& b : f.b) {
      const double c = v.dot(b * v);
      s += c * c;
    }
    out += (p - 2.0) * s / vv;
  }
  return out;
}

inline double h_p(const SdeSystem& sys, const Point& at, const Vec& v, double p) { return h_p(hp_forms(sys, at), v, p); }

struct HpExtremes {
  double lower = 0.0;  // min over |v|_g = 1
  double upper = 0.0;  // max over |v|_g = 1
};

/// Extremes of H_p over the g-unit sphere. p = 2 is an eigenproblem, n = 2
/// an angle scan; otherwise projected gradient steps from 32 fixed random starts.
inline HpExtremes h_p_extremes(const HpForms& f, double p) {
  const int n = static_cast<int>(f.g.rows());
  const Mat frame = orthonormal_frame(f.g);
  const Mat q = frame.transpose() * f.q * frame;
  if (p == 2.0 || n == 1) {
    if (n == 1) {
      const double val = h_p(f, frame.col(0), p);
      return {val, val};
    }
    Eigen::SelfAdjointEigenSolver<Mat> es(q, Eigen::EigenvaluesOnly);
    return {es.eigenvalues()(0), es.eigenvalues()(n - 1)};
  }
  std::vector<Mat> b;
  for (const Mat& bi : f.b) b.push_back(frame.transpose() * bi * frame);
  auto value = [&](const Vec& y) {
    double s = y.dot(q * y);
    for (const Mat& bi : b) {
      const double c = y.dot(bi * y);
      s += (p - 2.0) * c * c;
    }
    return s;
  };
  if (n == 2) {
    // Degree-4 trigonometric polynomial in the angle: scan, then golden-section refine.
    auto at_angle = [&](double a) {
      Vec y(2);
      y << std::cos(a), std::sin(a);
      return value(y);
    };
    const int grid = 720;
    const double h = std::numbers::pi / grid;
    auto refine = [&](int best, double sign) {
      double lo = (best - 1) * h;
      double hi = (best + 1) * h;
      const double r = 0.5 * (std::sqrt(5.0) - 1.0);
      for (int it = 0; it < 60; ++it) {
        const double a = hi - r * (hi - lo);
        const double b = lo + r * (hi - lo);
        if (sign * at_angle(a) > sign * at_angle(b)) hi = b;
        else lo = a;
      }
      return at_angle(0.5 * (lo + hi));
    };
    int imax = 0;
    int imin = 0;
    std::vector<double> vals(grid);
    for (int i = 0; i < grid; ++i) {
      vals[i] = at_angle(i * h);
      if (vals[i] > vals[imax]) imax = i;
      if (vals[i] < vals[imin]) imin = i;
    }
    return {std::min(vals[imin], refine(imin, -1.0)), std::max(vals[imax], refine(imax, 1.0))};
  }
  auto gradient = [&](const Vec& y) {
    Vec gr = 2.0 * q * y;
    for (const Mat& bi : b) gr += (p - 2.0) * 4.0 * y.dot(bi * y) * (bi * y);
    return gr;
  };
  double scale = q.cwiseAbs().maxCoeff();
  for (const Mat& bi : b) scale += std::abs(p - 2.0) * 4.0 * bi.cwiseAbs().maxCoeff() * bi.cwiseAbs().maxCoeff();
  const double step = 0.25 / std::max(scale * n, 1e-12);
  Rng rng(0x5eed0f5a11ULL, 0);
  HpExtremes ext{1e300, -1e300};
  for (int start = 0; start < 32; ++start) {
    const Vec y0 = rng.normal_vec(n).normalized();
    for (double sign : {1.0, -1.0}) {
      Vec y = y0;
      double val = value(y);
      for (int it = 0; it < 20000; ++it) {
        Vec gr = gradient(y);
        gr -= gr.dot(y) * y;
        const Vec next = (y + sign * step * gr).normalized();
        const double nv = value(next);
        const bool done = std::abs(nv - val) < 1e-15 * std::max(1.0, std::abs(val)) || gr.norm() < 1e-10;
        y = next;
        val = nv;
        if (done) break;
      }
      if (sign > 0) ext.upper = std::max(ext.upper, val);
      else ext.lower = std::min(ext.lower, val);
    }
  }
  return ext;
}

inline HpExtremes h_p_extremes(const SdeSystem& sys, const Point& at, double p) { return h_p_extremes(hp_forms(sys, at), p); }

/// Matrix field y -> (nabla^ phi)_{jk} = d_j phi_k - phi(Gamma^(e_j, e_k)).
inline std::function<Mat(const Vec&)> adjoint_covariant_form(const SdeSystem& sys, const Point& at, const FormField& phi) {
  return [&sys, at, phi](const Vec& y) {
    const int n = sys.dim;
    const Tensor3 adj = adjoint_christoffel(lw_christoffel(sys, moved(at, y)));
    const Vec py = phi(y);
    Mat b(n, n);
    for (int j = 0; j < n; ++j) {
      const Vec dj = directional_derivative(phi, y, unit_vector(n, j), sys.oracle);
      for (int k = 0; k < n; ++k) b(j, k) = dj(k) - py.dot(adj.slice(j).col(k));
    }
    return b;
  };
}

/// L_A phi (v) = D phi(A) . v + phi(DA(v)).
inline double lie_derivative_drift(const SdeSystem& sys, const Point& at, const FormField& phi, const Vec& v) {
  auto afield = [&](const Vec& y) { return sys.A(at.chart, y); };
  const Vec a = afield(at.x);
  return directional_derivative(phi, at.x, a, sys.oracle).dot(v) +
         phi(at.x).dot(directional_derivative(afield, at.x, v, sys.oracle));
}

/// (A^1 phi)(v) = 1/2 trace nabla^2 phi (v) - 1/2 phi(Ric# v) + L_A phi (v), adjoint
/// connection at both levels, LW Ricci operator.
inline double weitzenbock_rhs_1form(const SdeSystem& sys, const Point& at, const FormField& phi, const Vec& v) {
  const int n = sys.dim;
  const Metric m = induced_metric(sys, at);
  const auto dX = dX_slices(sys, at);
  const Tensor3 adj = adjoint_christoffel(lw_christoffel_from(dX, m.Y));
  const auto bfield = adjoint_covariant_form(sys, at, phi);
  const Mat b = bfield(at.x);
  const Mat frame = orthonormal_frame(m.g);
  const DerivOracle outer = sys.oracle.nested();
  double trace = 0.0;
  for (int a = 0; a < n; ++a) {
    const Vec f = frame.col(a);
    const Mat db = directional_derivative(bfield, at.x, f, outer);
    // nabla^2 phi (f, f)(v) = D B(f)(f, v) - B(Gamma^(f, f), v) - B(f, Gamma^(f, v))
    trace += f.dot(db * v) - adj.apply(f, f).dot(b * v) - f.dot(b * adj.apply(f, v));
  }
  const Ricci ric = ricci(curvature_lw_direct_tensor(dX, m), m.g);
  return 0.5 * trace - 0.5 * phi(at.x).dot(ric.sharp * v) + lie_derivative_drift(sys, at, phi, v);
}

/// bar delta phi = -sum_i (nabla^ phi (X^i))(X^i).
inline double bar_delta(const SdeSystem& sys, const Point& at, const FormField& phi) {
  const Mat b = adjoint_covariant_form(sys, at, phi)(at.x);
  const Mat x = sys.X_at(at);
  return -(x.transpose() * b * x).trace();
}

/// Same quantity as -sum_i (L_{X^i} phi)(X^i) = -sum_i X^i (phi(X^i)).
inline double bar_delta_lie(const SdeSystem& sys, const Point& at, const FormField& phi) {
  double s = 0.0;
  for (int i = 0; i < sys.noise_dim; ++i) {
    auto pairing = [&, i](const Vec& y) {
      Vec out(1);
      out(0) = phi(y).dot(sys.X(at.chart, y).col(i));
      return out;
    };
    s += directional_derivative(pairing, at.x, sys.X_at(at).col(i), sys.oracle)(0);
  }
  return -s;
}

/// -1/2 (bar delta d + d bar delta) phi (v) + L_A phi (v).
inline double hodge_rhs_1form(const SdeSystem& sys, const Point& at, const FormField& phi, const Vec& v) {
  const int n = sys.dim;
  const DerivOracle outer = sys.oracle.nested();
  auto delta_field = [&](const Vec& y) {
    Vec out(1);
    out(0) = bar_delta(sys, moved(at, y), phi);
    return out;
  };
  const double d_delta = directional_derivative(delta_field, at.x, v, outer)(0);
  // C_{jk} = d_j phi_k - d_k phi_j
  auto cfield = [&](const Vec& y) {
    Mat d(n, n);
    for (int j = 0; j < n; ++j) d.row(j) = directional_derivative(phi, y, unit_vector(n, j), sys.oracle).transpose();
    return Mat(d - d.transpose());
  };
  const Mat c = cfield(at.x);
  const Tensor3 adj = adjoint_christoffel(lw_christoffel(sys, at));
  const Mat x = sys.X_at(at);
  double delta_d = 0.0;
  for (int i = 0; i < sys.noise_dim; ++i) {
    const Vec z = x.col(i);
    const Mat dc = directional_derivative(cfield, at.x, z, outer);
    // (nabla^_z C)(z, v) = DC(z)(z, v) - C(Gamma^(z, z), v) - C(z, Gamma^(z, v))
    delta_d -= z.dot(dc * v) - adj.apply(z, z).dot(c * v) - z.dot(c * adj.apply(z, v));
  }
  return -0.5 * (delta_d + d_delta) + lie_derivative_drift(sys, at, phi, v);
}

/// Generator with the LW connection: 1/2 trace breve nabla grad f + <A, grad f>.
inline double generator_lw(const SdeSystem& sys, const Point& at, const ScalarField& f) {
  const Metric m = induced_metric(sys, at);
  const int n = sys.dim;
  auto grad = [&](const Vec& y) {
    Vec df(n);
    auto fv = [&](const Vec& z) {
      Vec o(1);
      o(0) = f(z);
      return o;
    };
    for (int j = 0; j < n; ++j) df(j) = directional_derivative(fv, y, unit_vector(n, j), sys.oracle)(0);
    return Vec(induced_metric(sys, moved(at, y)).g_inv * df);
  };
  const Tensor3 lw = lw_christoffel(sys, at);
  const Mat frame = orthonormal_frame(m.g);
  const DerivOracle outer = sys.oracle.nested();
  double trace = 0.0;
  for (int a = 0; a < n; ++a) trace += covariant_derivative(lw, grad, at.x, frame.col(a), outer).dot(m.g * frame.col(a));
  return 0.5 * trace + sys.A_at(at).dot(m.g * grad(at.x));
}

/// Generator in Levi-Civita form: 1/2 Delta f + <1/2 sum nabla X^i(X^i) + A, grad f>.
inline double generator_lc(const SdeSystem& sys, const Point& at, const ScalarField& f) {
  const Metric m = induced_metric(sys, at);
  const int n = sys.dim;
  auto grad = [&](const Vec& y) {
    Vec df(n);
    auto fv = [&](const Vec& z) {
      Vec o(1);
      o(0) = f(z);
      return o;
    };
    for (int j = 0; j < n; ++j) df(j) = directional_derivative(fv, y, unit_vector(n, j), sys.oracle)(0);
    return Vec(induced_metric(sys, moved(at, y)).g_inv * df);
  };
  const Tensor3 lc = levi_civita_christoffel(sys, at);
  const Mat frame = orthonormal_frame(m.g);
  const DerivOracle outer = sys.oracle.nested();
  double laplacian = 0.0;
  for (int a = 0; a < n; ++a) laplacian += covariant_derivative(lc, grad, at.x, frame.col(a), outer).dot(m.g * frame.col(a));
  const Vec drift = 0.5 * stratonovich_correction(sys, at).lc_term + sys.A_at(at);
  return 0.5 * laplacian + drift.dot(m.g * grad(at.x));
}

/// Hoermander form 1/2 sum X^i (X^i f) + A f, used as an independent reference.
inline double generator_hoermander(const SdeSystem& sys, const Point& at, const ScalarField& f) {
  auto fv = [&](const Vec& z) {
    Vec o(1);
    o(0) = f(z);
    return o;
  };
  double s = 0.0;
  const DerivOracle outer = sys.oracle.nested();
  for (int i = 0; i < sys.noise_dim; ++i) {
    auto xif = [&, i](const Vec& y) {
      Vec o(1);
      o(0) = directional_derivative(fv, y, Vec(sys.X(at.chart, y).col(i)), sys.oracle)(0);
      return o;
    };
    s += directional_derivative(xif, at.x, Vec(sys.X_at(at).col(i)), outer)(0);
  }
  return 0.5 * s + directional_derivative(fv, at.x, sys.A_at(at), sys.oracle)(0);
}

}  // namespace sdegeom
