#pragma once

// Non-degenerate Stratonovich SDEs  dx = X(x) o dB + A(x) dt  on a chart atlas,
// plus the built-in scenario registry.

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sdegeom/error.hpp"
#include "sdegeom/expr.hpp"
#include "sdegeom/numeric.hpp"

namespace sdegeom {

/// A point of M in chart coordinates. `anchor` parameterises chart
/// families (the unit-quaternion centre of an SO(3) exponential chart) and
/// is empty for ordinary atlases.
struct Point {
  int chart = 0;
  Vec x;
  Vec anchor;
};

struct Chart {
  std::string id;
  std::function<bool(const Vec&)> in_domain;
};

/// Result of a chart switch: the same manifold point in the new chart and
/// the Jacobian of the coordinate change at that point.
struct ChartChange {
  Point point;
  Mat jacobian;
};

class SdeSystem {
 public:
  using MatField = std::function<Mat(int chart, const Vec& x)>;
  using VecField = std::function<Vec(int chart, const Vec& x)>;

  std::string name;
  int dim = 0;        // n
  int noise_dim = 0;  // m
  std::vector<Chart> charts;
  MatField X;  // n x m in chart coordinates
  VecField A;  // n-vector in chart coordinates
  DerivOracle oracle;

  bool compact = false;
  double guard_radius = 1e6;

  /// Atlas policy: returns a change of chart when the point should leave
  /// its current chart. Empty for single-chart systems.
  std::function<std::optional<ChartChange>(const Point&)> recharting;
  /// Explicit coordinate change; nullopt outside the overlap.
  std::function<std::optional<Point>(const Point&, int to)> transition_map;

  /// Canonical embedding into R^D (identity for Euclidean scenarios).
  int embed_dim = 0;
  std::function<Vec(const Point&)> embed;
  std::function<Mat(const Point&)> embed_jacobian;  // D x n; optional
  std::function<Point(const Vec&)> locate;          // inverse of embed; optional

  /// Replaces the chart Heun stepper for the position (group scenarios).
  /// Returns coordinates in the same chart and anchor.
  std::function<Vec(const Point&, const Vec& dB, double dt)> group_step;

  Mat X_at(const Point& p) const { return X(p.chart, p.x); }
  Vec A_at(const Point& p) const { return A(p.chart, p.x); }

  int chart_index(std::string_view id) const {
    for (std::size_t i = 0; i < charts.size(); ++i) {
      if (charts[i].id == id) return static_cast<int>(i);
    }
    throw Error(Errc::BadParams, "unknown chart '" + std::string(id) + "' for scenario " + name);
  }

  bool in_domain(const Point& p) const {
    if (p.chart < 0 || p.chart >= static_cast<int>(charts.size())) return false;
    if (!p.x.allFinite()) return false;
    return charts[p.chart].in_domain(p.x);
  }

  Vec embedded(const Point& p) const { return embed ? embed(p) : p.x; }

  Mat embedded_jacobian(const Point& p) const {
    if (embed_jacobian) return embed_jacobian(p);
    if (!embed) return Mat::Identity(dim, dim);
    auto f = [&](const Vec& y) { return embed(Point{p.chart, y, p.anchor}); };
    return jacobian(f, p.x, oracle);
  }

  /// A point built from chart coordinates with the default anchor.
  Point point(int chart, const Vec& x) const {
    Point p{chart, x, {}};
    if (default_anchor.size() > 0) p.anchor = default_anchor;
    return p;
  }

  Vec default_anchor;
};

struct ReferenceData {
  std::optional<double> sectional_curvature;  // analytic
  std::optional<double> ricci_factor;         // Ric = factor * g, analytic
  std::optional<bool> lw_equals_lc;
  std::optional<bool> torsion_skew_symmetric;
  std::optional<bool> lw_flat;
  std::string notes;
};

struct Scenario {
  std::string name;
  nlohmann::json params;
  SdeSystem system;
  ReferenceData reference;
};

namespace detail {

inline Mat hat(const Vec& w) {
  Mat m(3, 3);
  m << 0.0, -w(2), w(1), w(2), 0.0, -w(0), -w(1), w(0), 0.0;
  return m;
}

/// Inverse right Jacobian of SO(3): left-invariant fields in an exponential chart.
inline Mat so3_right_jacobian_inv(const Vec& w) {
  const double th = w.norm();
  const Mat wh = hat(w);
  double c;
  if (th < 1e-3) {
    const double t2 = th * th;
    c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  } else {
    c = 1.0 / (th * th) - (1.0 + std::cos(th)) / (2.0 * th * std::sin(th));
  }
  return Mat::Identity(3, 3) + 0.5 * wh + c * wh * wh;
}

inline Mat so3_right_jacobian(const Vec& w) {
  const double th = w.norm();
  const Mat wh = hat(w);
  double a;
  double b;
  if (th < 1e-3) {
    const double t2 = th * th;
    a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
  } else {
    a = (1.0 - std::cos(th)) / (th * th);
    b = (th - std::sin(th)) / (th * th * th);
  }
  return Mat::Identity(3, 3) - a * wh + b * wh * wh;
}

inline Eigen::Quaterniond quat_exp(const Vec& w) {
  const double th = w.norm();
  if (th == 0.0) return Eigen::Quaterniond::Identity();
  return Eigen::Quaterniond(Eigen::AngleAxisd(th, Eigen::Vector3d(w(0), w(1), w(2)) / th));
}

inline Vec quat_log(Eigen::Quaterniond q) {
  if (q.w() < 0.0) q.coeffs() *= -1.0;
  const Eigen::Vector3d v = q.vec();
  const double s = v.norm();
  Vec out(3);
  if (s < 1e-12) {
    out << 2.0 * v(0), 2.0 * v(1), 2.0 * v(2);
    return out;
  }
  const double th = 2.0 * std::atan2(s, q.w());
  out << v(0) / s * th, v(1) / s * th, v(2) / s * th;
  return out;
}

inline Eigen::Quaterniond anchor_quat(const Vec& a) {
  return Eigen::Quaterniond(a(0), a(1), a(2), a(3)).normalized();
}

inline Vec anchor_vec(const Eigen::Quaterniond& q) {
  Vec a(4);
  a << q.w(), q.x(), q.y(), q.z();
  return a;
}

inline int param_int(const nlohmann::json& p, const char* key, int fallback) {
  if (!p.contains(key)) return fallback;
  if (!p[key].is_number_integer()) throw Error(Errc::BadParams, std::string(key) + " must be an integer");
  return p[key].get<int>();
}

inline double param_double(const nlohmann::json& p, const char* key, double fallback) {
  if (!p.contains(key)) return fallback;
  if (!p[key].is_number()) throw Error(Errc::BadParams, std::string(key) + " must be a number");
  return p[key].get<double>();
}

inline void reject_unknown(const nlohmann::json& p, std::initializer_list<const char*> allowed) {
  for (auto it = p.begin(); it != p.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw Error(Errc::BadParams, "unknown parameter '" + it.key() + "'");
  }
}

inline std::function<bool(const Vec&)> ball(double radius) {
  return [radius](const Vec& x) { return x.norm() < radius; };
}

inline Scenario make_flat(const nlohmann::json& p) {
  reject_unknown(p, {"n", "ou", "guard_radius"});
  const int n = param_int(p, "n", 2);
  const double ou = param_double(p, "ou", 0.0);
  if (n < 1 || n > kMaxDim) throw Error(Errc::BadParams, "flat: n out of range");
  Scenario sc;
  sc.name = "flat";
  sc.params = p;
  auto& s = sc.system;
  s.name = "flat";
  s.dim = n;
  s.noise_dim = n;
  s.guard_radius = param_double(p, "guard_radius", 1e6);
  if (!(s.guard_radius > 0.0)) throw Error(Errc::BadParams, "guard_radius must be positive");
  s.charts = {Chart{"R^n", ball(s.guard_radius)}};
  s.X = [n](int, const Vec&) { return Mat(Mat::Identity(n, n)); };
  s.A = [ou](int, const Vec& x) { return Vec(-ou * x); };
  s.embed_dim = n;
  sc.reference.sectional_curvature = 0.0;
  sc.reference.ricci_factor = 0.0;
  sc.reference.lw_equals_lc = true;
  sc.reference.torsion_skew_symmetric = true;
  sc.reference.lw_flat = true;
  sc.reference.notes = "all tensors vanish identically (analytic)";
  return sc;
}

/// Stereographic chart of S^n centred at the north (sign=+1) or south
/// (sign=-1) pole: u = 0 is that pole.
inline Vec sphere_embed(const Vec& u, double sign) {
  const int n = static_cast<int>(u.size());
  const double s = u.squaredNorm();
  Vec y(n + 1);
  y.head(n) = 2.0 * u / (1.0 + s);
  y(n) = sign * (1.0 - s) / (1.0 + s);
  return y;
}

inline Mat sphere_embed_jacobian(const Vec& u, double sign) {
  const int n = static_cast<int>(u.size());
  const double s = u.squaredNorm();
  const double d = 1.0 + s;
  Mat e(n + 1, n);
  e.topRows(n) = (2.0 / d) * Mat::Identity(n, n) - (4.0 / (d * d)) * u * u.transpose();
  e.row(n) = (-sign * 4.0 / (d * d)) * u.transpose();
  return e;
}

inline Scenario make_sphere(const nlohmann::json& p) {
  reject_unknown(p, {"n"});
  const int n = param_int(p, "n", 2);
  if (n < 1 || n + 1 > kMaxDim) throw Error(Errc::BadParams, "sphere-gradient: n out of range");
  Scenario sc;
  sc.name = "sphere-gradient";
  sc.params = p;
  auto& s = sc.system;
  s.name = "sphere-gradient";
  s.dim = n;
  s.noise_dim = n + 1;
  s.compact = true;
  auto sign_of = [](int chart) { return chart == 0 ? 1.0 : -1.0; };
  auto domain = [](const Vec& u) { return u.norm() <= 10.0; };
  s.charts = {Chart{"north", domain}, Chart{"south", domain}};
  // Orthogonal projection onto T_xS^n in chart components: with E the
  // embedding Jacobian, E^T E = lambda^2 I and X = E^T / lambda^2.
  s.X = [sign_of](int chart, const Vec& u) {
    const double s2 = u.squaredNorm();
    return Mat(sphere_embed_jacobian(u, sign_of(chart)).transpose() * ((1.0 + s2) * (1.0 + s2) / 4.0));
  };
  s.A = [n](int, const Vec&) { return Vec(Vec::Zero(n)); };
  s.embed_dim = n + 1;
  s.embed = [sign_of](const Point& q) { return sphere_embed(q.x, sign_of(q.chart)); };
  s.embed_jacobian = [sign_of](const Point& q) { return sphere_embed_jacobian(q.x, sign_of(q.chart)); };
  s.locate = [n](const Vec& y) {
    const double norm = y.norm();
    if (static_cast<int>(y.size()) != n + 1 || !(norm > 0.0)) {
      throw Error(Errc::BadParams, "embedded point has wrong dimension or is zero");
    }
    const Vec z = y / norm;
    if (z(n) >= 0.0) return Point{0, Vec(z.head(n) / (1.0 + z(n))), {}};
    return Point{1, Vec(z.head(n) / (1.0 - z(n))), {}};
  };
  s.transition_map = [](const Point& q, int to) -> std::optional<Point> {
    if (to == q.chart) return q;
    if (to < 0 || to > 1) return std::nullopt;
    const double s2 = q.x.squaredNorm();
    if (s2 < 1e-2 || s2 > 1e2) return std::nullopt;  // overlap 0.1 <= |u| <= 10
    return Point{to, Vec(q.x / s2), {}};
  };
  s.recharting = [](const Point& q) -> std::optional<ChartChange> {
    const double s2 = q.x.squaredNorm();
    if (s2 <= 4.0) return std::nullopt;
    const int n_ = static_cast<int>(q.x.size());
    Mat jac = (Mat::Identity(n_, n_) * s2 - 2.0 * q.x * q.x.transpose()) / (s2 * s2);
    return ChartChange{Point{1 - q.chart, Vec(q.x / s2), {}}, jac};
  };
  sc.reference.sectional_curvature = 1.0;
  sc.reference.ricci_factor = n - 1.0;
  sc.reference.lw_equals_lc = true;
  sc.reference.torsion_skew_symmetric = true;
  sc.reference.lw_flat = n == 1;
  sc.reference.notes =
      "gradient system of the unit sphere: LW = Levi-Civita, K = 1, Ric = (n-1)g (analytic)";
  return sc;
}

inline Scenario make_so3(const nlohmann::json& p) {
  reject_unknown(p, {});
  Scenario sc;
  sc.name = "so3-left-invariant";
  sc.params = p;
  auto& s = sc.system;
  s.name = "so3-left-invariant";
  s.dim = 3;
  s.noise_dim = 3;
  s.compact = true;
  s.charts = {Chart{"exp", [](const Vec& w) { return w.norm() < 2.0; }}};
  s.default_anchor = anchor_vec(Eigen::Quaterniond::Identity());
  // Chart: w -> anchor * exp(hat w). Left translates of the basis e_i are
  // the columns of the inverse right Jacobian, independent of the anchor.
  s.X = [](int, const Vec& w) { return so3_right_jacobian_inv(w); };
  s.A = [](int, const Vec&) { return Vec(Vec::Zero(3)); };
  s.embed_dim = 9;
  s.embed = [](const Point& q) {
    const Eigen::Matrix3d r = (anchor_quat(q.anchor) * quat_exp(q.x)).toRotationMatrix();
    Vec y(9);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) y(3 * i + j) = r(i, j);
    return y;
  };
  s.embed_jacobian = [](const Point& q) {
    const Eigen::Matrix3d r = (anchor_quat(q.anchor) * quat_exp(q.x)).toRotationMatrix();
    const Mat jr = so3_right_jacobian(q.x);
    Mat e(9, 3);
    for (int j = 0; j < 3; ++j) {
      const Mat h = hat(Vec(jr.col(j)));
      Eigen::Matrix3d hm;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) hm(a, b) = h(a, b);
      const Eigen::Matrix3d d = r * hm;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) e(3 * a + b, j) = d(a, b);
    }
    return e;
  };
  s.locate = [](const Vec& y) {
    if (y.size() != 9) throw Error(Errc::BadParams, "SO(3) embedding has 9 entries");
    Eigen::Matrix3d r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = y(3 * i + j);
    return Point{0, Vec(Vec::Zero(3)), anchor_vec(Eigen::Quaterniond(r).normalized())};
  };
  s.transition_map = [](const Point& q, int to) -> std::optional<Point> {
    if (to != 0) return std::nullopt;
    return q;
  };
  s.recharting = [](const Point& q) -> std::optional<ChartChange> {
    if (q.x.norm() <= 0.5) return std::nullopt;
    const Eigen::Quaterniond centre = anchor_quat(q.anchor) * quat_exp(q.x);
    return ChartChange{Point{0, Vec(Vec::Zero(3)), anchor_vec(centre)}, so3_right_jacobian(q.x)};
  };
  // Exponential-map integrator: g_{k+1} = g_k exp(dB), expressed in the current chart.
  s.group_step = [](const Point& q, const Vec& dB, double) {
    return quat_log(quat_exp(q.x) * quat_exp(dB));
  };
  sc.reference.lw_equals_lc = false;
  sc.reference.torsion_skew_symmetric = true;
  sc.reference.lw_flat = true;
  sc.reference.notes =
      "left-invariant system on SO(3) with bi-invariant metric: LW connection is the flat "
      "left-invariant connection, torsion -ad (analytic)";
  return sc;
}

inline Scenario make_twisted_plane(const nlohmann::json& p) {
  reject_unknown(p, {"alpha", "guard_radius"});
  const double alpha = param_double(p, "alpha", 1.0);
  Scenario sc;
  sc.name = "twisted-plane";
  sc.params = p;
  auto& s = sc.system;
  s.name = "twisted-plane";
  s.dim = 2;
  s.noise_dim = 2;
  s.guard_radius = param_double(p, "guard_radius", 1e6);
  if (!(s.guard_radius > 0.0)) throw Error(Errc::BadParams, "guard_radius must be positive");
  s.charts = {Chart{"plane", ball(s.guard_radius)}};
  s.X = [alpha](int, const Vec& x) {
    const double c = std::cos(alpha * x(0));
    const double sn = std::sin(alpha * x(0));
    Mat r(2, 2);
    r << c, -sn, sn, c;
    return r;
  };
  s.A = [](int, const Vec&) { return Vec(Vec::Zero(2)); };
  s.embed_dim = 2;
  sc.reference.lw_equals_lc = alpha == 0.0;
  sc.reference.torsion_skew_symmetric = alpha == 0.0;
  sc.reference.lw_flat = true;
  sc.reference.sectional_curvature = 0.0;
  sc.reference.notes = "Euclidean metric; LW Christoffels constant -alpha*J in the first slot (derived)";
  return sc;
}

inline Scenario make_circle(const nlohmann::json& p) {
  reject_unknown(p, {});
  Scenario sc;
  sc.name = "circle";
  sc.params = p;
  auto& s = sc.system;
  s.name = "circle";
  s.dim = 1;
  s.noise_dim = 1;
  s.compact = true;
  s.charts = {Chart{"theta", [](const Vec& x) { return std::abs(x(0)) < 1e6; }}};
  s.X = [](int, const Vec&) { return Mat(Mat::Identity(1, 1)); };
  s.A = [](int, const Vec&) { return Vec(Vec::Zero(1)); };
  s.embed_dim = 2;
  s.embed = [](const Point& q) {
    Vec y(2);
    y << std::cos(q.x(0)), std::sin(q.x(0));
    return y;
  };
  s.embed_jacobian = [](const Point& q) {
    Mat e(2, 1);
    e << -std::sin(q.x(0)), std::cos(q.x(0));
    return e;
  };
  s.locate = [](const Vec& y) {
    Vec th(1);
    th << std::atan2(y(1), y(0));
    return Point{0, th, {}};
  };
  sc.reference.sectional_curvature = 0.0;
  sc.reference.ricci_factor = 0.0;
  sc.reference.lw_equals_lc = true;
  sc.reference.torsion_skew_symmetric = true;
  sc.reference.lw_flat = true;
  sc.reference.notes = "unit circle, X = d/dtheta; dimension 1";
  return sc;
}

inline Scenario make_custom(const nlohmann::json& p) {
  reject_unknown(p, {"n", "m", "X", "A", "guard_radius"});
  if (!p.contains("n") || !p.contains("X")) throw Error(Errc::BadParams, "custom: n and X are required");
  const int n = param_int(p, "n", 0);
  if (n < 1 || n > kMaxDim) throw Error(Errc::BadParams, "custom: n out of range");
  std::vector<std::vector<std::string>> rows;
  try {
    rows = p.at("X").get<std::vector<std::vector<std::string>>>();
  } catch (const nlohmann::json::exception&) {
    throw Error(Errc::BadParams, "custom: X must be an array of arrays of strings");
  }
  if (static_cast<int>(rows.size()) != n) throw Error(Errc::BadParams, "custom: X must have n rows");
  const int m = param_int(p, "m", rows.empty() ? 0 : static_cast<int>(rows.front().size()));
  if (m < n || m > kMaxDim) throw Error(Errc::BadParams, "custom: need n <= m <= 16");
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != m) throw Error(Errc::BadParams, "custom: X rows must have m entries");
  }
  std::vector<std::string> drift(n, "0");
  if (p.contains("A")) {
    try {
      drift = p.at("A").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception&) {
      throw Error(Errc::BadParams, "custom: A must be an array of strings");
    }
    if (static_cast<int>(drift.size()) != n) throw Error(Errc::BadParams, "custom: A must have n entries");
  }
  auto xm = expr::ExprMatrix::parse_rows(rows, n);
  auto av = expr::ExprVector::parse_all(drift, n);
  Scenario sc;
  sc.name = "custom";
  sc.params = p;
  auto& s = sc.system;
  s.name = "custom";
  s.dim = n;
  s.noise_dim = m;
  s.guard_radius = param_double(p, "guard_radius", 1e6);
  if (!(s.guard_radius > 0.0)) throw Error(Errc::BadParams, "guard_radius must be positive");
  s.charts = {Chart{"R^n", ball(s.guard_radius)}};
  s.X = [xm](int, const Vec& x) { return xm(x); };
  s.A = [av](int, const Vec& x) { return av(x); };
  s.embed_dim = n;
  sc.reference.notes = "expression-defined; no analytic reference data";
  return sc;
}

}  // namespace detail

/// Rejects systems whose X(x) is (numerically) not surjective.
inline void check_nondegenerate(const SdeSystem& sys, const Point& p) {
  const Mat x = sys.X_at(p);
  if (x.rows() != sys.dim || x.cols() != sys.noise_dim) {
    throw Error(Errc::BadParams, "X has shape " + std::to_string(x.rows()) + "x" +
                                     std::to_string(x.cols()) + ", expected n x m");
  }
  if (!x.allFinite() || min_singular_value(x) < 1e-8) {
    throw Error(Errc::DegenerateX, "X(x) is not surjective at the probed point");
  }
}

inline Scenario build_scenario(const std::string& name, const nlohmann::json& params = nlohmann::json::object()) {
  const nlohmann::json p = params.is_null() ? nlohmann::json::object() : params;
  if (!p.is_object()) throw Error(Errc::BadParams, "params must be an object");
  Scenario sc;
  if (name == "flat") sc = detail::make_flat(p);
  else if (name == "sphere-gradient") sc = detail::make_sphere(p);
  else if (name == "so3-left-invariant") sc = detail::make_so3(p);
  else if (name == "twisted-plane") sc = detail::make_twisted_plane(p);
  else if (name == "circle") sc = detail::make_circle(p);
  else if (name == "custom") sc = detail::make_custom(p);
  else throw Error(Errc::UnknownScenario, "no scenario named '" + name + "'");
  auto& s = sc.system;
  if (!s.embed_dim) s.embed_dim = s.dim;
  for (std::size_t c = 0; c < s.charts.size(); ++c) {
    check_nondegenerate(s, s.point(static_cast<int>(c), Vec::Zero(s.dim)));
  }
  return sc;
}

/// Coordinates of the same manifold point in chart `to`.
inline Point transition(const SdeSystem& sys, const Point& p, int to) {
  if (to == p.chart) return p;
  std::optional<Point> q = sys.transition_map ? sys.transition_map(p, to) : std::nullopt;
  if (!q) throw Error(Errc::OutOfOverlap, "point is outside the overlap of the requested charts");
  return *q;
}

/// Jacobian of the coordinate change at p (pushes tangent vectors).
inline Mat transition_jacobian(const SdeSystem& sys, const Point& p, int to) {
  auto f = [&](const Vec& y) { return transition(sys, Point{p.chart, y, p.anchor}, to).x; };
  return jacobian(f, p.x, sys.oracle);
}

}  // namespace sdegeom
