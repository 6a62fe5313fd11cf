#pragma once

// Batch front end: configuration loading, the four commands and their
// JSON reports. Kept in a header so the tests drive the same code paths as
// the binary without spawning it.
//
// Report numbers that are results come wrapped as
//   {"value": ..., "tolerance": ..., "provenance": ...}
// (checks carry the same information as named fields). Configuration
// echoes, counts and verdicts are inputs or exact and stay bare.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdegeom/error.hpp"
#include "sdegeom/estimators.hpp"
#include "sdegeom/geometry.hpp"
#include "sdegeom/model.hpp"
#include "sdegeom/random.hpp"
#include "sdegeom/schema.hpp"
#include "sdegeom/schema_text.hpp"
#include "sdegeom/stochastics.hpp"

namespace sdegeom::cli {

using ojson = nlohmann::ordered_json;

enum ExitCode : int { kPass = 0, kCheckFailure = 1, kConfigError = 2, kRuntimeError = 3 };

inline constexpr int kReportFormat = 1;

// Accuracy claims attached to reported tensors. First derivatives come from
// the Richardson oracle, curvature of the Levi-Civita route from the nested one.
inline constexpr double kRoundoffTolerance = 1e-12;
inline constexpr double kFirstDerivativeTolerance = 1e-6;
inline constexpr double kNestedDerivativeTolerance = 1e-4;

// Documented verify tolerances.
inline constexpr double kDefiningTolerance = 1e-6;
inline constexpr double kMetricityTolerance = 1e-6;
inline constexpr double kChristoffelRouteTolerance = 1e-5;
inline constexpr double kTorsionRouteTolerance = 1e-4;
inline constexpr double kCurvatureRouteTolerance = 1e-4;
inline constexpr double kGeneratorRouteTolerance = 1e-6;
inline constexpr double kFormRouteTolerance = 1e-5;
inline constexpr double kStratonovichTolerance = 1e-6;
inline constexpr double kLeviCivitaShiftTolerance = 1e-5;
inline constexpr double kRicciGapTolerance = 1e-6;
inline constexpr double kLwEqualsLcTolerance = 1e-5;
inline constexpr double kFlatTolerance = 1e-4;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> paths;
  std::optional<double> dt;
  std::optional<double> t;
  std::optional<int> threads;
  std::vector<std::string> checks;
};

struct RunConfig {
  std::string command;
  nlohmann::json doc;  // validated document, overrides applied
  McConfig mc;
  std::vector<Vec> points;
  int random_points = 20;
  std::vector<std::string> checks;
  std::string report_path;
  std::string csv_path;
};

struct Outcome {
  ojson report;
  int exit_code = kPass;
  std::string summary;
  std::string csv;
};

inline const nlohmann::json& config_schema() {
  static const nlohmann::json s = nlohmann::json::parse(kConfigSchema);
  return s;
}

inline bool is_config_error(Errc c) {
  switch (c) {
    case Errc::ConfigError:
    case Errc::UnknownScenario:
    case Errc::BadParams:
    case Errc::SyntaxError:
    case Errc::UnknownIdentifier:
    case Errc::ArityError:
    case Errc::DegenerateX:
      return true;
    default:
      return false;
  }
}

inline nlohmann::json apply_overrides(nlohmann::json doc, const Overrides& o) {
  if (!doc.is_object()) return doc;
  if (o.seed) doc["seed"] = *o.seed;
  if (o.paths) doc["n_paths"] = *o.paths;
  if (o.dt) doc["dt"] = *o.dt;
  if (o.t) doc["t"] = *o.t;
  if (o.threads) doc["threads"] = *o.threads;
  if (!o.checks.empty()) doc["checks"] = o.checks;
  return doc;
}

namespace internal {

inline Vec to_vec(const nlohmann::json& a) {
  Vec v(static_cast<int>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<int>(i)) = a[i].get<double>();
  return v;
}

}  // namespace internal

/// Schema validation, then the semantic rules the schema cannot express.
/// `subcommand` is "run" when the command comes from the document.
inline RunConfig parse_config(const nlohmann::json& doc, const std::string& subcommand) {
  const auto violations = schema::validate(config_schema(), doc);
  if (!violations.empty()) {
    std::string msg;
    for (const auto& v : violations) msg += (msg.empty() ? "" : "; ") + v.describe();
    throw Error(Errc::ConfigError, msg);
  }
  RunConfig rc;
  rc.doc = doc;
  if (subcommand == "run") {
    if (!doc.contains("command")) throw Error(Errc::ConfigError, "/command: required when invoked as 'run'");
    rc.command = doc["command"].get<std::string>();
  } else {
    if (doc.contains("command") && doc["command"] != subcommand) {
      throw Error(Errc::ConfigError, "/command: config says '" + doc["command"].get<std::string>() + "' but the subcommand is '" +
                                         subcommand + "'");
    }
    rc.command = subcommand;
  }
  McConfig& c = rc.mc;
  c.scenario = doc["scenario"]["name"].get<std::string>();
  c.params = doc["scenario"].value("params", nlohmann::json::object());
  if (doc.contains("x0")) c.x0 = internal::to_vec(doc["x0"]);
  if (doc.contains("v0")) c.v0 = internal::to_vec(doc["v0"]);
  c.t = doc.value("t", c.t);
  c.dt = doc.value("dt", c.dt);
  c.n_paths = doc.value("n_paths", c.n_paths);
  c.seed = doc.value("seed", c.seed);
  c.threads = doc.value("threads", c.threads);
  c.p = doc.value("p", c.p);
  c.dt_halving = doc.value("dt_halving", c.dt_halving);
  if (doc.contains("tolerances")) {
    c.k_se = doc["tolerances"].value("k_se", c.k_se);
    c.epsilon = doc["tolerances"].value("fd_epsilon", c.epsilon);
  }
  if (doc.contains("functions")) c.functions = doc["functions"].get<std::vector<std::string>>();
  if (doc.contains("forms")) c.forms = doc["forms"].get<std::vector<std::vector<std::string>>>();
  if (doc.contains("points")) {
    for (const auto& p : doc["points"]) rc.points.push_back(internal::to_vec(p));
  }
  rc.random_points = doc.value("random_points", rc.random_points);
  if (doc.contains("checks")) rc.checks = doc["checks"].get<std::vector<std::string>>();
  if (rc.command == "estimate" && rc.checks.empty()) throw Error(Errc::ConfigError, "/checks: required for estimate");
  if (doc.contains("output")) {
    rc.report_path = doc["output"].value("report", "");
    rc.csv_path = doc["output"].value("paths_csv", "");
  }
  validate(c);
  return rc;
}

inline RunConfig load_config(const std::string& path, const std::string& subcommand, const Overrides& o = {}) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigError, path + ": cannot open");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(Errc::ConfigError, path + ": " + e.what());
  }
  return parse_config(apply_overrides(std::move(doc), o), subcommand);
}

namespace internal {

inline ojson json_vec(const Vec& v) {
  ojson a = ojson::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline ojson json_mat(const Mat& m) {
  ojson a = ojson::array();
  for (int i = 0; i < m.rows(); ++i) a.push_back(json_vec(m.row(i).transpose()));
  return a;
}

/// [i][j][k] = T^i_{jk}.
inline ojson json_tensor3(const Tensor3& t) {
  const int n = t.dim();
  ojson out = ojson::array();
  for (int i = 0; i < n; ++i) {
    ojson rows = ojson::array();
    for (int j = 0; j < n; ++j) {
      ojson row = ojson::array();
      for (int k = 0; k < n; ++k) row.push_back(t(i, j, k));
      rows.push_back(row);
    }
    out.push_back(rows);
  }
  return out;
}

/// [i][j][k][l] = R^i_{jkl}.
inline ojson json_tensor4(const Tensor4& r) {
  const int n = r.dim();
  ojson out = ojson::array();
  for (int i = 0; i < n; ++i) {
    ojson a = ojson::array();
    for (int j = 0; j < n; ++j) {
      ojson b = ojson::array();
      for (int k = 0; k < n; ++k) {
        ojson c = ojson::array();
        for (int l = 0; l < n; ++l) c.push_back(r(i, j, k, l));
        b.push_back(c);
      }
      a.push_back(b);
    }
    out.push_back(a);
  }
  return out;
}

inline ojson measured(ojson value, double tolerance, Provenance prov) {
  return ojson{{"value", std::move(value)}, {"tolerance", tolerance}, {"provenance", std::string(to_string(prov))}};
}

inline ojson measured(ojson value, double se, double tolerance, Provenance prov) {
  return ojson{{"value", std::move(value)},
               {"standard_error", se},
               {"tolerance", tolerance},
               {"provenance", std::string(to_string(prov))}};
}

inline double scale_of(const Mat& m) { return std::max(1.0, m.size() ? m.cwiseAbs().maxCoeff() : 0.0); }

inline ojson conventions() {
  return ojson{{"christoffel", "gamma[i][j][k] = Gamma^i_{jk}; nabla_v Z = DZ(v) + Gamma(v, Z), Gamma(v, w)^i = Gamma^i_{jk} v^j w^k"},
               {"adjoint", "adjoint Gamma^i_{jk} = LW Gamma^i_{kj}"},
               {"torsion", "torsion[i][j][k] = T^i_{jk} = Gamma^i_{jk} - Gamma^i_{kj}"},
               {"curvature", "curvature[i][j][k][l] = R^i_{jkl}, R(u, v) w = nabla_u nabla_v W - nabla_v nabla_u W - nabla_[U,V] W"},
               {"ricci", "ricci[j][k] = Ric(e_j, e_k) = sum_a <R(e_j, f_a) f_a, e_k> over a g-orthonormal frame f"},
               {"ricci_sharp", "<ricci_sharp v, w>_g = Ric(v, w); column c is Ric#(e_c)"},
               {"h_p", "extremes of H_p(v, v) over g-unit v"},
               {"coordinates", "tensor components are in the chart named by 'chart'; vectors are columns"},
               {"provenance", "analytic: closed form or exact algebra; derived-oracle: from the finite-difference oracle; statistical: Monte Carlo"}};
}

inline ojson scenario_block(const RunConfig& rc) {
  return ojson{{"name", rc.mc.scenario}, {"params", ojson::parse(rc.mc.params.dump())}};
}

/// The effective configuration; threads and output paths are excluded since
/// they never change results.
inline ojson config_echo(const RunConfig& rc) {
  const McConfig& c = rc.mc;
  ojson e;
  e["t"] = c.t;
  e["dt"] = c.dt;
  e["n_paths"] = c.n_paths;
  e["seed"] = c.seed;
  e["p"] = c.p;
  e["dt_halving"] = c.dt_halving;
  e["k_se"] = c.k_se;
  e["fd_epsilon"] = c.epsilon;
  if (c.x0) e["x0"] = json_vec(*c.x0);
  if (c.v0) e["v0"] = json_vec(*c.v0);
  if (!rc.points.empty()) {
    ojson pts = ojson::array();
    for (const auto& p : rc.points) pts.push_back(json_vec(p));
    e["points"] = pts;
  }
  if (rc.command == "verify") e["random_points"] = rc.random_points;
  if (!c.functions.empty()) e["functions"] = c.functions;
  if (!c.forms.empty()) e["forms"] = c.forms;
  if (!rc.checks.empty()) e["checks"] = rc.checks;
  return e;
}

inline ojson header(const RunConfig& rc) {
  ojson r;
  r["tool"] = "sdegeom";
  r["format"] = kReportFormat;
  r["command"] = rc.command;
  r["scenario"] = scenario_block(rc);
  r["config"] = config_echo(rc);
  r["conventions"] = conventions();
  return r;
}

inline std::string fmt(double x, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, x);
  return buf;
}

inline std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.append(w - s.size(), ' ');
  return s;
}

inline std::string csv_number(double x) {
  if (!std::isfinite(x)) return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

/// Default smooth probes in embedded coordinates for verify.
inline std::string default_function(int d) {
  std::string s;
  for (int a = 1; a <= d; ++a) {
    s += (a > 1 ? " + " : "") + std::string("sin(0.7*x") + std::to_string(a) + " + " + fmt(0.3 * (a - 1)) + ")";
  }
  return s + " + 0.2*x1*x" + std::to_string(d > 1 ? 2 : 1);
}

inline std::vector<std::string> default_form(int d) {
  std::vector<std::string> out;
  for (int a = 1; a <= d; ++a) {
    const int b = a % d + 1;
    out.push_back("cos(0.5*x" + std::to_string(a) + ") + 0.3*x" + std::to_string(b) + "*x" + std::to_string(a) + " + " +
                  fmt(0.1 * (a - 1)));
  }
  return out;
}

/// Points listed in the config, or x0 when there are none.
inline std::vector<Point> listed_points(const RunConfig& rc, const McSetup& s) {
  std::vector<Point> pts;
  for (std::size_t i = 0; i < rc.points.size(); ++i) {
    pts.push_back(resolve_point(s.sc.system, rc.points[i], "points/" + std::to_string(i)));
    check_nondegenerate(s.sc.system, pts.back());
  }
  if (pts.empty()) pts.push_back(s.x0);
  return pts;
}

}  // namespace internal

// ---------------------------------------------------------------- tensors

inline Outcome cmd_tensors(const RunConfig& rc) {
  const McSetup s = prepare(rc.mc);
  const SdeSystem& sys = s.sc.system;
  const std::vector<Point> pts = internal::listed_points(rc, s);
  using internal::measured;
  const auto oracle = Provenance::DerivedOracle;
  Outcome out;
  out.report = internal::header(rc);
  ojson list = ojson::array();
  std::ostringstream sum;
  sum << "tensors: " << s.sc.name << ", " << pts.size() << " point(s)\n";
  sum << internal::pad("point", 7) << internal::pad("chart", 8) << internal::pad("max|LW|", 14) << internal::pad("max|T|", 14)
      << internal::pad("max|R|", 14) << internal::pad("h_p min", 14) << "h_p max\n";
  for (std::size_t idx = 0; idx < pts.size(); ++idx) {
    const Point& p = pts[idx];
    const GeometryPoint gp = compute_geometry(sys, p);
    const Metric& m = gp.metric;
    const Tensor3 t = torsion(gp.lw);
    const Tensor4 r = curvature_lw_direct_tensor(gp.dX, m);
    const Tensor4 r_lc = curvature_from_christoffel(levi_civita_field(sys, p), p.x, sys.oracle);
    const Ricci ric = ricci(r, m.g);
    const Ricci ric_lc = ricci(r_lc, m.g);
    const HpExtremes hp = h_p_extremes(sys, p, rc.mc.p);
    const double g_scale = internal::scale_of(m.g);
    // Products of first derivatives scale the curvature error with |g| |dX|^2.
    double dx_scale = 1.0;
    for (const auto& d : gp.dX) dx_scale = std::max(dx_scale, internal::scale_of(d));
    const double r_tol = kFirstDerivativeTolerance * g_scale * dx_scale * sys.noise_dim;

    ojson e;
    e["chart"] = sys.charts[p.chart].id;
    e["coordinates"] = internal::json_vec(p.x);
    if (p.anchor.size()) e["anchor"] = internal::json_vec(p.anchor);
    e["embedded"] = measured(internal::json_vec(sys.embedded(p)), kRoundoffTolerance, Provenance::Analytic);
    e["diffusion"] = measured(internal::json_mat(m.X), kRoundoffTolerance, Provenance::Analytic);
    e["drift"] = measured(internal::json_vec(gp.A), kRoundoffTolerance, Provenance::Analytic);
    e["metric"] = measured(internal::json_mat(m.g), kRoundoffTolerance * g_scale, Provenance::Analytic);
    e["lw_christoffel"] = measured(internal::json_tensor3(gp.lw), kFirstDerivativeTolerance, oracle);
    e["adjoint_christoffel"] = measured(internal::json_tensor3(gp.adjoint), kFirstDerivativeTolerance, oracle);
    e["levi_civita_christoffel"] = measured(internal::json_tensor3(gp.lc), kFirstDerivativeTolerance, oracle);
    e["torsion"] = measured(internal::json_tensor3(t), 2.0 * kFirstDerivativeTolerance, oracle);
    e["lw_curvature"] = measured(internal::json_tensor4(r), r_tol, oracle);
    e["lw_ricci"] = measured(internal::json_mat(ric.ric), r_tol * m.g.rows(), oracle);
    e["lw_ricci_sharp"] = measured(internal::json_mat(ric.sharp), r_tol * m.g.rows(), oracle);
    e["levi_civita_curvature"] = measured(internal::json_tensor4(r_lc), kNestedDerivativeTolerance, oracle);
    e["levi_civita_ricci"] = measured(internal::json_mat(ric_lc.ric), kNestedDerivativeTolerance * m.g.rows(), oracle);
    const double hp_tol = (rc.mc.p == 2.0 || sys.dim <= 2) ? kFirstDerivativeTolerance : kNestedDerivativeTolerance;
    e["h_p"] = ojson{{"p", rc.mc.p},
                     {"lower", measured(hp.lower, hp_tol, oracle)},
                     {"upper", measured(hp.upper, hp_tol, oracle)}};
    list.push_back(e);
    sum << internal::pad(std::to_string(idx), 7) << internal::pad(sys.charts[p.chart].id, 8)
        << internal::pad(internal::fmt(gp.lw.max_abs()), 14) << internal::pad(internal::fmt(t.max_abs()), 14)
        << internal::pad(internal::fmt(r.max_abs()), 14) << internal::pad(internal::fmt(hp.lower), 14) << internal::fmt(hp.upper) << "\n";
  }
  out.report["status"] = "report";
  out.report["pass"] = true;
  out.report["results"] = ojson{{"points", list}};
  out.summary = sum.str();
  return out;
}

// ----------------------------------------------------------------- verify

namespace internal {

struct Identity {
  std::string name;
  std::string description;
  double tolerance = 0.0;
  bool applicable = false;
  double residual = 0.0;
  int points = 0;

  void add(double r) {
    applicable = true;
    ++points;
    if (!(r <= residual)) residual = std::isnan(r) ? r : std::max(residual, r);
  }
  bool pass() const { return !applicable || residual <= tolerance; }
};

}  // namespace internal

inline Outcome cmd_verify(const RunConfig& rc) {
  const McSetup s = prepare(rc.mc);
  const SdeSystem& sys = s.sc.system;
  const int d = embedded_dim(sys);
  std::vector<Point> pts = internal::listed_points(rc, s);
  if (rc.random_points > 0) {
    auto extra = detail::probe_points(rc.mc, s, rc.random_points, 1);
    pts.insert(pts.end(), extra.begin() + 1, extra.end());
  }
  const TestFunction f = s.functions.empty() ? TestFunction{internal::default_function(d), expr::parse(internal::default_function(d), d)}
                                             : s.functions.front();
  TestForm phi;
  if (s.forms.empty()) {
    phi.source = internal::default_form(d);
    for (const auto& c : phi.source) phi.comps.push_back(expr::parse(c, d));
  } else {
    phi = s.forms.front();
  }

  using internal::Identity;
  Identity defining{"lw_defining_property", "|LW derivative of X(.) Y(x) v along w| at x", kDefiningTolerance};
  Identity metricity{"lw_metricity", "|d<Z,Z>(v) - 2 <LW nabla_v Z, Z>| and the X-form of metricity", kMetricityTolerance};
  Identity christoffel{"christoffel_routes", "LW Christoffel symbols: direct vs orthonormal-basis vs bracket routes", kChristoffelRouteTolerance};
  Identity torsion_r{"torsion_routes", "torsion from Christoffel symbols vs the dY and bracket routes", kTorsionRouteTolerance};
  Identity curvature{"curvature_routes", "LW curvature from products of LW derivatives of X vs differentiated Christoffel symbols",
                     kCurvatureRouteTolerance};
  Identity generator{"generator_routes", "generator on a test function: LW form vs Levi-Civita form vs Hoermander form",
                     kGeneratorRouteTolerance};
  Identity forms{"one_form_routes", "1-form generator: trace form vs codifferential form, and both codifferential routes",
                 kFormRouteTolerance};
  Identity strat{"stratonovich_lw_vanishing", "|sum_i LW nabla_{X^i} X^i|", kStratonovichTolerance};
  Identity tss_eq{"tss_iff_adjoint_metric", "points where the TSS verdict and metricity of the adjoint connection disagree", 0.0};
  Identity shift{"levi_civita_from_lw", "Levi-Civita = LW minus half torsion (TSS points only)", kLeviCivitaShiftTolerance};
  Identity ric_gap{"ricci_comparison", "max(0, -min eigenvalue of Ric - LW Ric) (TSS points only)", kRicciGapTolerance};
  Identity ric_zero{"ricci_gap_vanishes_iff_lw_equals_lc", "TSS points where |Ric - LW Ric| < tol disagrees with LW = Levi-Civita",
                    0.0};

  double lw_minus_lc = 0.0;
  double curv_max = 0.0;
  double adj_res = 0.0;
  double tss_res = 0.0;
  double gap_min = 0.0;
  double gap_max = 0.0;
  bool all_tss = true;
  Rng rng(rc.mc.seed, 0x7e51f);
  for (const Point& p : pts) {
    const Metric m = induced_metric(sys, p);
    const std::vector<Mat> dX = dX_slices(sys, p);
    const Tensor3 lw = lw_christoffel_from(dX, m.Y);
    const Tensor3 lc = levi_civita_christoffel(sys, p);
    const int n = sys.dim;
    for (int probe = 0; probe < 5; ++probe) {
      const Vec e = m.Y * rng.normal_vec(n);
      auto z = [&](const Vec& y) { return Vec(sys.X(p.chart, y) * e); };
      const Vec w = rng.normal_vec(n);
      defining.add(covariant_derivative(lw, z, p.x, w, sys.oracle).norm() / std::max(1.0, e.norm() * w.norm()));
    }
    const MetricityResult mr = metricity_check(sys, p, lw, rng, 5);
    metricity.add(std::max(mr.residual, mr.form_residual));

    Eigen::HouseholderQR<Mat> qr(rng.normal_mat(sys.noise_dim, sys.noise_dim));
    const Mat q = qr.householderQ();
    const double c1 = (lw - lw_christoffel_orthobasis(sys, p, q)).max_abs();
    const double c2 = (lw - lw_christoffel_brackets(sys, p, rng.normal_mat(n, n), rng.normal_mat(n, n))).max_abs();
    christoffel.add(std::max(c1, c2));

    const Tensor3 t = torsion(lw);
    const Vec v1 = rng.normal_vec(n);
    const Vec v2 = rng.normal_vec(n);
    torsion_r.add(std::max((t - torsion_via_dY(sys, p)).max_abs(),
                           (t.apply(v1, v2) - torsion_via_brackets(sys, p, v1, v2)).norm() / std::max(1.0, v1.norm() * v2.norm())));

    const Tensor4 direct = curvature_lw_direct_tensor(dX, m);
    const Tensor4 route = curvature_from_christoffel(lw_field(sys, p), p.x, sys.oracle);
    double cdiff = 0.0;
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) cdiff = std::max(cdiff, (direct.block(j, k) - route.block(j, k)).cwiseAbs().maxCoeff());
    curvature.add(cdiff);
    curv_max = std::max(curv_max, direct.max_abs());

    const ScalarField fs = f.chart_field(sys, p);
    const double g_lw = generator_lw(sys, p, fs);
    const double gscale = std::max(1.0, std::abs(g_lw));
    generator.add(std::max(std::abs(g_lw - generator_lc(sys, p, fs)), std::abs(g_lw - generator_hoermander(sys, p, fs))) / gscale);

    const FormField ff = phi.chart_field(sys, p);
    const Vec v = rng.normal_vec(n);
    const double wa = weitzenbock_rhs_1form(sys, p, ff, v);
    const double wb = hodge_rhs_1form(sys, p, ff, v);
    const double da = bar_delta(sys, p, ff);
    const double db = bar_delta_lie(sys, p, ff);
    forms.add(std::max(std::abs(wa - wb) / std::max(1.0, std::abs(wa)), std::abs(da - db) / std::max(1.0, std::abs(da))));

    strat.add(stratonovich_correction(sys, p).lw_term.norm());

    lw_minus_lc = std::max(lw_minus_lc, (lw - lc).max_abs());
    const TssResult tr = tss_check(sys, p, rng, 5);
    const double ar = metricity_check(sys, p, adjoint_christoffel(lw), rng, 5).residual;
    adj_res = std::max(adj_res, ar);
    tss_res = std::max(tss_res, tr.torsion_residual);
    all_tss = all_tss && tr.is_tss;
    tss_eq.add((ar < kMetricityTolerance) == tr.is_tss ? 0.0 : 1.0);
    if (tr.is_tss) {
      shift.add(levi_civita_from_lw_check(sys, p, rng, 5).residual);
      const Ricci r_lc = ricci(curvature_from_christoffel(levi_civita_field(sys, p), p.x, sys.oracle), m.g);
      const Ricci r_lw = ricci(direct, m.g);
      const Vec eig = form_eigenvalues(Mat(r_lc.ric - r_lw.ric), m.g);
      ric_gap.add(std::max(0.0, -eig.minCoeff()));
      gap_min = std::min(gap_min, eig.minCoeff());
      gap_max = std::max(gap_max, eig.cwiseAbs().maxCoeff());
      const bool lw_is_lc_here = (lw - lc).max_abs() < kLwEqualsLcTolerance;
      ric_zero.add((eig.cwiseAbs().maxCoeff() < kRicciGapTolerance) == lw_is_lc_here ? 0.0 : 1.0);
    }
  }

  Outcome out;
  out.report = internal::header(rc);
  const std::vector<const Identity*> ids{&defining, &metricity, &christoffel, &torsion_r, &curvature, &generator,
                                         &forms,    &strat,     &tss_eq,      &shift,     &ric_gap,   &ric_zero};
  ojson arr = ojson::array();
  bool all = true;
  std::ostringstream sum;
  sum << "verify: " << s.sc.name << ", " << pts.size() << " point(s)\n";
  sum << internal::pad("identity", 40) << internal::pad("max residual", 16) << internal::pad("tolerance", 12) << "verdict\n";
  for (const Identity* id : ids) {
    const auto prov = (id->tolerance == 0.0) ? Provenance::Analytic : Provenance::DerivedOracle;
    ojson e;
    e["name"] = id->name;
    e["description"] = id->description;
    e["applicable"] = id->applicable;
    e["points"] = id->points;
    e["residual"] = internal::measured(id->applicable ? ojson(id->residual) : ojson(nullptr), id->tolerance, prov);
    e["pass"] = id->pass();
    arr.push_back(e);
    all = all && id->pass();
    sum << internal::pad(id->name, 40) << internal::pad(id->applicable ? internal::fmt(id->residual, 3) : "n/a", 16)
        << internal::pad(internal::fmt(id->tolerance, 3), 12) << (!id->applicable ? "n/a" : id->pass() ? "PASS" : "FAIL") << "\n";
  }
  const auto oracle = Provenance::DerivedOracle;
  ojson props;
  props["lw_equals_lc"] = lw_minus_lc < kLwEqualsLcTolerance;
  props["curvature_zero"] = curv_max < kFlatTolerance;
  props["tss"] = all_tss;
  props["adjoint_metric"] = adj_res < kMetricityTolerance;
  ojson support;
  support["max_lw_minus_levi_civita"] = internal::measured(lw_minus_lc, kLwEqualsLcTolerance, oracle);
  support["max_lw_curvature"] = internal::measured(curv_max, kFlatTolerance, oracle);
  support["max_torsion_skew_residual"] = internal::measured(tss_res, kTssTolerance, oracle);
  support["max_adjoint_metricity_residual"] = internal::measured(adj_res, kMetricityTolerance, oracle);
  if (ric_gap.applicable) {
    support["min_ricci_gap_eigenvalue"] = internal::measured(gap_min, kNestedDerivativeTolerance, oracle);
    support["max_abs_ricci_gap_eigenvalue"] = internal::measured(gap_max, kNestedDerivativeTolerance, oracle);
  }
  out.report["status"] = all ? "pass" : "fail";
  out.report["pass"] = all;
  out.report["results"] = ojson{{"points", static_cast<int>(pts.size())},
                                {"test_function", f.source},
                                {"test_form", phi.source},
                                {"identities", arr},
                                {"properties", props},
                                {"supporting", support}};
  for (auto it = props.begin(); it != props.end(); ++it) {
    sum << internal::pad(it.key(), 40) << (it.value().get<bool>() ? "true" : "false") << "\n";
  }
  out.summary = sum.str();
  out.exit_code = all ? kPass : kCheckFailure;
  return out;
}

// --------------------------------------------------------------- simulate

inline Outcome cmd_simulate(const RunConfig& rc) {
  const McConfig& cfg = rc.mc;
  const McSetup s = prepare(cfg);
  const SdeSystem& sys = s.sc.system;
  const int d = embedded_dim(sys);
  const Mat g0 = induced_metric(sys, s.x0).g;
  PathOptions opt;
  opt.jacobian = true;
  opt.filtered = true;
  opt.lw_transport = true;
  std::vector<std::string> cols;
  for (int a = 1; a <= d; ++a) cols.push_back("x" + std::to_string(a));
  cols.insert(cols.end(), {"norm_J_v0", "norm_W_v0", "lw_transport_defect"});
  PathTable table = detail::simulate(cfg, s, cols, false, [&](const NoiseGrid& noise) -> detail::PathValues {
    const PathResult r = run_path(sys, s.x0, noise, opt);
    if (!r.alive) return std::nullopt;
    const Mat g = induced_metric(sys, r.last).g;
    const Vec y = sys.embedded(r.last);
    std::vector<double> row(y.data(), y.data() + y.size());
    row.push_back(detail::g_norm(g, r.state.J * s.v0));
    row.push_back(detail::g_norm(g, r.state.W * s.v0));
    const Mat& P = r.state.lw_transport;
    row.push_back((P.transpose() * g * P - g0).norm());
    return row;
  });
  const int alive = static_cast<int>(std::count(table.alive.begin(), table.alive.end(), 1));

  Outcome out;
  out.report = internal::header(rc);
  ojson paths{{"requested", cfg.n_paths}, {"alive", alive}, {"dropped", cfg.n_paths - alive}};
  ojson qs = ojson::array();
  std::ostringstream sum;
  sum << "simulate: " << s.sc.name << ", " << alive << "/" << cfg.n_paths << " paths alive, t = " << cfg.t << "\n";
  sum << internal::pad("quantity", 24) << internal::pad("mean", 16) << "std. error\n";
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const Estimate e = detail::column_estimate(table, static_cast<int>(c));
    qs.push_back(ojson{{"name", "E " + cols[c] + "(t)"},
                       {"estimate", internal::measured(e.mean, e.se, cfg.k_se * e.se, Provenance::Statistical)}});
    sum << internal::pad("E " + cols[c], 24) << internal::pad(internal::fmt(e.mean), 16) << internal::fmt(e.se, 3) << "\n";
  }
  const bool enough = alive >= kMinAliveFraction * cfg.n_paths;
  out.report["status"] = enough ? "report" : "too_few_alive_paths";
  out.report["pass"] = enough;
  out.report["results"] = ojson{{"paths", paths},
                                {"start", ojson{{"chart", sys.charts[s.x0.chart].id},
                                                {"coordinates", internal::json_vec(s.x0.x)},
                                                {"v0", internal::json_vec(s.v0)}}},
                                {"quantities", qs}};
  std::ostringstream csv;
  csv << "path,alive";
  for (const auto& c : cols) csv << "," << c;
  csv << "\n";
  for (std::size_t i = 0; i < table.fine.size(); ++i) {
    csv << i << "," << int(table.alive[i]);
    for (std::size_t c = 0; c < cols.size(); ++c) csv << "," << (table.alive[i] ? internal::csv_number(table.fine[i][c]) : "");
    csv << "\n";
  }
  out.csv = csv.str();
  out.summary = sum.str();
  out.exit_code = enough ? kPass : kCheckFailure;
  return out;
}

// --------------------------------------------------------------- estimate

namespace internal {

inline ojson check_json(const CheckResult& c) {
  return ojson{{"name", c.name},
               {"estimate", c.estimate},
               {"standard_error", c.standard_error},
               {"estimate_provenance", "statistical"},
               {"relation", std::string(to_string(c.relation))},
               {"reference", c.reference},
               {"reference_provenance", std::string(to_string(c.provenance))},
               {"bias_allowance", c.bias_allowance},
               {"tolerance", c.tolerance},
               {"pass", c.pass}};
}

inline ojson mc_json(const McReport& r, const std::string& status, const std::string& message) {
  ojson e;
  e["kind"] = r.kind;
  e["status"] = status;
  e["pass"] = status == "pass";
  if (!message.empty()) e["message"] = message;
  e["paths"] = ojson{{"requested", r.n_paths}, {"alive", r.alive}, {"dropped", r.dropped}};
  ojson checks = ojson::array();
  for (const auto& c : r.checks) checks.push_back(check_json(c));
  e["checks"] = checks;
  ojson qs = ojson::array();
  for (const auto& q : r.quantities) {
    qs.push_back(ojson{{"name", q.name}, {"estimate", measured(q.value, q.standard_error, q.tolerance, q.provenance)}});
  }
  e["quantities"] = qs;
  e["notes"] = r.notes;
  return e;
}

inline void csv_rows(std::ostringstream& csv, const McReport& r) {
  const PathTable& t = r.paths;
  for (std::size_t i = 0; i < t.fine.size(); ++i) {
    for (int grid = 0; grid < (t.coarse.empty() ? 1 : 2); ++grid) {
      const auto& rows = grid == 0 ? t.fine : t.coarse;
      for (std::size_t c = 0; c < t.columns.size(); ++c) {
        csv << r.kind << "," << i << "," << int(t.alive[i]) << "," << (grid == 0 ? "dt" : "2dt") << "," << t.columns[c] << ","
            << (t.alive[i] && c < rows[i].size() ? csv_number(rows[i][c]) : "") << "\n";
      }
    }
  }
}

}  // namespace internal

inline Outcome cmd_estimate(const RunConfig& rc) {
  Outcome out;
  out.report = internal::header(rc);
  ojson reports = ojson::array();
  ojson timing = ojson::object();
  std::ostringstream sum;
  std::ostringstream csv;
  csv << "check,path,alive,grid,column,value\n";
  sum << "estimate: " << rc.mc.scenario << "\n";
  sum << internal::pad("check", 58) << internal::pad("estimate", 14) << internal::pad("rel", 4) << internal::pad("reference", 14)
      << internal::pad("tolerance", 12) << "verdict\n";
  bool all = true;
  for (const auto& kind : rc.checks) {
    const auto start = std::chrono::steady_clock::now();
    McReport r;
    std::string status;
    std::string message;
    try {
      r = run_check(kind, rc.mc);
      status = r.pass() ? "pass" : "fail";
    } catch (const McFailure& e) {
      r = e.partial();
      status = "too_few_alive_paths";
      message = e.what();
    } catch (const Error& e) {
      if (e.code() != Errc::NotApplicable) throw;
      r.kind = kind;
      r.n_paths = rc.mc.n_paths;
      status = "not_applicable";
      message = e.what();
    }
    timing[kind] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && status == "pass";
    reports.push_back(internal::mc_json(r, status, message));
    internal::csv_rows(csv, r);
    for (const auto& c : r.checks) {
      sum << internal::pad(kind + ": " + c.name, 58) << internal::pad(internal::fmt(c.estimate), 14)
          << internal::pad(std::string(to_string(c.relation)), 4) << internal::pad(internal::fmt(c.reference), 14)
          << internal::pad(internal::fmt(c.tolerance, 3), 12) << (c.pass ? "PASS" : "FAIL") << "\n";
    }
    if (status != "pass" && status != "fail") sum << internal::pad(kind, 58) << status << ": " << message << "\n";
  }
  out.report["status"] = all ? "pass" : "fail";
  out.report["pass"] = all;
  out.report["results"] = ojson{{"reports", reports}};
  out.report["timing"] = ojson{{"checks", timing}};
  out.summary = sum.str();
  out.csv = csv.str();
  out.exit_code = all ? kPass : kCheckFailure;
  return out;
}

// --------------------------------------------------------------- dispatch

/// Runs a parsed configuration. Library errors become an error report with
/// exit code 2 (configuration) or 3 (runtime); nothing escapes.
inline Outcome run(const RunConfig& rc) {
  const auto start = std::chrono::steady_clock::now();
  Outcome out;
  try {
    if (rc.command == "tensors") out = cmd_tensors(rc);
    else if (rc.command == "verify") out = cmd_verify(rc);
    else if (rc.command == "simulate") out = cmd_simulate(rc);
    else out = cmd_estimate(rc);
  } catch (const Error& e) {
    out = Outcome{};
    out.report = internal::header(rc);
    out.report["status"] = "error";
    out.report["pass"] = false;
    out.report["error"] = ojson{{"code", std::string(to_string(e.code()))}, {"message", e.what()}};
    out.exit_code = is_config_error(e.code()) ? kConfigError : kRuntimeError;
    out.summary = std::string(e.what()) + "\n";
  } catch (const std::exception& e) {
    out = Outcome{};
    out.report = internal::header(rc);
    out.report["status"] = "error";
    out.report["pass"] = false;
    out.report["error"] = ojson{{"code", "Internal"}, {"message", e.what()}};
    out.exit_code = kRuntimeError;
    out.summary = std::string(e.what()) + "\n";
  }
  if (!out.report.contains("timing")) out.report["timing"] = ojson::object();
  out.report["timing"]["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

/// The report without its timing block, for reproducibility comparisons.
inline std::string without_timing(const ojson& report) {
  ojson r = report;
  r.erase("timing");
  return r.dump();
}

}  // namespace sdegeom::cli
