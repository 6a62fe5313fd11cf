#pragma once

// Monte Carlo checks of the stochastic identities.
//
// Path i always draws its increments from stream (seed, i) and per-path
// results land in slot i, so every estimate is independent of the number of
// worker threads. Discretisation bias is estimated by re-running each path
// on the same increments summed in pairs (dt doubled); short-time checks
// estimate their O(t) bias from the half-time prefix of the same paths.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "sdegeom/error.hpp"
#include "sdegeom/expr.hpp"
#include "sdegeom/geometry.hpp"
#include "sdegeom/model.hpp"
#include "sdegeom/numeric.hpp"
#include "sdegeom/random.hpp"
#include "sdegeom/stochastics.hpp"

namespace sdegeom {

/// Absolute slack added to every verdict so that identities which hold
/// pathwise (SE = 0) are not failed by round-off.
inline constexpr double kRoundoffFloor = 1e-10;
inline constexpr double kMinAliveFraction = 0.9;

struct McConfig {
  std::string scenario = "flat";
  nlohmann::json params = nlohmann::json::object();
  std::optional<Vec> x0;  // embedded coordinates, or chart-0 coordinates
  std::optional<Vec> v0;  // chart coordinates at x0, or an embedded tangent vector
  double t = 0.5;
  double dt = 1e-3;
  int n_paths = 1000;
  std::uint64_t seed = 1;
  int threads = 0;  // 0: hardware concurrency
  double k_se = 3.0;
  double p = 2.0;
  double epsilon = 1e-4;    // finite-difference step of the Bismut check
  bool dt_halving = true;   // estimate discretisation bias on the 2 dt grid
  std::vector<std::string> functions;         // expressions in embedded coordinates
  std::vector<std::vector<std::string>> forms;  // components c_a with phi = sum c_a dy_a
};

inline int step_count(double t, double dt) {
  const double r = t / dt;
  const double k = std::round(r);
  if (!(k >= 1.0) || std::abs(r - k) > 1e-9 * std::max(1.0, r)) return -1;
  return static_cast<int>(k);
}

inline void validate(const McConfig& c) {
  auto fail = [](const std::string& field, const std::string& why) { throw Error(Errc::ConfigError, field + ": " + why); };
  if (c.n_paths < 100) fail("n_paths", "must be at least 100 (got " + std::to_string(c.n_paths) + ")");
  if (!(c.t > 0.0) || !std::isfinite(c.t)) fail("t", "must be positive");
  if (!(c.dt > 0.0) || !std::isfinite(c.dt)) fail("dt", "must be positive");
  if (step_count(c.t, c.dt) < 0) fail("dt", "t / dt must be a positive integer");
  if (!(c.k_se > 0.0)) fail("k_se", "must be positive");
  if (!(c.p >= 1.0)) fail("p", "must be at least 1");
  if (!(c.epsilon > 0.0)) fail("epsilon", "must be positive");
  if (c.threads < 0) fail("threads", "must be non-negative");
}

enum class Provenance { Analytic, DerivedOracle, Statistical };

inline std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::Analytic: return "analytic";
    case Provenance::DerivedOracle: return "derived-oracle";
    case Provenance::Statistical: return "statistical";
  }
  return "unknown";
}

/// Equal: |estimate - reference| <= tolerance; AtMost: estimate <= reference
/// + tolerance; AtLeast: estimate >= reference - tolerance.
enum class Relation { Equal, AtMost, AtLeast };

inline std::string_view to_string(Relation r) {
  switch (r) {
    case Relation::Equal: return "==";
    case Relation::AtMost: return "<=";
    case Relation::AtLeast: return ">=";
  }
  return "?";
}

struct CheckResult {
  std::string name;
  double estimate = 0.0;
  double standard_error = 0.0;
  double reference = 0.0;
  Provenance provenance = Provenance::Analytic;  // of the reference
  Relation relation = Relation::Equal;
  double bias_allowance = 0.0;
  double tolerance = 0.0;  // k SE + bias allowance + fixed part
  bool pass = false;
};

/// A reported number that is not itself a verdict.
struct Quantity {
  std::string name;
  double value = 0.0;
  double standard_error = 0.0;
  double tolerance = 0.0;
  Provenance provenance = Provenance::Statistical;
};

/// Per-path values behind a report; `coarse` is empty without dt halving.
struct PathTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> fine;
  std::vector<std::vector<double>> coarse;
  std::vector<char> alive;
};

struct McReport {
  std::string kind;
  std::string scenario;
  int n_paths = 0;
  int alive = 0;
  int dropped = 0;
  double t = 0.0;
  double dt = 0.0;
  std::uint64_t seed = 0;
  std::vector<CheckResult> checks;
  std::vector<Quantity> quantities;
  std::vector<std::string> notes;
  PathTable paths;
  double wall_seconds = 0.0;

  bool pass() const {
    if (checks.empty()) return false;
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
  }
};

/// Raised when fewer than 90% of the paths survive; carries what was computed.
class McFailure : public Error {
 public:
  McFailure(McReport partial, const std::string& what) : Error(Errc::TooFewAlivePaths, what), partial_(std::move(partial)) {}
  const McReport& partial() const noexcept { return partial_; }

 private:
  McReport partial_;
};

inline CheckResult make_check(std::string name, double estimate, double se, double reference, Provenance prov,
                              Relation rel, double k_se, double bias = 0.0, double fixed = 0.0) {
  CheckResult c;
  c.name = std::move(name);
  c.estimate = estimate;
  c.standard_error = se;
  c.reference = reference;
  c.provenance = prov;
  c.relation = rel;
  c.bias_allowance = bias;
  c.tolerance = k_se * se + bias + fixed + kRoundoffFloor * std::max(1.0, std::abs(reference));
  const double d = estimate - reference;
  switch (rel) {
    case Relation::Equal: c.pass = std::abs(d) <= c.tolerance; break;
    case Relation::AtMost: c.pass = d <= c.tolerance; break;
    case Relation::AtLeast: c.pass = d >= -c.tolerance; break;
  }
  if (!std::isfinite(estimate) || !std::isfinite(c.tolerance)) c.pass = false;
  return c;
}

struct Estimate {
  double mean = 0.0;
  double se = 0.0;
  int count = 0;
};

/// Sample mean and standard error from the unbiased variance estimator.
inline Estimate estimate_of(const std::vector<double>& xs) {
  Estimate e;
  e.count = static_cast<int>(xs.size());
  if (xs.empty()) return e;
  e.mean = pairwise_sum(xs) / xs.size();
  if (xs.size() < 2) return e;
  std::vector<double> sq(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) sq[i] = (xs[i] - e.mean) * (xs[i] - e.mean);
  e.se = std::sqrt(pairwise_sum(sq) / (xs.size() - 1) / xs.size());
  return e;
}

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

/// out[i] = fn(i) on a pool of worker threads. If any call throws, the
/// exception of the smallest failing index is rethrown.
template <class T, class F>
std::vector<T> parallel_map(int count, int threads, F&& fn) {
  std::vector<T> out(count);
  std::vector<std::exception_ptr> errors(count);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= count) return;
      try {
        out[i] = fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int workers = std::min(resolve_threads(threads), std::max(count, 1));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

/// Scalar function given by an expression over embedded coordinates.
struct TestFunction {
  std::string source;
  expr::Expr e;

  double operator()(const SdeSystem& sys, const Point& p) const { return expr::eval(e, sys.embedded(p)); }

  ScalarField chart_field(const SdeSystem& sys, const Point& at) const {
    return [&sys, at, e = e](const Vec& y) { return expr::eval(e, sys.embedded(moved(at, y))); };
  }
};

/// 1-form sum_a c_a(y) dy_a in embedded coordinates, pulled back to charts.
struct TestForm {
  std::vector<std::string> source;
  std::vector<expr::Expr> comps;

  Vec embedded_components(const SdeSystem& sys, const Point& p) const {
    const Vec y = sys.embedded(p);
    Vec c(static_cast<int>(comps.size()));
    for (std::size_t a = 0; a < comps.size(); ++a) c(static_cast<int>(a)) = expr::eval(comps[a], y);
    return c;
  }

  Vec chart_components(const SdeSystem& sys, const Point& p) const {
    return sys.embedded_jacobian(p).transpose() * embedded_components(sys, p);
  }

  double operator()(const SdeSystem& sys, const Point& p, const Vec& v) const { return chart_components(sys, p).dot(v); }

  FormField chart_field(const SdeSystem& sys, const Point& at) const {
    const TestForm self = *this;
    return [&sys, at, self](const Vec& y) { return self.chart_components(sys, moved(at, y)); };
  }

  std::string label() const {
    std::string s = "[";
    for (std::size_t a = 0; a < source.size(); ++a) s += (a ? ", " : "") + source[a];
    return s + "]";
  }
};

inline int embedded_dim(const SdeSystem& sys) { return sys.embed ? sys.embed_dim : sys.dim; }

/// A configured point: embedded coordinates when the length is the
/// embedding dimension, otherwise coordinates in the first chart.
inline Point resolve_point(const SdeSystem& sys, const Vec& y, const std::string& field) {
  const int d = embedded_dim(sys);
  Point p;
  if (sys.embed && sys.locate && y.size() == d && d != sys.dim) {
    p = sys.locate(y);
    if ((sys.embedded(p) - y).norm() > 1e-8 * std::max(1.0, y.norm())) {
      throw Error(Errc::ConfigError, field + ": point does not lie on the manifold");
    }
  } else if (y.size() == sys.dim) {
    p = sys.point(0, y);
  } else {
    throw Error(Errc::ConfigError, field + ": expected " + std::to_string(sys.dim) + " chart or " + std::to_string(d) +
                                       " embedded coordinates, got " + std::to_string(y.size()));
  }
  if (!sys.in_domain(p)) throw Error(Errc::ConfigError, field + ": outside the chart domain");
  if (!sys.compact && !(p.x.norm() < sys.guard_radius)) throw Error(Errc::ConfigError, field + ": outside the guard radius");
  return p;
}

/// Starting point used when the configuration does not give one.
inline Point default_start(const Scenario& sc) {
  const auto& s = sc.system;
  if (sc.name == "sphere-gradient") {
    Vec y = Vec::Zero(s.dim + 1);
    y(0) = 0.6;
    y(s.dim) = 0.8;
    return s.locate(y);
  }
  if (sc.name == "so3-left-invariant") return s.point(0, Vec::Zero(s.dim));
  return s.point(0, Vec::Constant(s.dim, 0.3));
}

/// Everything a check needs once the configuration has been resolved.
struct McSetup {
  Scenario sc;
  Point x0;
  Vec v0;  // chart coordinates at x0
  int steps = 0;
  std::vector<TestFunction> functions;
  std::vector<TestForm> forms;
};

inline McSetup prepare(const McConfig& cfg) {
  validate(cfg);
  McSetup s;
  try {
    s.sc = build_scenario(cfg.scenario, cfg.params);
  } catch (const Error& e) {
    if (e.code() == Errc::UnknownScenario || e.code() == Errc::BadParams) throw Error(Errc::ConfigError, std::string("scenario: ") + e.what());
    throw;
  }
  const SdeSystem& sys = s.sc.system;
  const int d = embedded_dim(sys);
  s.steps = step_count(cfg.t, cfg.dt);
  s.x0 = cfg.x0 ? resolve_point(sys, *cfg.x0, "x0") : default_start(s.sc);
  check_nondegenerate(sys, s.x0);
  const Metric m0 = induced_metric(sys, s.x0);
  if (cfg.v0) {
    const Vec& v = *cfg.v0;
    if (v.size() == sys.dim) {
      s.v0 = v;
    } else if (v.size() == d && sys.embed) {
      const Mat ej = sys.embedded_jacobian(s.x0);
      s.v0 = ej.colPivHouseholderQr().solve(v);
      if ((ej * s.v0 - v).norm() > 1e-8 * std::max(1.0, v.norm())) {
        throw Error(Errc::ConfigError, "v0: vector is not tangent to the manifold at x0");
      }
    } else {
      throw Error(Errc::ConfigError, "v0: expected " + std::to_string(sys.dim) + " chart or " + std::to_string(d) +
                                         " embedded components, got " + std::to_string(v.size()));
    }
    if (!(s.v0.dot(m0.g * s.v0) > 0.0)) throw Error(Errc::ConfigError, "v0: must be nonzero");
  } else {
    s.v0 = orthonormal_frame(m0.g).col(0);
  }
  for (std::size_t i = 0; i < cfg.functions.size(); ++i) {
    try {
      s.functions.push_back({cfg.functions[i], expr::parse(cfg.functions[i], d)});
    } catch (const Error& e) {
      throw Error(Errc::ConfigError, "functions/" + std::to_string(i) + ": " + e.what());
    }
  }
  for (std::size_t i = 0; i < cfg.forms.size(); ++i) {
    if (static_cast<int>(cfg.forms[i].size()) != d) {
      throw Error(Errc::ConfigError, "forms/" + std::to_string(i) + ": expected " + std::to_string(d) + " components");
    }
    TestForm f;
    f.source = cfg.forms[i];
    for (std::size_t a = 0; a < cfg.forms[i].size(); ++a) {
      try {
        f.comps.push_back(expr::parse(cfg.forms[i][a], d));
      } catch (const Error& e) {
        throw Error(Errc::ConfigError, "forms/" + std::to_string(i) + "/" + std::to_string(a) + ": " + e.what());
      }
    }
    s.forms.push_back(std::move(f));
  }
  return s;
}

namespace detail {

using PathValues = std::optional<std::vector<double>>;

struct PathOutcome {
  bool alive = false;
  std::vector<double> fine;
  std::vector<double> coarse;
};

/// Runs `values(noise)` for every path; with `coarse` also on the 2 dt grid.
template <class F>
PathTable simulate(const McConfig& cfg, const McSetup& s, std::vector<std::string> columns, bool coarse, F&& values) {
  const bool halve = coarse && cfg.dt_halving && s.steps % 2 == 0;
  const int m = s.sc.system.noise_dim;
  auto outcomes = parallel_map<PathOutcome>(cfg.n_paths, cfg.threads, [&](int i) {
    PathOutcome o;
    const NoiseGrid noise = sample_noise(cfg.seed, static_cast<std::uint64_t>(i), s.steps, cfg.dt, m);
    PathValues fine = values(noise);
    if (!fine) return o;
    if (halve) {
      PathValues c = values(noise.coarsen());
      if (!c) return o;
      o.coarse = std::move(*c);
    }
    o.fine = std::move(*fine);
    o.alive = true;
    return o;
  });
  PathTable t;
  t.columns = std::move(columns);
  for (auto& o : outcomes) {
    t.alive.push_back(o.alive ? 1 : 0);
    t.fine.push_back(std::move(o.fine));
    if (halve) t.coarse.push_back(std::move(o.coarse));
  }
  return t;
}

inline std::vector<double> column(const PathTable& t, int c, bool coarse = false) {
  std::vector<double> out;
  const auto& rows = coarse ? t.coarse : t.fine;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (t.alive[i]) out.push_back(rows[i][c]);
  }
  return out;
}

inline Estimate column_estimate(const PathTable& t, int c, bool coarse = false) { return estimate_of(column(t, c, coarse)); }

/// |mean on the dt grid - mean on the 2 dt grid|, or 0 without halving.
inline double dt_bias(const PathTable& t, int c) {
  if (t.coarse.empty()) return 0.0;
  return std::abs(column_estimate(t, c).mean - column_estimate(t, c, true).mean);
}

inline double column_max(const PathTable& t, int c) {
  double m = 0.0;
  for (double x : column(t, c)) m = std::max(m, std::abs(x));
  return m;
}

inline McReport start_report(const std::string& kind, const McConfig& cfg, const McSetup& s) {
  McReport r;
  r.kind = kind;
  r.scenario = s.sc.name;
  r.n_paths = cfg.n_paths;
  r.t = cfg.t;
  r.dt = cfg.dt;
  r.seed = cfg.seed;
  return r;
}

/// Fills alive/dropped and throws McFailure below the survival threshold.
inline void account(McReport& r, PathTable table) {
  r.alive = static_cast<int>(std::count(table.alive.begin(), table.alive.end(), 1));
  r.dropped = r.n_paths - r.alive;
  r.paths = std::move(table);
  if (r.alive < kMinAliveFraction * r.n_paths) {
    throw McFailure(r, std::to_string(r.alive) + " of " + std::to_string(r.n_paths) + " paths survived");
  }
}

inline void finish(McReport& r, std::chrono::steady_clock::time_point start) {
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline Quantity quantity(std::string name, const Estimate& e, double k, Provenance p = Provenance::Statistical) {
  return Quantity{std::move(name), e.mean, e.se, k * e.se, p};
}

inline double g_norm(const Mat& g, const Vec& v) { return std::sqrt(std::max(0.0, v.dot(g * v))); }

/// Points visited by a few pilot paths (plus x0), used to test pointwise hypotheses.
inline std::vector<Point> probe_points(const McConfig& cfg, const McSetup& s, int paths, int per_path) {
  std::vector<Point> out{s.x0};
  const auto& sys = s.sc.system;
  for (int i = 0; i < paths; ++i) {
    const NoiseGrid g = sample_noise(splitmix64(cfg.seed) ^ 0x70b3e5ULL, static_cast<std::uint64_t>(i), s.steps, cfg.dt, sys.noise_dim);
    const FlowPath path = integrate_flow(sys, s.x0, g);
    const int last = static_cast<int>(path.x.size()) - 1;
    for (int k = 1; k <= per_path && last > 0; ++k) out.push_back(path.x[(k * last) / per_path]);
  }
  return out;
}

}  // namespace detail

/// d/dtheta0 of E f(theta0 + B_t) for f on the unit circle y = (cos, sin):
/// the wrapped heat kernel truncated to `terms` images, integrated by the
/// periodic trapezoidal rule.
inline double circle_heat_gradient(const std::function<double(double)>& f, double theta0, double t, int terms = 7, int nodes = 4096) {
  const int half = terms / 2;
  const double h = 2.0 * std::numbers::pi / nodes;
  std::vector<double> parts(nodes);
  for (int q = 0; q < nodes; ++q) {
    const double u = -std::numbers::pi + q * h;  // theta - theta0
    double dk = 0.0;
    for (int k = -half; k <= half; ++k) {
      const double w = u + 2.0 * std::numbers::pi * k;
      dk += w / t * std::exp(-w * w / (2.0 * t)) / std::sqrt(2.0 * std::numbers::pi * t);
    }
    parts[q] = f(theta0 + u) * dk * h;
  }
  return pairwise_sum(parts);
}

/// E f(theta0 + B_t) with the same truncated kernel.
inline double circle_heat_value(const std::function<double(double)>& f, double theta0, double t, int terms = 7, int nodes = 4096) {
  const int half = terms / 2;
  const double h = 2.0 * std::numbers::pi / nodes;
  std::vector<double> parts(nodes);
  for (int q = 0; q < nodes; ++q) {
    const double u = -std::numbers::pi + q * h;
    double k_sum = 0.0;
    for (int k = -half; k <= half; ++k) {
      const double w = u + 2.0 * std::numbers::pi * k;
      k_sum += std::exp(-w * w / (2.0 * t)) / std::sqrt(2.0 * std::numbers::pi * t);
    }
    parts[q] = f(theta0 + u) * k_sum * h;
  }
  return pairwise_sum(parts);
}

/// E[f(x_t) <T xi_t v0 - W_t v0, //^_t u>] over a panel of test functions and
/// adjoint-transported g-orthonormal frame vectors u; the theorem forces
/// every entry to vanish. The constant function gives the unconditional mean.
inline McReport filtered_expectation_check(const McConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const McSetup s = prepare(cfg);
  const auto& sys = s.sc.system;
  const int n = sys.dim;
  const Mat frame0 = orthonormal_frame(induced_metric(sys, s.x0).g);
  const int nf = static_cast<int>(s.functions.size());
  std::vector<std::string> cols;
  for (int b = 0; b < n; ++b) cols.push_back("mean_u" + std::to_string(b + 1));
  for (int f = 0; f < nf; ++f)
    for (int b = 0; b < n; ++b) cols.push_back("cov_f" + std::to_string(f + 1) + "_u" + std::to_string(b + 1));
  cols.push_back("abs_difference");
  PathOptions opt;
  opt.jacobian = true;
  opt.filtered = true;
  opt.adjoint_transport = true;
  auto table = detail::simulate(cfg, s, cols, true, [&](const NoiseGrid& noise) -> detail::PathValues {
    const PathResult r = run_path(sys, s.x0, noise, opt);
    if (!r.alive) return std::nullopt;
    const Mat g = induced_metric(sys, r.last).g;
    const Vec d = (r.state.J - r.state.W) * s.v0;
    const Mat u = r.state.adjoint_transport * frame0;
    std::vector<double> out;
    Vec inner(n);
    for (int b = 0; b < n; ++b) inner(b) = u.col(b).dot(g * d);
    for (int b = 0; b < n; ++b) out.push_back(inner(b));
    for (int f = 0; f < nf; ++f) {
      const double fx = s.functions[f](sys, r.last);
      for (int b = 0; b < n; ++b) out.push_back(fx * inner(b));
    }
    out.push_back(detail::g_norm(g, d));
    return out;
  });
  McReport rep = detail::start_report("filtered", cfg, s);
  detail::account(rep, std::move(table));
  const PathTable& t = rep.paths;
  for (int c = 0; c + 1 < static_cast<int>(cols.size()); ++c) {
    const Estimate e = detail::column_estimate(t, c);
    std::string name = c < n ? "E<Jv-Wv, u" + std::to_string(c + 1) + ">"
                             : "E[f(x_t)<Jv-Wv, u" + std::to_string((c - n) % n + 1) + ">] f=" + s.functions[(c - n) / n].source;
    rep.checks.push_back(make_check(name, e.mean, e.se, 0.0, Provenance::Analytic, Relation::Equal, cfg.k_se, detail::dt_bias(t, c)));
  }
  const int last = static_cast<int>(cols.size()) - 1;
  rep.quantities.push_back(detail::quantity("mean |Jv-Wv|", detail::column_estimate(t, last), cfg.k_se));
  rep.quantities.push_back(Quantity{"max |Jv-Wv|", detail::column_max(t, last), 0.0, 0.0, Provenance::Statistical});
  rep.notes.push_back("frame u: adjoint transport of a g-orthonormal frame at x0");
  detail::finish(rep, start);
  return rep;
}

/// d(P_t f)(v0) from (1/t) E[f(x_t) int <W_s v0, //_s dB~_s>] against a
/// common-random-numbers central difference, and on the circle against the
/// wrapped heat-kernel series.
inline McReport bismut_gradient(const McConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const McSetup s = prepare(cfg);
  if (s.functions.empty()) throw Error(Errc::ConfigError, "functions: the Bismut check needs at least one test function");
  const auto& sys = s.sc.system;
  const Mat g0 = induced_metric(sys, s.x0).g;
  const int nf = static_cast<int>(s.functions.size());
  std::vector<std::string> cols;
  for (int f = 0; f < nf; ++f) {
    const std::string k = std::to_string(f + 1);
    cols.insert(cols.end(), {"bismut_f" + k, "fd_f" + k, "diff_f" + k});
  }
  PathOptions opt;
  opt.filtered = true;
  opt.decomposition = true;
  const Point plus = moved(s.x0, Vec(s.x0.x + cfg.epsilon * s.v0));
  const Point minus = moved(s.x0, Vec(s.x0.x - cfg.epsilon * s.v0));
  auto table = detail::simulate(cfg, s, cols, true, [&](const NoiseGrid& noise) -> detail::PathValues {
    double integral = 0.0;
    auto observer = [&](const StepView& v) {
      // <//^-1 W_k v0, dB~_k>_{x0} with dB~ the LW anti-development increment.
      const Vec d_breve = v.after.B_breve - v.before.B_breve;
      const Vec back = v.before.lw_transport.partialPivLu().solve(Vec(v.before.W * s.v0));
      integral += back.dot(g0 * d_breve);
    };
    const PathResult r = run_path(sys, s.x0, noise, opt, observer);
    if (!r.alive) return std::nullopt;
    const auto ep = flow_endpoint(sys, plus, noise);
    const auto em = flow_endpoint(sys, minus, noise);
    if (!ep || !em) return std::nullopt;
    std::vector<double> out;
    for (int f = 0; f < nf; ++f) {
      const double b = s.functions[f](sys, r.last) * integral / cfg.t;
      const double fd = (s.functions[f](sys, *ep) - s.functions[f](sys, *em)) / (2.0 * cfg.epsilon);
      out.insert(out.end(), {b, fd, b - fd});
    }
    return out;
  });
  McReport rep = detail::start_report("bismut", cfg, s);
  detail::account(rep, std::move(table));
  const PathTable& t = rep.paths;
  for (int f = 0; f < nf; ++f) {
    const std::string& src = s.functions[f].source;
    const Estimate b = detail::column_estimate(t, 3 * f);
    const Estimate fd = detail::column_estimate(t, 3 * f + 1);
    const Estimate diff = detail::column_estimate(t, 3 * f + 2);
    rep.quantities.push_back(detail::quantity("bismut f=" + src, b, cfg.k_se));
    rep.quantities.push_back(detail::quantity("finite difference f=" + src, fd, cfg.k_se));
    rep.checks.push_back(make_check("bismut - finite difference, f=" + src, diff.mean, diff.se, 0.0, Provenance::DerivedOracle,
                                    Relation::Equal, cfg.k_se, detail::dt_bias(t, 3 * f + 2)));
    if (s.sc.name == "circle") {
      const auto& fn = s.functions[f];
      auto on_circle = [&](double theta) {
        Vec y(2);
        y << std::cos(theta), std::sin(theta);
        return expr::eval(fn.e, y);
      };
      const double theta0 = std::atan2(sys.embedded(s.x0)(1), sys.embedded(s.x0)(0));
      const double series = s.v0(0) * circle_heat_gradient(on_circle, theta0, cfg.t);
      rep.checks.push_back(make_check("bismut vs wrapped-Gaussian series, f=" + src, b.mean, b.se, series, Provenance::DerivedOracle,
                                      Relation::Equal, cfg.k_se, detail::dt_bias(t, 3 * f)));
    }
  }
  rep.notes.push_back("endpoint conditioning replaced by integration against f(x_t)");
  rep.notes.push_back("finite difference: central, epsilon = " + expr::detail::format_number(cfg.epsilon) + ", shared increments");
  detail::finish(rep, start);
  return rep;
}

/// Checks that the adjoint connection is metric at x0 and along pilot paths.
inline double adjoint_metricity_residual(const McConfig& cfg, const McSetup& s) {
  Rng rng(cfg.seed, 0xad701ULL);
  double worst = 0.0;
  for (const Point& p : detail::probe_points(cfg, s, 4, 5)) {
    const Tensor3 adj = adjoint_christoffel(lw_christoffel(s.sc.system, p));
    worst = std::max(worst, metricity_check(s.sc.system, p, adj, rng, 5).residual);
  }
  return worst;
}

inline constexpr double kMetricityTolerance = 1e-6;

/// E e^{(p/2) int h_p_min} <= E|T xi_t|^p <= n E e^{(p/2) int h_p_max}
/// for the operator norm, and the same without the factor n for a fixed
/// unit vector v0; all terms on shared paths, left Riemann sums in time.
inline McReport moment_sandwich(const McConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const McSetup s = prepare(cfg);
  const auto& sys = s.sc.system;
  const double residual = adjoint_metricity_residual(cfg, s);
  if (!(residual < kMetricityTolerance)) {
    throw Error(Errc::NotApplicable, "the adjoint connection is not metric (residual " + expr::detail::format_number(residual) + ")");
  }
  const int n = sys.dim;
  const double p = cfg.p;
  const Metric m0 = induced_metric(sys, s.x0);
  const Mat frame0 = orthonormal_frame(m0.g);
  const Vec v0 = s.v0 / detail::g_norm(m0.g, s.v0);
  const std::vector<std::string> cols{"moment_operator", "moment_fixed",      "lower",           "upper",
                                      "op_minus_lower",  "n_upper_minus_op", "fixed_minus_lower", "upper_minus_fixed"};
  PathOptions opt;
  opt.jacobian = true;
  auto table = detail::simulate(cfg, s, cols, true, [&](const NoiseGrid& noise) -> detail::PathValues {
    double int_lo = 0.0;
    double int_hi = 0.0;
    auto observer = [&](const StepView& v) {
      const Jet& j = v.at;
      const Tensor3 lw = lw_christoffel_from(j.dX, j.m.Y);
      const HpForms f = hp_forms(j.m, j.A, j.dX, j.dA, lw, ricci(curvature_lw_direct_tensor(j.dX, j.m), j.m.g));
      const HpExtremes e = h_p_extremes(f, p);
      int_lo += e.lower * v.dt;
      int_hi += e.upper * v.dt;
    };
    const PathResult r = run_path(sys, s.x0, noise, opt, observer);
    if (!r.alive) return std::nullopt;
    const Mat gt = induced_metric(sys, r.last).g;
    const Mat framet = orthonormal_frame(gt);
    const Mat in_frames = framet.partialPivLu().solve(Mat(r.state.J * frame0));
    const double op = std::pow(max_singular_value(in_frames), p);
    const double fixed = std::pow(detail::g_norm(gt, Vec(r.state.J * v0)), p);
    const double lower = std::exp(0.5 * p * int_lo);
    const double upper = std::exp(0.5 * p * int_hi);
    return std::vector<double>{op, fixed, lower, upper, op - lower, n * upper - op, fixed - lower, upper - fixed};
  });
  McReport rep = detail::start_report("moments", cfg, s);
  detail::account(rep, std::move(table));
  const PathTable& t = rep.paths;
  const char* names[] = {"E|T xi_t|^p (operator norm)", "E|T xi_t v0|^p", "E exp((p/2) int h_p min)", "E exp((p/2) int h_p max)"};
  for (int c = 0; c < 4; ++c) rep.quantities.push_back(detail::quantity(names[c], detail::column_estimate(t, c), cfg.k_se));
  auto add = [&](const std::string& name, int c) {
    const Estimate e = detail::column_estimate(t, c);
    rep.checks.push_back(make_check(name, e.mean, e.se, 0.0, Provenance::Statistical, Relation::AtLeast, cfg.k_se, detail::dt_bias(t, c)));
  };
  add("operator norm: moment - lower bound", 4);
  add("operator norm: n * upper bound - moment", 5);
  add("fixed v0: moment - lower bound", 6);
  add("fixed v0: upper bound - moment", 7);
  rep.quantities.push_back(Quantity{"adjoint metricity residual", residual, 0.0, kMetricityTolerance, Provenance::DerivedOracle});
  rep.notes.push_back("operator norm: largest singular value of J in g-orthonormal frames at x0 and x_t");
  rep.notes.push_back("exponent (p/2) int h_p, left Riemann sum on the simulation grid");
  detail::finish(rep, start);
  return rep;
}

/// (E f(x_t) - f(x0)) / t against the LW and Levi-Civita generator forms.
inline McReport generator_check(const McConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const McSetup s = prepare(cfg);
  if (s.functions.empty()) throw Error(Errc::ConfigError, "functions: the generator check needs at least one test function");
  const auto& sys = s.sc.system;
  const int nf = static_cast<int>(s.functions.size());
  const bool halve = s.steps % 2 == 0;
  const int half = s.steps / 2;
  std::vector<std::string> cols;
  for (int f = 0; f < nf; ++f) {
    cols.push_back("rate_f" + std::to_string(f + 1));
    cols.push_back("half_rate_f" + std::to_string(f + 1));
  }
  std::vector<double> f0(nf);
  for (int f = 0; f < nf; ++f) f0[f] = s.functions[f](sys, s.x0);
  auto table = detail::simulate(cfg, s, cols, false, [&](const NoiseGrid& noise) -> detail::PathValues {
    std::vector<double> at_half(nf, 0.0);
    auto observer = [&](const StepView& v) {
      if (v.k + 1 == half) {
        for (int f = 0; f < nf; ++f) at_half[f] = s.functions[f](sys, v.next.at);
      }
    };
    const PathResult r = run_path(sys, s.x0, noise, PathOptions{}, halve ? StepObserver(observer) : StepObserver());
    if (!r.alive) return std::nullopt;
    std::vector<double> out;
    for (int f = 0; f < nf; ++f) {
      out.push_back((s.functions[f](sys, r.last) - f0[f]) / cfg.t);
      out.push_back(halve ? (at_half[f] - f0[f]) / (0.5 * cfg.t) : 0.0);
    }
    return out;
  });
  McReport rep = detail::start_report("generator", cfg, s);
  detail::account(rep, std::move(table));
  const PathTable& t = rep.paths;
  for (int f = 0; f < nf; ++f) {
    const std::string& src = s.functions[f].source;
    const ScalarField field = s.functions[f].chart_field(sys, s.x0);
    const double lw = generator_lw(sys, s.x0, field);
    const double lc = generator_lc(sys, s.x0, field);
    const double hoer = generator_hoermander(sys, s.x0, field);
    const Estimate e = detail::column_estimate(t, 2 * f);
    const Estimate eh = detail::column_estimate(t, 2 * f + 1);
    // rate(t) = Af + C t / 2 + ..., so the bias at t is twice the half-time gap.
    const double bias = halve ? 2.0 * std::abs(e.mean - eh.mean) : 0.0;
    rep.checks.push_back(make_check("LW form - Levi-Civita form, f=" + src, lw - lc, 0.0, 0.0, Provenance::DerivedOracle,
                                    Relation::Equal, cfg.k_se, 0.0, 1e-6));
    rep.checks.push_back(make_check("LW form - Hoermander form, f=" + src, lw - hoer, 0.0, 0.0, Provenance::DerivedOracle,
                                    Relation::Equal, cfg.k_se, 0.0, 1e-6));
    rep.checks.push_back(make_check("MC rate vs LW form, f=" + src, e.mean, e.se, lw, Provenance::DerivedOracle, Relation::Equal, cfg.k_se, bias));
    rep.checks.push_back(make_check("MC rate vs Levi-Civita form, f=" + src, e.mean, e.se, lc, Provenance::DerivedOracle, Relation::Equal, cfg.k_se, bias));
    rep.quantities.push_back(detail::quantity("MC rate at t/2, f=" + src, eh, cfg.k_se));
  }
  if (!halve) rep.notes.push_back("odd step count: no t-halving bias estimate");
  detail::finish(rep, start);
  return rep;
}

/// (E phi_{x_t}(T xi_t v0) - phi(v0)) / t against the Weitzenbock trace form
/// and the codifferential form of the generator on 1-forms.
inline McReport one_form_semigroup_check(const McConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const McSetup s = prepare(cfg);
  if (s.forms.empty()) throw Error(Errc::ConfigError, "forms: the 1-form check needs at least one form");
  const auto& sys = s.sc.system;
  const int nf = static_cast<int>(s.forms.size());
  const bool halve = s.steps % 2 == 0;
  const int half = s.steps / 2;
  std::vector<std::string> cols;
  for (int f = 0; f < nf; ++f) {
    cols.push_back("rate_phi" + std::to_string(f + 1));
    cols.push_back("half_rate_phi" + std::to_string(f + 1));
  }
  std::vector<double> phi0(nf);
  for (int f = 0; f < nf; ++f) phi0[f] = s.forms[f](sys, s.x0, s.v0);
  PathOptions opt;
  opt.jacobian = true;
  auto table = detail::simulate(cfg, s, cols, false, [&](const NoiseGrid& noise) -> detail::PathValues {
    std::vector<double> at_half(nf, 0.0);
    auto observer = [&](const StepView& v) {
      if (v.k + 1 == half) {
        const Vec jv = v.after.J * s.v0;
        for (int f = 0; f < nf; ++f) at_half[f] = s.forms[f](sys, v.next.at, jv);
      }
    };
    const PathResult r = run_path(sys, s.x0, noise, opt, halve ? StepObserver(observer) : StepObserver());
    if (!r.alive) return std::nullopt;
    const Vec jv = r.state.J * s.v0;
    std::vector<double> out;
    for (int f = 0; f < nf; ++f) {
      out.push_back((s.forms[f](sys, r.last, jv) - phi0[f]) / cfg.t);
      out.push_back(halve ? (at_half[f] - phi0[f]) / (0.5 * cfg.t) : 0.0);
    }
    return out;
  });
  McReport rep = detail::start_report("oneform", cfg, s);
  detail::account(rep, std::move(table));
  const PathTable& t = rep.paths;
  for (int f = 0; f < nf; ++f) {
    const std::string label = s.forms[f].label();
    const FormField field = s.forms[f].chart_field(sys, s.x0);
    const double weitz = weitzenbock_rhs_1form(sys, s.x0, field, s.v0);
    const double hodge = hodge_rhs_1form(sys, s.x0, field, s.v0);
    const Estimate e = detail::column_estimate(t, 2 * f);
    const Estimate eh = detail::column_estimate(t, 2 * f + 1);
    const double bias = halve ? 2.0 * std::abs(e.mean - eh.mean) : 0.0;
    rep.checks.push_back(make_check("trace form - codifferential form, phi=" + label, weitz - hodge, 0.0, 0.0, Provenance::DerivedOracle,
                                    Relation::Equal, cfg.k_se, 0.0, 1e-5 * std::max(1.0, std::abs(weitz))));
    rep.checks.push_back(make_check("MC rate vs trace form, phi=" + label, e.mean, e.se, weitz, Provenance::DerivedOracle, Relation::Equal,
                                    cfg.k_se, bias));
    rep.checks.push_back(make_check("MC rate vs codifferential form, phi=" + label, e.mean, e.se, hodge, Provenance::DerivedOracle,
                                    Relation::Equal, cfg.k_se, bias));
    rep.quantities.push_back(detail::quantity("MC rate at t/2, phi=" + label, eh, cfg.k_se));
  }
  if (!halve) rep.notes.push_back("odd step count: no t-halving bias estimate");
  detail::finish(rep, start);
  return rep;
}

/// Smallest eigenvalue of the symmetric part of <(Ric# - 2 nabla A) v, v>
/// over the g-unit sphere, minimised over probe points.
inline double bochner_gap(const SdeSystem& sys, const std::vector<Point>& probes) {
  double lambda = 1e300;
  for (const Point& p : probes) {
    const Jet j = make_jet(sys, p, JetRequest{true, false, true});
    const Mat op = j.ric_sharp - 2.0 * j.nabla_A;
    lambda = std::min(lambda, form_eigenvalues(Mat(j.m.g * op), j.m.g)(0));
  }
  return lambda;
}

inline constexpr double kBochnerSlack = 0.1;

/// Least-squares slope of log|W_s v0| over [0, t]; the decay mechanism
/// predicts a slope at most -lambda / 2.
inline McReport bochner_decay_check(const McConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const McSetup s = prepare(cfg);
  const auto& sys = s.sc.system;
  const double lambda = bochner_gap(sys, detail::probe_points(cfg, s, 8, 25));
  if (!(lambda > 1e-9)) {
    throw Error(Errc::NotApplicable, "Ric# - 2 nabla A is not positive on the probes (gap " + expr::detail::format_number(lambda) + ")");
  }
  PathOptions opt;
  opt.filtered = true;
  auto table = detail::simulate(cfg, s, {"slope"}, false, [&](const NoiseGrid& noise) -> detail::PathValues {
    std::vector<double> ts{0.0};
    std::vector<double> ys{std::log(detail::g_norm(induced_metric(sys, s.x0).g, s.v0))};
    auto observer = [&](const StepView& v) {
      ts.push_back((v.k + 1) * v.dt);
      ys.push_back(std::log(detail::g_norm(v.next.m.g, Vec(v.after.W * s.v0))));
    };
    const PathResult r = run_path(sys, s.x0, noise, opt, observer);
    if (!r.alive) return std::nullopt;
    const double tm = pairwise_sum(ts) / ts.size();
    const double ym = pairwise_sum(ys) / ys.size();
    std::vector<double> sxy(ts.size());
    std::vector<double> sxx(ts.size());
    for (std::size_t k = 0; k < ts.size(); ++k) {
      sxy[k] = (ts[k] - tm) * (ys[k] - ym);
      sxx[k] = (ts[k] - tm) * (ts[k] - tm);
    }
    return std::vector<double>{pairwise_sum(sxy) / pairwise_sum(sxx)};
  });
  McReport rep = detail::start_report("bochner", cfg, s);
  detail::account(rep, std::move(table));
  const Estimate e = detail::column_estimate(rep.paths, 0);
  rep.checks.push_back(make_check("decay slope of log|W_t v0|", e.mean, e.se, -0.5 * lambda, Provenance::DerivedOracle, Relation::AtMost,
                                  cfg.k_se, 0.0, kBochnerSlack));
  rep.quantities.push_back(Quantity{"spectral gap lambda", lambda, 0.0, 0.0, Provenance::DerivedOracle});
  rep.notes.push_back("gap minimised over x0 and points visited by 8 pilot paths");
  detail::finish(rep, start);
  return rep;
}

inline constexpr double kReconstructionTolerance = 1e-10;
inline constexpr double kQuadraticVariationTolerance = 0.1;

/// Pathwise reconstruction of the driving noise from the decomposed parts,
/// quadratic variation of B-bar and the cross variation of B~ and beta.
inline McReport decompose_check(const McConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const McSetup s = prepare(cfg);
  const auto& sys = s.sc.system;
  const int m = sys.noise_dim;
  std::vector<std::string> cols{"reconstruction_error"};
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) cols.push_back("qv_" + std::to_string(i + 1) + std::to_string(j + 1));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) cols.push_back("cross_" + std::to_string(i + 1) + std::to_string(j + 1));
  PathOptions opt;
  opt.decomposition = true;
  auto table = detail::simulate(cfg, s, cols, false, [&](const NoiseGrid& noise) -> detail::PathValues {
    const PathResult r = run_path(sys, s.x0, noise, opt);
    if (!r.alive) return std::nullopt;
    std::vector<double> out{r.state.reconstruction_error};
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) out.push_back(r.state.qv_bar(i, j));
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) out.push_back(r.state.cross_tilde_beta(i, j));
    return out;
  });
  McReport rep = detail::start_report("decompose", cfg, s);
  detail::account(rep, std::move(table));
  const PathTable& t = rep.paths;
  rep.checks.push_back(make_check("max pathwise |B - int //~ dB-bar|", detail::column_max(t, 0), 0.0, 0.0, Provenance::Analytic,
                                  Relation::Equal, cfg.k_se, 0.0, kReconstructionTolerance));
  Mat qv(m, m);
  Mat cross(m, m);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      qv(i, j) = detail::column_estimate(t, 1 + i * m + j).mean;
      cross(i, j) = detail::column_estimate(t, 1 + m * m + i * m + j).mean;
    }
  }
  rep.checks.push_back(make_check("|E[B-bar, B-bar]_t - t I|_F", (qv - cfg.t * Mat::Identity(m, m)).norm(), 0.0, 0.0, Provenance::Analytic,
                                  Relation::Equal, cfg.k_se, 0.0, kQuadraticVariationTolerance));
  rep.checks.push_back(make_check("|E[B~, beta]_t|_F", cross.norm(), 0.0, 0.0, Provenance::Analytic, Relation::Equal, cfg.k_se, 0.0,
                                  kQuadraticVariationTolerance));
  for (int i = 0; i < m; ++i) {
    const Estimate e = detail::column_estimate(t, 1 + i * m + i);
    rep.quantities.push_back(detail::quantity("E[B-bar, B-bar]_t (" + std::to_string(i + 1) + "," + std::to_string(i + 1) + ")", e, cfg.k_se));
  }
  rep.notes.push_back("bracket averaged over paths, discrete sums of increment products");
  detail::finish(rep, start);
  return rep;
}

/// Pathwise residual of the Ito formula for |J_t v0|^p (g-norm): the
/// endpoint value minus |v0|^p, the martingale sum
/// p |v|^{p-2} <v, nabla X(v) dB> and the drift sum (p/2) |v|^{p-2} H_p(v, v) dt,
/// all at the left point of each step.
inline double ito_moment_residual(const SdeSystem& sys, const Point& x0, const Vec& v0, const NoiseGrid& noise, double p) {
  double mart = 0.0;
  double drift = 0.0;
  auto observer = [&](const StepView& v) {
    const Jet& j = v.at;
    const Vec w = v.before.J * v0;
    const double sq = w.dot(j.m.g * w);
    const double pw = std::pow(sq, 0.5 * (p - 2.0));
    const Mat nx = lw_dX(j.dX, j.m, w);
    mart += p * pw * w.dot(j.m.g * (nx * v.dB));
    const Tensor3 lw = lw_christoffel_from(j.dX, j.m.Y);
    const HpForms f = hp_forms(j.m, j.A, j.dX, j.dA, lw, ricci(curvature_lw_direct_tensor(j.dX, j.m), j.m.g));
    drift += 0.5 * p * pw * h_p(f, w, p) * v.dt;
  };
  PathOptions opt;
  opt.jacobian = true;
  const PathResult r = run_path(sys, x0, noise, opt, observer);
  if (!r.alive) throw Error(Errc::ChartExit, "path left the domain");
  const double start = std::pow(v0.dot(induced_metric(sys, x0).g * v0), 0.5 * p);
  const Vec w = r.state.J * v0;
  const double end = std::pow(w.dot(induced_metric(sys, r.last).g * w), 0.5 * p);
  return end - start - mart - drift;
}

/// Dispatch by check name: filtered, bismut, moments, generator, oneform, bochner, decompose.
inline McReport run_check(const std::string& kind, const McConfig& cfg) {
  if (kind == "filtered") return filtered_expectation_check(cfg);
  if (kind == "bismut") return bismut_gradient(cfg);
  if (kind == "moments") return moment_sandwich(cfg);
  if (kind == "generator") return generator_check(cfg);
  if (kind == "oneform") return one_form_semigroup_check(cfg);
  if (kind == "bochner") return bochner_decay_check(cfg);
  if (kind == "decompose") return decompose_check(cfg);
  throw Error(Errc::ConfigError, "check: unknown check '" + kind + "'");
}

inline const std::vector<std::string>& check_kinds() {
  static const std::vector<std::string> kinds{"filtered", "bismut", "moments", "generator", "oneform", "bochner", "decompose"};
  return kinds;
}

}  // namespace sdegeom
