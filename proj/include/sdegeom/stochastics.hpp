#pragma once

// Pathwise simulation on one noise grid: the Stratonovich flow, its
// derivative flow, parallel transports for the LW / adjoint / Levi-Civita
// connections, the decomposition of the driving noise, the covariant Ito
// form of the derivative flow and the filtered flow.
//
// Everything is advanced by a single step loop (run_path) so that all
// quantities see the same increments, predictor points and chart switches.
// Stratonovich equations use Heun with the velocities
//   vel_k = X(x_k) dB_k + A(x_k) dt,   vel*_k = X(x*_k) dB_k + A(x*_k) dt,
// explicitly Ito ones use left-point sums.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "sdegeom/error.hpp"
#include "sdegeom/geometry.hpp"
#include "sdegeom/model.hpp"
#include "sdegeom/numeric.hpp"
#include "sdegeom/random.hpp"

namespace sdegeom {

struct NoiseGrid {
  double dt = 0.0;
  int steps = 0;
  int m = 0;
  std::uint64_t seed = 0;
  std::uint64_t path_index = 0;
  std::vector<Vec> dB;

  /// The grid with dt doubled: increments summed in consecutive pairs.
  NoiseGrid coarsen() const {
    if (steps % 2 != 0) throw Error(Errc::BadParams, "cannot coarsen an odd number of steps");
    NoiseGrid out{2.0 * dt, steps / 2, m, seed, path_index, {}};
    out.dB.reserve(out.steps);
    for (int k = 0; k < out.steps; ++k) out.dB.push_back(Vec(dB[2 * k] + dB[2 * k + 1]));
    return out;
  }
};

/// Increments N(0, dt I_m) from stream (seed, path_index), drawn step by
/// step, coordinate by coordinate.
inline NoiseGrid sample_noise(std::uint64_t seed, std::uint64_t path_index, int steps, double dt, int m) {
  if (!(dt > 0.0)) throw Error(Errc::BadParams, "dt must be positive");
  NoiseGrid grid{dt, steps, m, seed, path_index, {}};
  grid.dB.reserve(steps);
  Rng rng(seed, path_index);
  const double sd = std::sqrt(dt);
  for (int k = 0; k < steps; ++k) grid.dB.push_back(Vec(sd * rng.normal_vec(m)));
  return grid;
}

/// Coefficients and their first derivatives at one point.
struct Jet {
  Point at;
  Metric m;
  Vec A;
  std::vector<Mat> dX;
  std::vector<Vec> dA;
  bool has_derivatives = false;
  Tensor3 lc;
  bool has_lc = false;
  Mat ric_sharp;  // LW Ricci operator
  Mat nabla_A;    // column k: breve nabla A (e_k)
  bool has_curvature = false;

  /// Matrix with column j equal to DX(e_j) dB + DA(e_j) dt.
  Mat velocity_derivative(const Vec& dB, double dt) const {
    const int n = static_cast<int>(dX.size());
    Mat d(n, n);
    for (int j = 0; j < n; ++j) d.col(j) = dX[j] * dB + dA[j] * dt;
    return d;
  }

  /// The matrix v -> breve Gamma(vel, v) = -DX(vel) Y v.
  Mat lw_gamma(const Vec& vel) const {
    Mat d = Mat::Zero(m.X.rows(), m.X.cols());
    for (std::size_t j = 0; j < dX.size(); ++j) d += vel(static_cast<int>(j)) * dX[j];
    return -d * m.Y;
  }

  /// The matrix v -> hat Gamma(vel, v) = breve Gamma(v, vel) = -DX(v) Y vel.
  Mat adjoint_gamma(const Vec& vel) const {
    const int n = static_cast<int>(dX.size());
    const Vec yv = m.Y * vel;
    Mat h(n, n);
    for (int j = 0; j < n; ++j) h.col(j) = -dX[j] * yv;
    return h;
  }

  /// -1/2 Ric# + breve nabla A.
  Mat filtered_generator() const { return -0.5 * ric_sharp + nabla_A; }
};

struct JetRequest {
  bool derivatives = false;
  bool lc = false;
  bool curvature = false;
};

inline Jet make_jet(const SdeSystem& sys, const Point& at, const JetRequest& req) {
  Jet j;
  j.at = at;
  j.m = induced_metric(sys, at);
  j.A = sys.A_at(at);
  if (req.derivatives || req.lc || req.curvature) {
    j.dX = dX_slices(sys, at);
    j.dA = dA_slices(sys, at);
    j.has_derivatives = true;
  }
  if (req.lc) {
    j.lc = levi_civita_from_dX(j.m, j.dX);
    j.has_lc = true;
  }
  if (req.curvature) {
    j.ric_sharp = ricci(curvature_lw_direct_tensor(j.dX, j.m), j.m.g).sharp;
    const int n = sys.dim;
    const Tensor3 lw = lw_christoffel_from(j.dX, j.m.Y);
    j.nabla_A.resize(n, n);
    for (int k = 0; k < n; ++k) j.nabla_A.col(k) = j.dA[k] + lw.slice(k) * j.A;
    j.has_curvature = true;
  }
  return j;
}

/// Discretized trajectory. x has steps_done + 1 entries; x_pred, vel and
/// vel_pred are in the chart of x_k; a chart switch after step k maps the
/// coordinates of x_{k+1} into the chart stored in x[k + 1].
struct FlowPath {
  double dt = 0.0;
  std::vector<Point> x;
  std::vector<Vec> x_pred;
  std::vector<Vec> vel;
  std::vector<Vec> vel_pred;
  std::vector<Vec> dB;
  std::vector<std::pair<int, Mat>> switches;  // (step k, Jacobian)
  bool alive = true;
  int steps_done = 0;

  double time(int k) const { return k * dt; }
};

enum class Connection { LW, Adjoint, LeviCivita };

struct PathOptions {
  bool jacobian = false;
  bool lw_transport = false;
  bool adjoint_transport = false;
  bool lc_transport = false;
  bool decomposition = false;
  bool filtered = false;
  bool covariant_flow = false;  // Ito form in the adjoint-transported frame
  bool store_path = false;
  bool store_history = false;
  Vec v0;  // initial vector for covariant_flow
};

/// Per-path dynamic state. Vector-valued quantities are in the chart of
/// the current point; decomposed noises live in T_{x0}M or R^m.
struct PathState {
  Mat J;
  Mat lw_transport;
  Mat adjoint_transport;
  Mat lc_transport;
  Mat W;        // filtered flow, chart frame
  Mat w_frame;  // filtered flow in the adjoint-transported frame
  Vec v_cov;    // covariant Ito flow applied to v0

  Vec B;             // driving noise, R^m
  Vec B_breve;       // T_{x0}M coordinates
  Vec beta;          // R^m
  Vec B_tilde;       // R^m
  Vec B_bar;         // R^m
  Vec B_rebuilt;     // sum of tilde-transport * dB_bar
  Mat tilde_transport;
  Mat normal_basis;  // m x (m - n), orthonormal basis of N(x_k)
  Mat qv_bar;        // sum dB_bar dB_bar^T
  Mat cross_tilde_beta;  // sum dB_tilde dbeta^T
  double reconstruction_error = 0.0;
};

/// One step as seen by observers; states are before and after the update.
struct StepView {
  int k;
  double dt;
  const Vec& dB;
  const Jet& at;
  const Jet& pred;
  const Jet& next;
  const PathState& before;
  const PathState& after;
};

struct PathResult {
  FlowPath path;
  PathState state;
  std::vector<PathState> history;  // index k: state at time k dt
  bool alive = true;
  int steps_done = 0;
  Point last;
};

using StepObserver = std::function<void(const StepView&)>;

namespace detail {

inline Mat normal_basis_of(const Mat& p_n, int rank) {
  const int m = static_cast<int>(p_n.rows());
  if (rank == 0) return Mat(m, 0);
  Eigen::SelfAdjointEigenSolver<Mat> es(Mat(0.5 * (p_n + p_n.transpose())));
  // eigenvalues ascending: the last `rank` span N(x)
  Mat basis = es.eigenvectors().rightCols(rank);
  for (int c = 0; c < rank; ++c) {
    int piv = 0;
    basis.col(c).cwiseAbs().maxCoeff(&piv);
    if (basis(piv, c) < 0.0) basis.col(c) *= -1.0;
  }
  return basis;
}

inline void heun_transport(Mat& v, const Mat& gamma_at, const Mat& gamma_pred) {
  const Mat first = gamma_at * v;
  const Mat vp = v - first;
  v = v - 0.5 * (first + gamma_pred * vp);
}

inline bool inside(const SdeSystem& sys, const Point& p) {
  if (!sys.in_domain(p)) return false;
  if (!sys.compact && !(p.x.norm() < sys.guard_radius)) return false;
  return true;
}

}  // namespace detail

/// Advances the flow and every requested quantity along one noise grid.
/// With `replay`, positions are read from a stored path instead of integrated.
inline PathResult run_path(const SdeSystem& sys, const Point& x0, const NoiseGrid& noise, const PathOptions& opt,
                           const StepObserver& observer = {}, const FlowPath* replay = nullptr) {
  const int n = sys.dim;
  const int m = sys.noise_dim;
  if (noise.m != m) throw Error(Errc::BadParams, "noise dimension does not match the system");
  if (!detail::inside(sys, x0)) throw Error(Errc::ChartExit, "initial point is outside the chart domain");

  const bool want_decomp = opt.decomposition;
  const bool want_cov = opt.covariant_flow;
  const bool want_filtered = opt.filtered;
  const bool want_lw = opt.lw_transport || want_decomp;
  const bool want_adj = opt.adjoint_transport || want_cov || want_filtered;
  JetRequest req_at;
  req_at.derivatives = opt.jacobian || want_lw || want_adj || opt.lc_transport;
  req_at.lc = opt.lc_transport;
  req_at.curvature = want_cov || want_filtered;
  JetRequest req_pred;
  req_pred.derivatives = req_at.derivatives;
  req_pred.lc = opt.lc_transport;

  PathResult res;
  PathState& st = res.state;
  const Mat id = Mat::Identity(n, n);
  if (opt.jacobian) st.J = id;
  if (want_lw) st.lw_transport = id;
  if (want_adj) st.adjoint_transport = id;
  if (opt.lc_transport) st.lc_transport = id;
  if (want_filtered) {
    st.W = id;
    st.w_frame = id;
  }
  if (want_cov) {
    if (opt.v0.size() != n) throw Error(Errc::BadParams, "v0 has the wrong dimension");
    st.v_cov = opt.v0;
  }

  Jet jet_at = make_jet(sys, x0, req_at);
  const Jet jet0 = jet_at;
  if (want_decomp) {
    st.B = Vec::Zero(m);
    st.B_breve = Vec::Zero(n);
    st.beta = Vec::Zero(m);
    st.B_tilde = Vec::Zero(m);
    st.B_bar = Vec::Zero(m);
    st.B_rebuilt = Vec::Zero(m);
    st.normal_basis = detail::normal_basis_of(jet0.m.P_N, m - n);
    st.tilde_transport = Mat::Identity(m, m);
    st.qv_bar = Mat::Zero(m, m);
    st.cross_tilde_beta = Mat::Zero(m, m);
  }
  const Mat q0 = want_decomp ? st.normal_basis : Mat();

  FlowPath& path = res.path;
  path.dt = noise.dt;
  if (opt.store_path) path.x.push_back(x0);
  if (opt.store_history) res.history.push_back(st);

  std::size_t next_switch = 0;
  Point cur = x0;
  const double dt = noise.dt;
  for (int k = 0; k < noise.steps; ++k) {
    const Vec& dB = noise.dB[k];
    // Flow step (or replay of a stored one).
    Vec vel;
    Vec vel_pred;
    Vec x_pred;
    Point nxt;
    std::optional<Mat> sw;
    if (replay) {
      if (k >= replay->steps_done) break;
      vel = replay->vel[k];
      vel_pred = replay->vel_pred[k];
      x_pred = replay->x_pred[k];
      nxt = replay->x[k + 1];
      if (next_switch < replay->switches.size() && replay->switches[next_switch].first == k) {
        sw = replay->switches[next_switch].second;
        ++next_switch;
      }
    } else {
      vel = jet_at.m.X * dB + jet_at.A * dt;
      x_pred = cur.x + vel;
      const Point pp = moved(cur, x_pred);
      vel_pred = sys.X_at(pp) * dB + sys.A_at(pp) * dt;
      Vec xn = sys.group_step ? sys.group_step(cur, dB, dt) : Vec(cur.x + 0.5 * (vel + vel_pred));
      nxt = moved(cur, xn);
      if (detail::inside(sys, nxt) && sys.recharting) {
        if (auto change = sys.recharting(nxt)) {
          nxt = change->point;
          sw = change->jacobian;
        }
      }
      if (!detail::inside(sys, nxt)) {
        res.alive = false;
        break;
      }
    }
    const Jet jet_pred = req_pred.derivatives ? make_jet(sys, moved(cur, x_pred), req_pred) : Jet{};
    Jet jet_next = make_jet(sys, nxt, req_at);

    PathState before;
    if (observer) before = st;

    if (want_decomp) {
      // Ito sums with the LW transport at the left point.
      const Mat& lw = st.lw_transport;
      const Vec d_breve = lw.partialPivLu().solve(Vec(jet_at.m.X * dB));
      Mat tilde = jet_at.m.Y * lw * jet0.m.X;
      if (m > n) tilde += st.normal_basis * q0.transpose();
      const Eigen::PartialPivLU<Mat> lu(tilde);
      const Vec d_beta = lu.solve(Vec(jet_at.m.P_N * dB));
      const Vec d_tilde = jet0.m.Y * d_breve;
      const Vec d_bar = d_tilde + d_beta;
      st.B += dB;
      st.B_breve += d_breve;
      st.beta += d_beta;
      st.B_tilde += d_tilde;
      st.B_bar += d_bar;
      st.B_rebuilt += tilde * d_bar;
      st.tilde_transport = tilde;
      st.qv_bar += d_bar * d_bar.transpose();
      st.cross_tilde_beta += d_tilde * d_beta.transpose();
      st.reconstruction_error = std::max(st.reconstruction_error, (st.B_rebuilt - st.B).cwiseAbs().maxCoeff());
      if (m > n) st.normal_basis = polar_factor(Mat(jet_next.m.P_N * st.normal_basis));
    }

    const Mat adj_before = want_adj ? st.adjoint_transport : Mat();
    if (want_cov) {
      // Ito-Euler step of the covariant equation, then re-transport.
      const Vec& v = st.v_cov;
      const Vec incr = lw_dX(jet_at.dX, jet_at.m, v) * dB + jet_at.filtered_generator() * v * dt;
      st.v_cov = v + incr;  // still in the chart of x_k; mapped below
    }

    if (opt.jacobian) {
      const Mat d_at = jet_at.velocity_derivative(dB, dt);
      const Mat d_pred = jet_pred.velocity_derivative(dB, dt);
      const Mat first = d_at * st.J;
      st.J = st.J + 0.5 * (first + d_pred * (st.J + first));
    }
    if (want_lw) detail::heun_transport(st.lw_transport, jet_at.lw_gamma(vel), jet_pred.lw_gamma(vel_pred));
    if (want_adj) detail::heun_transport(st.adjoint_transport, jet_at.adjoint_gamma(vel), jet_pred.adjoint_gamma(vel_pred));
    if (opt.lc_transport) {
      detail::heun_transport(st.lc_transport, jet_at.lc.contract(vel), jet_pred.lc.contract(vel_pred));
    }
    if (sw) {
      const Mat& s = *sw;
      if (opt.jacobian) st.J = s * st.J;
      if (want_lw) st.lw_transport = s * st.lw_transport;
      if (want_adj) st.adjoint_transport = s * st.adjoint_transport;
      if (opt.lc_transport) st.lc_transport = s * st.lc_transport;
    }
    if (want_cov) {
      // v_{k+1} = P_{k+1} P_k^{-1} (v_k + increment)
      const Vec frame_coords = adj_before.partialPivLu().solve(st.v_cov);
      st.v_cov = st.adjoint_transport * frame_coords;
    }
    if (want_filtered) {
      const Mat& p0 = adj_before;
      const Mat& p1 = st.adjoint_transport;
      const Eigen::PartialPivLU<Mat> lu0(p0);
      const Eigen::PartialPivLU<Mat> lu1(p1);
      const Mat f0 = lu0.solve(Mat(jet_at.filtered_generator() * p0));
      const Mat f1 = lu1.solve(Mat(jet_next.filtered_generator() * p1));
      const Mat& w = st.w_frame;
      const Mat k0 = f0 * w;
      const Mat wp = w + dt * k0;
      st.w_frame = w + 0.5 * dt * (k0 + f1 * wp);
      st.W = p1 * st.w_frame;
    }

    if (opt.store_path) {
      path.x.push_back(nxt);
      path.x_pred.push_back(x_pred);
      path.vel.push_back(vel);
      path.vel_pred.push_back(vel_pred);
      path.dB.push_back(dB);
      if (sw) path.switches.emplace_back(k, *sw);
    }
    if (observer) observer(StepView{k, dt, dB, jet_at, jet_pred, jet_next, before, st});
    if (opt.store_history) res.history.push_back(st);
    jet_at = std::move(jet_next);
    cur = nxt;
    ++res.steps_done;
  }
  if (replay && res.steps_done < replay->steps_done) res.alive = false;
  if (replay && !replay->alive) res.alive = false;
  path.alive = res.alive;
  path.steps_done = res.steps_done;
  res.last = cur;
  return res;
}

/// Heun integration of the flow; positions only.
inline FlowPath integrate_flow(const SdeSystem& sys, const Point& x0, const NoiseGrid& noise) {
  PathOptions opt;
  opt.store_path = true;
  return run_path(sys, x0, noise, opt).path;
}

/// Endpoint of the flow without storing the trajectory; nullopt if the path died.
inline std::optional<Point> flow_endpoint(const SdeSystem& sys, const Point& x0, const NoiseGrid& noise) {
  PathResult r = run_path(sys, x0, noise, PathOptions{});
  if (!r.alive) return std::nullopt;
  return r.last;
}

inline NoiseGrid noise_of(const FlowPath& path) {
  NoiseGrid g;
  g.dt = path.dt;
  g.steps = path.steps_done;
  g.m = path.dB.empty() ? 0 : static_cast<int>(path.dB.front().size());
  g.dB = path.dB;
  return g;
}

/// Derivative flow J_k (variational equation, same Heun scheme).
inline std::vector<Mat> derivative_flow(const SdeSystem& sys, const FlowPath& path) {
  PathOptions opt;
  opt.jacobian = true;
  opt.store_history = true;
  const NoiseGrid g = noise_of(path);
  PathResult r = run_path(sys, path.x.front(), g, opt, {}, &path);
  std::vector<Mat> out;
  for (const auto& s : r.history) out.push_back(s.J);
  return out;
}

/// Transported frames P_k along the path for the chosen connection; P_0 = frame0.
inline std::vector<Mat> parallel_transport(const SdeSystem& sys, const FlowPath& path, Connection c, const Mat& frame0) {
  PathOptions opt;
  opt.lw_transport = c == Connection::LW;
  opt.adjoint_transport = c == Connection::Adjoint;
  opt.lc_transport = c == Connection::LeviCivita;
  opt.store_history = true;
  const NoiseGrid g = noise_of(path);
  PathResult r = run_path(sys, path.x.front(), g, opt, {}, &path);
  std::vector<Mat> out;
  for (const auto& s : r.history) {
    const Mat& t = c == Connection::LW ? s.lw_transport : c == Connection::Adjoint ? s.adjoint_transport : s.lc_transport;
    out.push_back(t * frame0);
  }
  return out;
}

/// A deterministic path through the given chart points (single chart):
/// velocities are the chord increments, so transports use the trapezoidal rule.
inline FlowPath path_through(const SdeSystem& sys, const std::vector<Point>& points) {
  FlowPath p;
  p.dt = 1.0;
  p.x = points;
  for (std::size_t k = 0; k + 1 < points.size(); ++k) {
    const Vec d = points[k + 1].x - points[k].x;
    p.x_pred.push_back(points[k + 1].x);
    p.vel.push_back(d);
    p.vel_pred.push_back(d);
    p.dB.push_back(Vec::Zero(sys.noise_dim));
  }
  p.steps_done = static_cast<int>(points.size()) - 1;
  return p;
}

struct Decomposition {
  std::vector<Vec> B_breve;
  std::vector<Vec> beta;
  std::vector<Vec> B_tilde;
  std::vector<Vec> B_bar;
  Mat qv_bar;
  Mat cross_tilde_beta;
  double reconstruction_error = 0.0;
};

inline Decomposition noise_decompose(const SdeSystem& sys, const FlowPath& path) {
  PathOptions opt;
  opt.decomposition = true;
  opt.store_history = true;
  const NoiseGrid g = noise_of(path);
  PathResult r = run_path(sys, path.x.front(), g, opt, {}, &path);
  Decomposition d;
  for (const auto& s : r.history) {
    d.B_breve.push_back(s.B_breve);
    d.beta.push_back(s.beta);
    d.B_tilde.push_back(s.B_tilde);
    d.B_bar.push_back(s.B_bar);
  }
  d.qv_bar = r.state.qv_bar;
  d.cross_tilde_beta = r.state.cross_tilde_beta;
  d.reconstruction_error = r.state.reconstruction_error;
  return d;
}

/// W_k along the path (deterministic given the path).
inline std::vector<Mat> filtered_flow(const SdeSystem& sys, const FlowPath& path) {
  PathOptions opt;
  opt.filtered = true;
  opt.store_history = true;
  const NoiseGrid g = noise_of(path);
  PathResult r = run_path(sys, path.x.front(), g, opt, {}, &path);
  std::vector<Mat> out;
  for (const auto& s : r.history) out.push_back(s.W);
  return out;
}

/// v_k from the covariant Ito equation in the adjoint-transported frame.
inline std::vector<Vec> covariant_derivative_flow(const SdeSystem& sys, const FlowPath& path, const Vec& v0) {
  PathOptions opt;
  opt.covariant_flow = true;
  opt.v0 = v0;
  opt.store_history = true;
  const NoiseGrid g = noise_of(path);
  PathResult r = run_path(sys, path.x.front(), g, opt, {}, &path);
  std::vector<Vec> out;
  for (const auto& s : r.history) out.push_back(s.v_cov);
  return out;
}

}  // namespace sdegeom
