#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "sdegeom/stochastics.hpp"

using namespace sdegeom;
using namespace testing_support;

namespace {

double max_abs(const Mat& a) { return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff(); }

Point start_point(const Scenario& sc) {
  if (sc.system.locate) {
    Vec y = Vec::Zero(sc.system.embed_dim);
    if (sc.name == "so3-left-invariant") {
      y(0) = y(4) = y(8) = 1.0;
    } else {
      y(0) = 0.6;
      y(sc.system.embed_dim - 1) = 0.8;
    }
    return sc.system.locate(y);
  }
  return sc.system.point(0, Vec(Vec::Constant(sc.system.dim, 0.3)));
}

}  // namespace

TEST(Noise, ReproducibleAndCoarsens) {
  const NoiseGrid a = sample_noise(9, 3, 64, 1e-2, 3);
  const NoiseGrid b = sample_noise(9, 3, 64, 1e-2, 3);
  for (int k = 0; k < 64; ++k) EXPECT_EQ(a.dB[k], b.dB[k]);
  const NoiseGrid c = a.coarsen();
  EXPECT_EQ(c.steps, 32);
  EXPECT_DOUBLE_EQ(c.dt, 2e-2);
  Vec sa = Vec::Zero(3);
  Vec sc = Vec::Zero(3);
  for (const auto& d : a.dB) sa += d;
  for (const auto& d : c.dB) sc += d;
  EXPECT_LT((sa - sc).norm(), 1e-14);
  EXPECT_THROW(sample_noise(1, 1, 3, 0.1, 2).coarsen(), Error);
}

TEST(Noise, IncrementVariance) {
  double s = 0.0;
  int count = 0;
  for (int path = 0; path < 20; ++path) {
    const NoiseGrid g = sample_noise(5, path, 500, 0.01, 2);
    for (const auto& d : g.dB) {
      s += d.squaredNorm();
      count += 2;
    }
  }
  // 20000 samples of dB^2 / dt: mean 1, sd sqrt(2 / 20000) ~ 0.01.
  EXPECT_NEAR(s / count / 0.01, 1.0, 0.05);
}

TEST(Flow, FlatIsTheDrivingNoise) {
  const auto sc = build_scenario("flat", {{"n", 2}});
  const NoiseGrid g = sample_noise(1, 0, 100, 0.01, 2);
  const FlowPath path = integrate_flow(sc.system, sc.system.point(0, vec({1, -1})), g);
  Vec b = vec({1, -1});
  for (int k = 0; k < 100; ++k) {
    b += g.dB[k];
    EXPECT_LT((path.x[k + 1].x - b).norm(), 1e-13);
  }
  const auto jac = derivative_flow(sc.system, path);
  EXPECT_EQ(jac.back(), Mat(Mat::Identity(2, 2)));
}

TEST(Flow, OuJacobianIsHeunFactor) {
  // For dx = dB - x dt the Heun map is linear with factor 1 - dt + dt^2/2.
  const auto sc = build_scenario("flat", {{"n", 2}, {"ou", 1.0}});
  const double dt = 0.01;
  const NoiseGrid g = sample_noise(2, 0, 100, dt, 2);
  const FlowPath path = integrate_flow(sc.system, sc.system.point(0, vec({0.5, 0.2})), g);
  const auto jac = derivative_flow(sc.system, path);
  const double factor = std::pow(1.0 - dt + 0.5 * dt * dt, 100);
  EXPECT_LT(max_abs(jac.back() - factor * Mat::Identity(2, 2)), 1e-12);
  EXPECT_NEAR(factor, std::exp(-1.0), 1e-5);
}

TEST(Flow, JacobianMatchesCommonNoiseDifferences) {
  Rng rng(3);
  for (const auto& named : all_scenarios()) {
    if (named.name == "so3-left-invariant") continue;  // group step, not the chart Heun map
    const auto sc = build_scenario(named.name, named.params);
    const auto& s = sc.system;
    const Point x0 = start_point(sc);
    const NoiseGrid g = sample_noise(11, 0, 400, 2.5e-3, s.noise_dim);
    const FlowPath path = integrate_flow(s, x0, g);
    ASSERT_TRUE(path.alive) << named.name;
    const Mat j = derivative_flow(s, path).back();
    const Point end = path.x.back();
    const Mat e_end = s.embed_jacobian ? s.embedded_jacobian(end) : Mat(Mat::Identity(s.dim, s.dim));
    const Vec v = rng.normal_vec(s.dim);
    const double eps = 1e-6;
    auto endpoint = [&](double sign) {
      const auto q = flow_endpoint(s, moved(x0, Vec(x0.x + sign * eps * v)), g);
      return s.embedded(*q);
    };
    const Vec fd = (endpoint(1.0) - endpoint(-1.0)) / (2.0 * eps);
    EXPECT_LT((fd - e_end * j * v).norm(), 1e-5 * std::max(1.0, fd.norm())) << named.name;
  }
}

TEST(Flow, SphereSwitchesChartsAndStaysOnSphere) {
  const auto sc = build_scenario("sphere-gradient", {{"n", 2}});
  const NoiseGrid g = sample_noise(4, 1, 4000, 1e-3, 3);
  const FlowPath path = integrate_flow(sc.system, start_point(sc), g);
  ASSERT_TRUE(path.alive);
  EXPECT_FALSE(path.switches.empty());
  for (const auto& p : path.x) {
    EXPECT_LE(p.x.norm(), 2.0 + 1e-12);
    EXPECT_NEAR(sc.system.embedded(p).norm(), 1.0, 1e-14);
  }
}

TEST(Flow, GuardRadiusKillsPath) {
  const auto sc = build_scenario("flat", {{"n", 1}, {"guard_radius", 0.05}});
  const NoiseGrid g = sample_noise(3, 0, 10000, 1e-3, 1);
  const FlowPath path = integrate_flow(sc.system, sc.system.point(0, vec({0})), g);
  EXPECT_FALSE(path.alive);
  EXPECT_LT(path.steps_done, 10000);
  EXPECT_THROW(integrate_flow(sc.system, sc.system.point(0, vec({1})), g), Error);
}

TEST(Transport, MetricDriftIsFirstOrderInDt) {
  // Heun does not preserve the quadratic invariant exactly; the defect of
  // P^T g(x_t) P - g(x0) must shrink with the step along one refined path.
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    const auto& s = sc.system;
    const Point x0 = start_point(sc);
    const bool tss = [&] {
      Rng rng(1);
      return tss_check(s, x0, rng).is_tss;
    }();
    std::vector<NoiseGrid> grids{sample_noise(21, 0, 8000, 1.0 / 8000, s.noise_dim)};
    for (int level = 0; level < 3; ++level) grids.push_back(grids.back().coarsen());
    double coarse_total = 0.0;
    double fine_total = 0.0;
    for (const NoiseGrid& g : grids) {
      PathOptions opt;
      opt.lw_transport = true;
      opt.lc_transport = true;
      opt.adjoint_transport = tss;
      const PathResult r = run_path(s, x0, g, opt);
      ASSERT_TRUE(r.alive);
      const Mat g0 = induced_metric(s, x0).g;
      const Mat g1 = induced_metric(s, r.last).g;
      double defect = 0.0;
      for (const Mat* p : {&r.state.lw_transport, &r.state.lc_transport}) defect = std::max(defect, max_abs(p->transpose() * g1 * *p - g0));
      if (tss) defect = std::max(defect, max_abs(r.state.adjoint_transport.transpose() * g1 * r.state.adjoint_transport - g0));
      EXPECT_LT(defect, 5.0 * g.dt * max_abs(g0)) << named.name << " dt=" << g.dt;
      if (g.steps == 1000) coarse_total = defect;
      if (g.steps == 8000) fine_total = defect;
    }
    EXPECT_LT(fine_total, 0.5 * coarse_total + 1e-12) << named.name;
  }
}

TEST(Transport, SphereHolonomyAroundLatitude) {
  const auto sc = build_scenario("sphere-gradient", {{"n", 2}});
  const auto& s = sc.system;
  for (double theta : {0.4, 1.0, 1.4}) {
    std::vector<Point> loop;
    const int steps = 4000;
    for (int k = 0; k <= steps; ++k) {
      const double phi = 2.0 * std::numbers::pi * k / steps;
      loop.push_back(s.locate(vec({std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)})));
      ASSERT_EQ(loop.back().chart, 0);
    }
    const FlowPath path = path_through(s, loop);
    const Mat g0 = induced_metric(s, loop.front()).g;
    const Mat frame = orthonormal_frame(g0);
    for (Connection c : {Connection::LW, Connection::LeviCivita, Connection::Adjoint}) {
      const Mat p = parallel_transport(s, path, c, frame).back();
      // Rotation by the enclosed area 2 pi (1 - cos theta).
      const double angle = 2.0 * std::numbers::pi * (1.0 - std::cos(theta));
      const Mat rot = frame.transpose() * g0 * p;
      EXPECT_NEAR(rot(0, 0), std::cos(angle), 1e-5);
      EXPECT_NEAR(std::abs(rot(1, 0)), std::abs(std::sin(angle)), 1e-5);
    }
  }
}

TEST(Transport, So3AdjointEqualsDerivativeFlowAndFilteredFlow) {
  const auto sc = build_scenario("so3-left-invariant");
  const auto& s = sc.system;
  const NoiseGrid g = sample_noise(8, 2, 2000, 1e-3, 3);
  PathOptions opt;
  opt.jacobian = true;
  opt.adjoint_transport = true;
  opt.filtered = true;
  const PathResult r = run_path(s, start_point(sc), g, opt);
  ASSERT_TRUE(r.alive);
  EXPECT_LT(max_abs(r.state.J - r.state.adjoint_transport), 1e-12);
  EXPECT_LT(max_abs(r.state.J - r.state.W), 1e-12);
  EXPECT_LT(max_abs(r.state.w_frame - Mat::Identity(3, 3)), 1e-12);
}

TEST(Transport, ReplayMatchesSinglePass) {
  const auto sc = build_scenario("custom", custom_params());
  const NoiseGrid g = sample_noise(12, 0, 300, 1e-3, 3);
  const Point x0 = start_point(sc);
  PathOptions opt;
  opt.jacobian = true;
  opt.lw_transport = true;
  opt.store_path = true;
  const PathResult r = run_path(sc.system, x0, g, opt);
  EXPECT_EQ(derivative_flow(sc.system, r.path).back(), r.state.J);
  EXPECT_EQ(parallel_transport(sc.system, r.path, Connection::LW, Mat::Identity(2, 2)).back(), r.state.lw_transport);
}

TEST(Decomposition, ReconstructsDrivingNoise) {
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    const auto& s = sc.system;
    const NoiseGrid g = sample_noise(31, 0, 1000, 1e-3, s.noise_dim);
    const FlowPath path = integrate_flow(s, start_point(sc), g);
    const Decomposition d = noise_decompose(s, path);
    EXPECT_LT(d.reconstruction_error, 1e-10) << named.name;
    // B_bar = B_tilde + beta along the whole path.
    for (std::size_t k = 0; k < d.B_bar.size(); k += 100) {
      EXPECT_LT((d.B_bar[k] - d.B_tilde[k] - d.beta[k]).norm(), 1e-12) << named.name;
    }
  }
}

TEST(Decomposition, QuadraticVariationOfBarNoise) {
  const auto sc = build_scenario("sphere-gradient", {{"n", 2}});
  const auto& s = sc.system;
  Mat qv = Mat::Zero(3, 3);
  Mat cross = Mat::Zero(3, 3);
  const int paths = 40;
  for (int i = 0; i < paths; ++i) {
    const NoiseGrid g = sample_noise(32, i, 1000, 1e-3, 3);
    const Decomposition d = noise_decompose(s, integrate_flow(s, start_point(sc), g));
    qv += d.qv_bar / paths;
    cross += d.cross_tilde_beta / paths;
  }
  EXPECT_LT((qv - Mat::Identity(3, 3)).norm(), 0.1);
  EXPECT_LT(cross.norm(), 0.1);
}

TEST(CovariantFlow, ConvergesToDerivativeFlow) {
  const auto sc = build_scenario("custom", custom_params());
  const auto& s = sc.system;
  const Vec v0 = vec({1.0, -0.5});
  double previous = 1e300;
  for (int level = 0; level < 3; ++level) {
    const int steps = 250 << level;
    double err = 0.0;
    double norm = 0.0;
    for (int i = 0; i < 20; ++i) {
      const NoiseGrid g = sample_noise(41, i, steps, 0.5 / steps, 3);
      PathOptions opt;
      opt.jacobian = true;
      opt.covariant_flow = true;
      opt.v0 = v0;
      const PathResult r = run_path(s, start_point(sc), g, opt);
      err += (r.state.v_cov - r.state.J * v0).norm();
      norm += (r.state.J * v0).norm();
    }
    EXPECT_LT(err / norm, 0.05) << steps;
    EXPECT_LT(err, previous);
    previous = err;
  }
}

TEST(FilteredFlow, FlatOuDecaysDeterministically) {
  const auto sc = build_scenario("flat", {{"n", 2}, {"ou", 1.0}});
  const NoiseGrid g = sample_noise(5, 0, 1000, 1e-3, 2);
  const auto w = filtered_flow(sc.system, integrate_flow(sc.system, sc.system.point(0, vec({0.1, 0})), g));
  EXPECT_LT(max_abs(w.back() - std::exp(-1.0) * Mat::Identity(2, 2)), 1e-6);
}

TEST(FilteredFlow, SphereContractsAtHalfRicci) {
  const auto sc = build_scenario("sphere-gradient", {{"n", 2}});
  const auto& s = sc.system;
  const Point x0 = start_point(sc);
  const Vec v0 = vec({0.4, -0.7});
  const double n0 = std::sqrt(v0.dot(induced_metric(s, x0).g * v0));
  for (int i = 0; i < 5; ++i) {
    const NoiseGrid g = sample_noise(6, i, 1000, 1e-3, 3);
    const FlowPath path = integrate_flow(s, x0, g);
    const auto w = filtered_flow(s, path);
    const Vec wv = w.back() * v0;
    const double nt = std::sqrt(wv.dot(induced_metric(s, path.x.back()).g * wv));
    EXPECT_NEAR(nt / n0, std::exp(-0.5), 1e-3);
  }
}

TEST(CovariantFlow, FlatAdditiveNoiseKeepsVector) {
  const auto sc = build_scenario("flat", {{"n", 2}});
  const NoiseGrid g = sample_noise(6, 0, 500, 1e-3, 2);
  const auto v = covariant_derivative_flow(sc.system, integrate_flow(sc.system, sc.system.point(0, vec({0, 0})), g), vec({1, 2}));
  EXPECT_LT((v.back() - vec({1, 2})).norm(), 1e-14);
}
