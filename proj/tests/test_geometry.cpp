#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "sdegeom/geometry.hpp"

using namespace sdegeom;
using namespace testing_support;

namespace {

double max_abs(const Mat& a) { return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff(); }

Tensor3 tensor_diff(const Tensor3& a, const Tensor3& b) { return a - b; }

double tensor4_diff(const Tensor4& a, const Tensor4& b) {
  double m = 0.0;
  for (int j = 0; j < a.dim(); ++j)
    for (int k = 0; k < a.dim(); ++k) m = std::max(m, max_abs(a.block(j, k) - b.block(j, k)));
  return m;
}

// Smooth test objects written over chart coordinates.
double test_function(const Vec& x) {
  double s = 0.0;
  for (int i = 0; i < x.size(); ++i) s += std::sin(0.7 * x(i) + 0.3 * i) + 0.2 * x(i) * x((i + 1) % x.size());
  return s;
}

Vec test_form(const Vec& x) {
  const int n = static_cast<int>(x.size());
  Vec out(n);
  for (int k = 0; k < n; ++k) out(k) = std::cos(0.5 * x(k)) + 0.3 * x((k + 1) % n) * x(k) + 0.1 * k;
  return out;
}

}  // namespace

TEST(Lw, DefiningPropertyOnAllScenarios) {
  Rng rng(101);
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    const auto& s = sc.system;
    double worst = 0.0;
    for (int probe = 0; probe < 100; ++probe) {
      const Point p = random_point(sc, rng);
      const Metric m = induced_metric(s, p);
      const Tensor3 lw = lw_christoffel(s, p);
      const Vec e = m.Y * rng.normal_vec(s.dim);
      auto z = [&](const Vec& y) { return Vec(s.X(p.chart, y) * e); };
      const Vec w = rng.normal_vec(s.dim);
      worst = std::max(worst, covariant_derivative(lw, z, p.x, w, s.oracle).norm() / std::max(1.0, e.norm() * w.norm()));
    }
    EXPECT_LT(worst, 1e-6) << named.name;
  }
}

TEST(Lw, NormalDirectionsDoNotMatter) {
  // Gamma depends on X only through the kernel projection: adding a kernel
  // direction to the coefficient leaves the defining property intact.
  const auto sc = build_scenario("custom", custom_params());
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Point p = random_point(sc, rng);
    const Metric m = induced_metric(sc.system, p);
    const Tensor3 lw = lw_christoffel(sc.system, p);
    const Vec e = m.P_N * rng.normal_vec(3);
    auto z = [&](const Vec& y) { return Vec(sc.system.X(p.chart, y) * e); };
    // For e in ker X(x) the field vanishes at x, so nabla Z(v) = DZ(v).
    EXPECT_LT(z(p.x).norm(), 1e-12);
    const Vec v = rng.normal_vec(2);
    EXPECT_LT((covariant_derivative(lw, z, p.x, v, sc.system.oracle) - directional_derivative(z, p.x, v, sc.system.oracle)).norm(),
              1e-12);
  }
}

TEST(Lw, MetricOnAllScenarios) {
  Rng rng(102);
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    for (int trial = 0; trial < 5; ++trial) {
      const Point p = random_point(sc, rng);
      const auto res = metricity_check(sc.system, p, lw_christoffel(sc.system, p), rng);
      EXPECT_LT(res.residual, 1e-6) << named.name;
      EXPECT_LT(res.form_residual, 1e-6) << named.name;
    }
  }
}

TEST(Lw, AdjointMetricExactlyOnTssScenarios) {
  Rng rng(103);
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    const Point p = random_point(sc, rng);
    const auto tss = tss_check(sc.system, p, rng);
    const auto res = metricity_check(sc.system, p, adjoint_christoffel(lw_christoffel(sc.system, p)), rng);
    if (named.name == "sphere-gradient" || named.name == "so3-left-invariant") {
      EXPECT_TRUE(tss.is_tss) << named.name;
      EXPECT_LT(res.residual, 1e-6) << named.name;
    }
    // Adjoint metric <=> TSS on every scenario.
    EXPECT_EQ(tss.is_tss, res.residual < 1e-6) << named.name << " " << res.residual;
    EXPECT_LT(tss.identity_residual, 1e-6) << named.name;
  }
}

TEST(Lw, ChristoffelRoutesAgree) {
  Rng rng(104);
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    const auto& s = sc.system;
    for (int trial = 0; trial < 5; ++trial) {
      const Point p = random_point(sc, rng);
      const Tensor3 direct = lw_christoffel(s, p);
      Eigen::HouseholderQR<Mat> qr(rng.normal_mat(s.noise_dim, s.noise_dim));
      const Mat q = qr.householderQ();
      EXPECT_LT(tensor_diff(direct, lw_christoffel_orthobasis(s, p, q)).max_abs(), 1e-5) << named.name;
      const Mat mv = rng.normal_mat(s.dim, s.dim);
      const Mat mz = rng.normal_mat(s.dim, s.dim);
      EXPECT_LT(tensor_diff(direct, lw_christoffel_brackets(s, p, mv, mz)).max_abs(), 1e-5) << named.name;
    }
  }
}

TEST(Lw, OracleStepDoesNotMatter) {
  Rng rng(105);
  for (const auto& named : all_scenarios()) {
    auto sc = build_scenario(named.name, named.params);
    const Point p = random_point(sc, rng);
    const Tensor3 base = lw_christoffel(sc.system, p);
    sc.system.oracle = DerivOracle{1e-3, 2};
    const Tensor3 coarse = lw_christoffel(sc.system, p);
    sc.system.oracle = DerivOracle{1e-5, 0};
    const Tensor3 fine = lw_christoffel(sc.system, p);
    EXPECT_LT(tensor_diff(base, coarse).max_abs(), 1e-6) << named.name;
    EXPECT_LT(tensor_diff(base, fine).max_abs(), 1e-6) << named.name;
  }
}

TEST(Torsion, RoutesAgree) {
  Rng rng(106);
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    const auto& s = sc.system;
    for (int trial = 0; trial < 5; ++trial) {
      const Point p = random_point(sc, rng);
      const Tensor3 t = torsion(lw_christoffel(s, p));
      EXPECT_LT(tensor_diff(t, torsion_via_dY(s, p)).max_abs(), 1e-4) << named.name;
      const Vec v1 = rng.normal_vec(s.dim);
      const Vec v2 = rng.normal_vec(s.dim);
      EXPECT_LT((t.apply(v1, v2) - torsion_via_brackets(s, p, v1, v2)).norm(), 1e-4 * std::max(1.0, v1.norm() * v2.norm()))
          << named.name;
      // Antisymmetry.
      EXPECT_LT((t.apply(v1, v2) + t.apply(v2, v1)).norm(), 1e-12);
    }
  }
}

TEST(Torsion, AdjointDiffersByTorsion) {
  Rng rng(107);
  const auto sc = build_scenario("custom", custom_params());
  const Point p = random_point(sc, rng);
  const Tensor3 lw = lw_christoffel(sc.system, p);
  const Tensor3 adj = adjoint_christoffel(lw);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k) EXPECT_EQ(adj(i, j, k), lw(i, k, j));
  const Vec u = rng.normal_vec(2);
  const Vec w = rng.normal_vec(2);
  EXPECT_LT((adj.apply(u, w) - lw.apply(u, w) + torsion(lw).apply(u, w)).norm(), 1e-14);
  // Adjoint covariant derivative of a field Z along Z^v equals [Z^v, Z](x).
  const Metric m = induced_metric(sc.system, p);
  const AffineField z = random_affine_field(rng, p.x);
  const Vec e = m.Y * u;
  auto zv = [&](const Vec& y) { return Vec(sc.system.X(p.chart, y) * e); };
  const Vec adj_along = covariant_derivative(adj, z, p.x, u, sc.system.oracle);
  EXPECT_LT((adj_along - bracket(zv, z, p.x, sc.system.oracle)).norm(), 1e-6);
}

TEST(Torsion, TwistedPlaneClosedForm) {
  for (double alpha : {0.5, 1.3}) {
    const auto sc = build_scenario("twisted-plane", {{"alpha", alpha}});
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
      const Point p = random_point(sc, rng);
      // X = R(alpha x1) gives Gamma(e1, .) = -alpha J and Gamma(e2, .) = 0.
      const Tensor3 lw = lw_christoffel(sc.system, p);
      Mat j(2, 2);
      j << 0, -1, 1, 0;
      EXPECT_LT(max_abs(lw.slice(0) + alpha * j), 1e-8);
      EXPECT_LT(max_abs(lw.slice(1)), 1e-8);
      const Tensor3 t = torsion(lw);
      EXPECT_LT((t.apply(vec({1, 0}), vec({0, 1})) - vec({alpha, 0})).norm(), 1e-8);
      // Levi-Civita of the flat metric: sum_i D X^i (X^i) = alpha e2.
      const auto corr = stratonovich_correction(sc.system, p);
      EXPECT_LT((corr.lc_term - vec({0, alpha})).norm(), 1e-7);
      EXPECT_LT(corr.lw_term.norm(), 1e-8);
    }
  }
}

TEST(Curvature, DirectMatchesChristoffelDerivative) {
  Rng rng(108);
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    const auto& s = sc.system;
    for (int trial = 0; trial < 3; ++trial) {
      const Point p = random_point(sc, rng);
      const Metric m = induced_metric(s, p);
      const Tensor4 direct = curvature_lw_direct_tensor(dX_slices(s, p), m);
      const Tensor4 route = curvature_from_christoffel(lw_field(s, p), p.x, s.oracle);
      EXPECT_LT(tensor4_diff(direct, route), 1e-4) << named.name;
      const Vec u = rng.normal_vec(s.dim);
      const Vec v = rng.normal_vec(s.dim);
      const Vec w = rng.normal_vec(s.dim);
      EXPECT_LT((curvature_lw_direct(s, p, u, v, w) - direct.apply(u, v, w)).norm(), 1e-12 * std::max(1.0, direct.max_abs()));
      // Antisymmetric in (u, v) and, the connection being metric, skew in g.
      EXPECT_LT((direct.apply(u, v, w) + direct.apply(v, u, w)).norm(), 1e-12 * std::max(1.0, direct.max_abs()));
      EXPECT_LT(std::abs(direct.apply(u, v, w).dot(m.g * u) + direct.apply(u, v, u).dot(m.g * w)),
                1e-10 * std::max(1.0, direct.max_abs()));
    }
  }
}

TEST(Curvature, LeviCivitaBianchiIdentity) {
  Rng rng(109);
  const auto sc = build_scenario("custom", custom_params());
  const Point p = random_point(sc, rng);
  const Tensor4 r = curvature_from_christoffel(levi_civita_field(sc.system, p), p.x, sc.system.oracle);
  const Vec u = rng.normal_vec(2);
  const Vec v = rng.normal_vec(2);
  const Vec w = rng.normal_vec(2);
  EXPECT_LT((r.apply(u, v, w) + r.apply(v, w, u) + r.apply(w, u, v)).norm(), 1e-5);
}

TEST(Gradient, SphereIsLeviCivitaWithUnitCurvature) {
  Rng rng(110);
  for (int n : {2, 3}) {
    const auto sc = build_scenario("sphere-gradient", {{"n", n}});
    const auto& s = sc.system;
    for (int trial = 0; trial < 20; ++trial) {
      const Point p = random_point(sc, rng);
      const Metric m = induced_metric(s, p);
      const Tensor3 lw = lw_christoffel(s, p);
      EXPECT_LT(tensor_diff(lw, levi_civita_christoffel(s, p)).max_abs(), 1e-5);
      EXPECT_LT(tensor_diff(lw, levi_civita_from_dX(m, dX_slices(s, p))).max_abs(), 1e-8);
      const Tensor4 r = curvature_from_christoffel(lw_field(s, p), p.x, s.oracle);
      const Vec u = rng.normal_vec(n);
      const Vec v = rng.normal_vec(n);
      EXPECT_NEAR(sectional_curvature(r, m.g, u, v), 1.0, 1e-3);
      EXPECT_NEAR(sectional_curvature(curvature_lw_direct_tensor(dX_slices(s, p), m), m.g, u, v), 1.0, 1e-8);
      const Ricci ric = ricci(curvature_lw_direct_tensor(dX_slices(s, p), m), m.g);
      EXPECT_LT(max_abs(ric.ric - (n - 1) * m.g), 1e-8 * max_abs(m.g));
      const auto corr = stratonovich_correction(s, p);
      EXPECT_LT(corr.lc_term.norm(), 1e-6);
      EXPECT_LT(corr.lw_term.norm(), 1e-6);
    }
  }
}

TEST(Gradient, SphereHpVanishesAtP2AndIsIsotropic) {
  Rng rng(111);
  const auto sc = build_scenario("sphere-gradient", {{"n", 2}});
  for (int trial = 0; trial < 20; ++trial) {
    const Point p = random_point(sc, rng);
    const HpForms f = hp_forms(sc.system, p);
    const auto e2 = h_p_extremes(f, 2.0);
    EXPECT_NEAR(e2.lower, 0.0, 1e-6);
    EXPECT_NEAR(e2.upper, 0.0, 1e-6);
    const auto e4 = h_p_extremes(f, 4.0);
    EXPECT_NEAR(e4.lower, e4.upper, 1e-6);
  }
}

TEST(LieGroup, So3FlatWithUnitTorsion) {
  Rng rng(112);
  const auto sc = build_scenario("so3-left-invariant");
  const auto& s = sc.system;
  for (int trial = 0; trial < 10; ++trial) {
    Point p = random_point(sc, rng);
    if (trial == 0) p.x = Vec::Zero(3);
    const Metric m = induced_metric(s, p);
    const Tensor3 lw = lw_christoffel(s, p);
    const Tensor4 r = curvature_from_christoffel(lw_field(s, p), p.x, s.oracle);
    EXPECT_LT(r.max_abs(), 1e-4);
    // In the left-invariant frame T(X^1, X^2) = -X^3 at every point.
    const Tensor3 t = torsion(lw);
    EXPECT_LT((t.apply(m.X.col(0), m.X.col(1)) + m.X.col(2)).norm(), 1e-6);
    EXPECT_LT((t.apply(m.X.col(1), m.X.col(2)) + m.X.col(0)).norm(), 1e-6);
    if (trial == 0) {
      EXPECT_LT((t.apply(vec({1, 0, 0}), vec({0, 1, 0})) - vec({0, 0, -1})).norm(), 1e-6);
    }
    EXPECT_TRUE(tss_check(s, p, rng).is_tss);
    EXPECT_LT(metricity_check(s, p, adjoint_christoffel(lw), rng).residual, 1e-6);
    // Left-invariant orthonormal fields are Levi-Civita geodesic.
    EXPECT_LT(levi_civita_from_lw_check(s, p, rng).per_field, 1e-6);
  }
}

TEST(Comparison, RicciGapOnTssScenarios) {
  Rng rng(113);
  struct Case {
    std::string name;
    nlohmann::json params;
    bool lw_is_lc;
  };
  const std::vector<Case> cases = {{"sphere-gradient", {{"n", 2}}, true},
                                   {"sphere-gradient", {{"n", 3}}, true},
                                   {"so3-left-invariant", nlohmann::json::object(), false},
                                   {"flat", {{"n", 2}}, true}};
  for (const auto& c : cases) {
    const auto sc = build_scenario(c.name, c.params);
    const auto& s = sc.system;
    for (int trial = 0; trial < 3; ++trial) {
      const Point p = random_point(sc, rng);
      const Metric m = induced_metric(s, p);
      const Ricci lc = ricci(curvature_from_christoffel(levi_civita_field(s, p), p.x, s.oracle), m.g);
      const Ricci lw = ricci(curvature_lw_direct_tensor(dX_slices(s, p), m), m.g);
      const Vec eig = form_eigenvalues(Mat(lc.ric - lw.ric), m.g);
      EXPECT_GE(eig.minCoeff(), -1e-6) << c.name;
      if (c.lw_is_lc) {
        EXPECT_LT(eig.cwiseAbs().maxCoeff(), 1e-6) << c.name;
      } else {
        EXPECT_GT(eig.maxCoeff(), 1e-3) << c.name;
      }
      if (c.name == "so3-left-invariant") {
        // Bi-invariant metric with |[e1, e2]| = 1: Ric = g / 2.
        EXPECT_LT((eig.array() - 0.5).abs().maxCoeff(), 1e-4);
      }
    }
  }
}

TEST(Comparison, LeviCivitaFromLwOnTssScenarios) {
  Rng rng(114);
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    const Point p = random_point(sc, rng);
    const double residual = levi_civita_from_lw_check(sc.system, p, rng).residual;
    // The half-torsion shift recovers Levi-Civita exactly when the torsion is skew.
    if (tss_check(sc.system, p, rng).is_tss) {
      EXPECT_LT(residual, 1e-5) << named.name;
    } else {
      EXPECT_GT(residual, 1e-3) << named.name;
    }
  }
}

TEST(Comparison, LwEqualsLcOnlyForGradientLike) {
  Rng rng(115);
  const auto twisted = build_scenario("twisted-plane", {{"alpha", 0.5}});
  const Point p = random_point(twisted, rng);
  EXPECT_GT(tensor_diff(lw_christoffel(twisted.system, p), levi_civita_christoffel(twisted.system, p)).max_abs(), 0.1);
  EXPECT_FALSE(tss_check(twisted.system, p, rng).is_tss);
}

TEST(Generator, FormsAgree) {
  Rng rng(116);
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    for (int trial = 0; trial < 3; ++trial) {
      const Point p = random_point(sc, rng);
      const double lw = generator_lw(sc.system, p, test_function);
      const double lc = generator_lc(sc.system, p, test_function);
      const double h = generator_hoermander(sc.system, p, test_function);
      EXPECT_NEAR(lw, lc, 1e-6) << named.name;
      EXPECT_NEAR(lw, h, 1e-6) << named.name;
    }
  }
}

TEST(Generator, FlatOuClosedForm) {
  const auto sc = build_scenario("flat", {{"n", 3}, {"ou", 1.0}});
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Point p = random_point(sc, rng);
    const Vec x = p.x;
    // f = sum x_i^2: L f = n - 2 |x|^2 for dx = dB - x dt.
    auto f = [](const Vec& y) { return y.squaredNorm(); };
    EXPECT_NEAR(generator_lw(sc.system, p, f), 3.0 - 2.0 * x.squaredNorm(), 1e-6 * (1 + x.squaredNorm()));
  }
}

TEST(Weitzenbock, FlatClosedForm) {
  const auto sc = build_scenario("flat", {{"n", 2}, {"ou", 1.0}});
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const Point p = random_point(sc, rng);
    const Vec x = p.x;
    const Vec v = rng.normal_vec(2);
    // phi = (cos(x1/2) + 0.3 x2 x1, cos(x2/2) + 0.3 x1 x2 + 0.1).
    const double lap0 = -0.25 * std::cos(0.5 * x(0));
    const double lap1 = -0.25 * std::cos(0.5 * x(1));
    // L_A phi (v) with A = -x: D phi(-x) v - phi(v).
    const Mat dphi = [&] {
      Mat d(2, 2);  // d(k, j) = d_j phi_k
      d << -0.5 * std::sin(0.5 * x(0)) + 0.3 * x(1), 0.3 * x(0), 0.3 * x(1), -0.5 * std::sin(0.5 * x(1)) + 0.3 * x(0);
      return d;
    }();
    const double lie = (dphi * (-x)).dot(v) - test_form(x).dot(v);
    const double expected = 0.5 * (lap0 * v(0) + lap1 * v(1)) + lie;
    EXPECT_NEAR(weitzenbock_rhs_1form(sc.system, p, test_form, v), expected, 1e-6);
    EXPECT_NEAR(hodge_rhs_1form(sc.system, p, test_form, v), expected, 1e-6);
  }
}

TEST(Weitzenbock, TraceRouteMatchesHodgeRoute) {
  Rng rng(117);
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    for (int trial = 0; trial < 2; ++trial) {
      const Point p = random_point(sc, rng);
      const Vec v = rng.normal_vec(sc.system.dim);
      const double a = weitzenbock_rhs_1form(sc.system, p, test_form, v);
      const double b = hodge_rhs_1form(sc.system, p, test_form, v);
      EXPECT_NEAR(a, b, 1e-5 * std::max(1.0, std::abs(a))) << named.name;
    }
  }
}

TEST(Weitzenbock, CodifferentialRoutesAgree) {
  Rng rng(118);
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    const Point p = random_point(sc, rng);
    EXPECT_NEAR(bar_delta(sc.system, p, test_form), bar_delta_lie(sc.system, p, test_form), 1e-7) << named.name;
  }
}

TEST(Hp, ExtremesBoundRandomDirections) {
  Rng rng(119);
  for (const auto& named : all_scenarios()) {
    const auto sc = build_scenario(named.name, named.params);
    const Point p = random_point(sc, rng);
    const HpForms f = hp_forms(sc.system, p);
    for (double pw : {2.0, 3.0, 1.5}) {
      const auto ext = h_p_extremes(f, pw);
      EXPECT_LE(ext.lower, ext.upper + 1e-12);
      double lo = 1e300;
      double hi = -1e300;
      for (int probe = 0; probe < 2000; ++probe) {
        Vec v = rng.normal_vec(sc.system.dim);
        v /= std::sqrt(v.dot(f.g * v));
        const double val = h_p(f, v, pw);
        EXPECT_GE(val, ext.lower - 1e-8 * std::max(1.0, std::abs(ext.lower))) << named.name;
        EXPECT_LE(val, ext.upper + 1e-8 * std::max(1.0, std::abs(ext.upper))) << named.name;
        lo = std::min(lo, val);
        hi = std::max(hi, val);
      }
      const double span = std::max(1.0, hi - lo);
      EXPECT_LT(lo - ext.lower, 0.05 * span) << named.name;
      EXPECT_LT(ext.upper - hi, 0.05 * span) << named.name;
      // Homogeneous of degree two.
      Vec v = rng.normal_vec(sc.system.dim);
      EXPECT_NEAR(h_p(f, Vec(3.0 * v), pw), 9.0 * h_p(f, v, pw), 1e-9 * std::max(1.0, std::abs(h_p(f, v, pw))));
    }
  }
}

TEST(Hp, ZeroVectorRejected) {
  const auto sc = build_scenario("flat", {{"n", 2}});
  const HpForms f = hp_forms(sc.system, sc.system.point(0, vec({0, 0})));
  try {
    h_p(f, vec({0, 0}), 2.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ZeroVector);
  }
}

TEST(Hp, FlatOuIsMinusTwo) {
  // dx = dB - x dt: the derivative flow is e^{-t}, so H_p(v, v) = -2 |v|^2.
  const auto sc = build_scenario("flat", {{"n", 2}, {"ou", 1.0}});
  const auto e = h_p_extremes(sc.system, sc.system.point(0, vec({0.4, -1})), 3.0);
  EXPECT_NEAR(e.lower, -2.0, 1e-8);
  EXPECT_NEAR(e.upper, -2.0, 1e-8);
}
