#pragma once

#include <nlohmann/json.hpp>

#include <initializer_list>
#include <string>
#include <vector>

#include "sdegeom/geometry.hpp"
#include "sdegeom/model.hpp"
#include "sdegeom/random.hpp"

namespace testing_support {

using sdegeom::Mat;
using sdegeom::Point;
using sdegeom::Rng;
using sdegeom::Scenario;
using sdegeom::Vec;

inline Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<int>(xs.size()));
  int i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

/// A non-gradient, non-TSS custom system with m > n.
inline nlohmann::json custom_params() {
  return nlohmann::json{{"n", 2},
                        {"m", 3},
                        {"X", {{"1 + 0.3*sin(x2)", "0.2*x1", "0"}, {"0.1", "1", "0.3*cos(x1)"}}},
                        {"A", {"0.1*x2", "-0.2*sin(x1)"}}};
}

struct Named {
  std::string name;
  nlohmann::json params;
};

inline std::vector<Named> all_scenarios() {
  return {{"flat", {{"n", 2}}},
          {"flat", {{"n", 3}, {"ou", 1.0}}},
          {"sphere-gradient", {{"n", 2}}},
          {"sphere-gradient", {{"n", 3}}},
          {"so3-left-invariant", nlohmann::json::object()},
          {"twisted-plane", {{"alpha", 0.5}}},
          {"twisted-plane", {{"alpha", 1.3}}},
          {"circle", nlohmann::json::object()},
          {"custom", custom_params()}};
}

/// A random point where geometry operations are well inside the chart.
inline Point random_point(const Scenario& sc, Rng& rng) {
  const auto& s = sc.system;
  if (sc.name == "sphere-gradient") {
    Vec u = rng.normal_vec(s.dim);
    u *= 1.6 * rng.uniform() / std::max(u.norm(), 1e-12);
    return s.point(rng.uniform() < 0.5 ? 0 : 1, u);
  }
  if (sc.name == "so3-left-invariant") {
    Vec w = rng.normal_vec(3);
    w *= 0.45 * rng.uniform() / std::max(w.norm(), 1e-12);
    Point p = s.point(0, w);
    p.anchor = rng.normal_vec(4).normalized();
    return p;
  }
  return s.point(0, Vec(rng.normal_vec(s.dim)));
}

}  // namespace testing_support
