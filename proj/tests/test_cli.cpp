#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

#include "sdegeom/cli.hpp"
#include "sdegeom/schema.hpp"

namespace {

namespace fs = std::filesystem;
using namespace sdegeom;
using nlohmann::json;

fs::path scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("sdegeom_test_cli_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_config(const std::string& name, const json& doc) {
  const fs::path p = scratch() / name;
  std::ofstream(p) << doc.dump(2);
  return p;
}

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path out = scratch() / ("stdout_" + std::to_string(counter));
  const fs::path err = scratch() / ("stderr_" + std::to_string(counter++));
  const std::string cmd = std::string(SDEGEOM_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

const json& report_schema() {
  static const json s = json::parse(slurp(fs::path(SDEGEOM_DOCS_DIR) / "report.schema.json"));
  return s;
}

void expect_schema_valid(const json& report) {
  const auto v = schema::validate(report_schema(), report);
  std::string all;
  for (const auto& e : v) all += e.describe() + "\n";
  EXPECT_TRUE(v.empty()) << all;
}

json as_json(const cli::ojson& r) { return json::parse(r.dump()); }

cli::Outcome run_doc(const json& doc, const std::string& command) { return cli::run(cli::parse_config(doc, command)); }

double max_abs_nested(const json& a) {
  if (a.is_number()) return std::abs(a.get<double>());
  double m = 0.0;
  for (const auto& x : a) m = std::max(m, max_abs_nested(x));
  return m;
}

}  // namespace

TEST(Schema, ShippedSchemaAcceptsEverySampleConfig) {
  int seen = 0;
  for (const auto& entry : fs::directory_iterator(SDEGEOM_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    const json doc = json::parse(slurp(entry.path()));
    const auto v = schema::validate(cli::config_schema(), doc);
    EXPECT_TRUE(v.empty()) << entry.path() << ": " << (v.empty() ? "" : v.front().describe());
    EXPECT_NO_THROW(cli::parse_config(doc, "run")) << entry.path();
    ++seen;
  }
  EXPECT_GE(seen, 5);
}

TEST(Schema, ViolationsNameTheField) {
  const json doc = {{"scenario", {{"name", "flat"}, {"params", {{"n", 2}, {"zz", 1}}}}},
                    {"bogus", true},
                    {"n_paths", 10},
                    {"dt", -1.0},
                    {"x0", {1, "a"}}};
  std::vector<std::string> ptrs;
  for (const auto& v : schema::validate(cli::config_schema(), doc)) ptrs.push_back(v.pointer);
  for (const char* want : {"/scenario/params/zz", "/bogus", "/n_paths", "/dt", "/x0/1"}) {
    EXPECT_NE(std::find(ptrs.begin(), ptrs.end(), want), ptrs.end()) << want;
  }
  const auto missing = schema::validate(cli::config_schema(), json{{"t", 1.0}});
  ASSERT_EQ(missing.size(), 1u);
  EXPECT_EQ(missing[0].pointer, "/scenario");
  // Per-scenario parameter rules.
  const auto custom = schema::validate(cli::config_schema(), json{{"scenario", {{"name", "custom"}, {"params", {{"n", 2}}}}}});
  ASSERT_EQ(custom.size(), 1u);
  EXPECT_EQ(custom[0].pointer, "/scenario/params/X");
}

TEST(Schema, IntegerValuedFloatsAreIntegersAndUnsupportedKeywordsAreRefused) {
  EXPECT_TRUE(schema::validate(json{{"type", "integer"}}, json(3.0)).empty());
  EXPECT_FALSE(schema::validate(json{{"type", "integer"}}, json(3.5)).empty());
  EXPECT_THROW(schema::validate(json{{"pattern", "a*"}}, json("a")), Error);
}

TEST(Config, SemanticErrorsAreConfigErrors) {
  const json base = {{"scenario", {{"name", "flat"}}}};
  json d = base;
  d["dt"] = 0.3;  // t = 0.5 is not a multiple
  EXPECT_THROW(cli::parse_config(d, "simulate"), Error);
  d = base;
  d["command"] = "verify";
  try {
    cli::parse_config(d, "tensors");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ConfigError);
    EXPECT_NE(std::string(e.what()).find("/command"), std::string::npos);
  }
  EXPECT_THROW(cli::parse_config(base, "estimate"), Error);  // no checks
  EXPECT_THROW(cli::parse_config(base, "run"), Error);       // no command
  const auto rc = cli::parse_config(cli::apply_overrides(base, {.seed = 9, .paths = 250, .dt = 0.01, .t = 0.2, .threads = {}, .checks = {}}), "simulate");
  EXPECT_EQ(rc.mc.seed, 9u);
  EXPECT_EQ(rc.mc.n_paths, 250);
  EXPECT_DOUBLE_EQ(rc.mc.dt, 0.01);
  EXPECT_DOUBLE_EQ(rc.mc.t, 0.2);
}

TEST(Tensors, FlatBlocksVanish) {
  const auto o = run_doc({{"scenario", {{"name", "flat"}, {"params", {{"n", 3}}}}}, {"points", {{0.1, -2.0, 3.0}}}}, "tensors");
  EXPECT_EQ(o.exit_code, 0);
  const json r = as_json(o.report);
  expect_schema_valid(r);
  const json& p = r["results"]["points"][0];
  for (const char* k : {"lw_christoffel", "adjoint_christoffel", "levi_civita_christoffel", "torsion", "lw_curvature", "lw_ricci",
                        "levi_civita_curvature"}) {
    EXPECT_LT(max_abs_nested(p[k]["value"]), 1e-12) << k;
  }
  EXPECT_EQ(p["metric"]["provenance"], "analytic");
  EXPECT_EQ(p["lw_christoffel"]["provenance"], "derived-oracle");
}

TEST(Tensors, SphereRicciEqualsMetric) {
  const auto o = run_doc({{"scenario", {{"name", "sphere-gradient"}}}, {"points", {{0.6, 0.0, 0.8}, {0.0, -0.6, -0.8}, {0.3, 0.4}}}},
                         "tensors");
  const json r = as_json(o.report);
  expect_schema_valid(r);
  ASSERT_EQ(r["results"]["points"].size(), 3u);
  for (const auto& p : r["results"]["points"]) {
    const auto g = p["metric"]["value"];
    const auto ric = p["lw_ricci"]["value"];
    const double tol = p["lw_ricci"]["tolerance"].get<double>();
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) EXPECT_NEAR(ric[i][j].get<double>(), g[i][j].get<double>(), tol);
    // LW is Levi-Civita here.
    const auto lw = p["lw_christoffel"]["value"];
    const auto lc = p["levi_civita_christoffel"]["value"];
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        for (int k = 0; k < 2; ++k) EXPECT_NEAR(lw[i][j][k].get<double>(), lc[i][j][k].get<double>(), 1e-5);
    EXPECT_NEAR(p["h_p"]["lower"]["value"].get<double>(), 0.0, 1e-6);
  }
  // The southern point is reported in the southern chart.
  EXPECT_EQ(r["results"]["points"][1]["chart"], "south");
}

TEST(Tensors, IndexConventionOnTwistedPlane) {
  // X = R(alpha x1): Gamma(e1, .) = -alpha J with J the quarter turn, Gamma(e2, .) = 0.
  const double alpha = 0.5;
  const auto o = run_doc({{"scenario", {{"name", "twisted-plane"}, {"params", {{"alpha", alpha}}}}}, {"points", {{0.2, 0.7}}}},
                         "tensors");
  const json p = as_json(o.report)["results"]["points"][0];
  const auto gam = p["lw_christoffel"]["value"];
  EXPECT_NEAR(gam[0][0][1].get<double>(), alpha, 1e-8);   // Gamma^1_{12}
  EXPECT_NEAR(gam[1][0][0].get<double>(), -alpha, 1e-8);  // Gamma^2_{11}
  EXPECT_NEAR(gam[0][1][0].get<double>(), 0.0, 1e-8);
  const auto adj = p["adjoint_christoffel"]["value"];
  EXPECT_NEAR(adj[0][1][0].get<double>(), alpha, 1e-8);
  const auto t = p["torsion"]["value"];
  EXPECT_NEAR(t[0][0][1].get<double>(), alpha, 1e-8);  // T(e1, e2) = alpha e1
  EXPECT_NEAR(t[0][1][0].get<double>(), -alpha, 1e-8);
}

TEST(Verify, PropertyFlagsPerScenario) {
  struct Case {
    json scenario;
    bool lw_equals_lc, curvature_zero, tss;
  };
  const std::vector<Case> cases = {{{{"name", "sphere-gradient"}}, true, false, true},
                                   {{{"name", "so3-left-invariant"}}, false, true, true},
                                   {{{"name", "twisted-plane"}, {"params", {{"alpha", 0.5}}}}, false, true, false},
                                   {{{"name", "flat"}, {"params", {{"n", 2}, {"ou", 1.0}}}}, true, true, true}};
  for (const auto& c : cases) {
    const auto o = run_doc({{"scenario", c.scenario}, {"random_points", 8}}, "verify");
    const json r = as_json(o.report);
    expect_schema_valid(r);
    EXPECT_EQ(o.exit_code, 0) << c.scenario.dump() << "\n" << o.summary;
    EXPECT_TRUE(r["pass"].get<bool>());
    const json& props = r["results"]["properties"];
    EXPECT_EQ(props["lw_equals_lc"].get<bool>(), c.lw_equals_lc) << c.scenario.dump();
    EXPECT_EQ(props["curvature_zero"].get<bool>(), c.curvature_zero) << c.scenario.dump();
    EXPECT_EQ(props["tss"].get<bool>(), c.tss) << c.scenario.dump();
    EXPECT_EQ(props["adjoint_metric"].get<bool>(), c.tss) << c.scenario.dump();
    for (const auto& id : r["results"]["identities"]) {
      if (id["applicable"].get<bool>()) {
        EXPECT_LE(id["residual"]["value"].get<double>(), id["residual"]["tolerance"].get<double>());
      }
    }
  }
}

TEST(Verify, CustomSystemUsesConfiguredProbes) {
  const json doc = {{"scenario",
                     {{"name", "custom"},
                      {"params", {{"n", 2}, {"m", 3}, {"X", {{"1 + 0.3*sin(x2)", "0.2*x1", "0"}, {"0.1", "1", "0.3*cos(x1)"}}}}}}},
                    {"functions", {"x1*x2 + cos(x2)"}},
                    {"forms", json::array({json::array({"x2", "sin(x1)"})})},
                    {"random_points", 4}};
  const auto o = run_doc(doc, "verify");
  const json r = as_json(o.report);
  expect_schema_valid(r);
  EXPECT_EQ(o.exit_code, 0) << o.summary;
  EXPECT_EQ(r["results"]["test_function"], "x1*x2 + cos(x2)");
  EXPECT_FALSE(r["results"]["properties"]["tss"].get<bool>());
}

TEST(Estimate, MomentsOnSpherePass) {
  const json doc = {{"scenario", {{"name", "sphere-gradient"}}}, {"checks", {"moments"}}, {"t", 1.0}, {"dt", 0.005}, {"n_paths", 400}};
  const auto o = run_doc(doc, "estimate");
  const json r = as_json(o.report);
  expect_schema_valid(r);
  EXPECT_EQ(o.exit_code, 0) << o.summary;
  const json& m = r["results"]["reports"][0];
  EXPECT_EQ(m["status"], "pass");
  EXPECT_EQ(m["checks"].size(), 4u);
  for (const auto& c : m["checks"]) EXPECT_EQ(c["relation"], ">=");
}

TEST(Estimate, BismutOnCirclePassesAgainstSeries) {
  const json doc = {{"scenario", {{"name", "circle"}}}, {"checks", {"bismut"}}, {"functions", {"x1", "x2"}},
                    {"t", 0.5},                         {"dt", 0.01},         {"n_paths", 2000}};
  const auto o = run_doc(doc, "estimate");
  const json r = as_json(o.report);
  expect_schema_valid(r);
  EXPECT_EQ(o.exit_code, 0) << o.summary;
  int series = 0;
  for (const auto& c : r["results"]["reports"][0]["checks"]) {
    if (c["name"].get<std::string>().find("series") != std::string::npos) {
      ++series;
      EXPECT_EQ(c["reference_provenance"], "derived-oracle");
    }
  }
  EXPECT_EQ(series, 2);
}

TEST(Estimate, NotApplicableIsReportedAndFails) {
  const json doc = {{"scenario", {{"name", "so3-left-invariant"}}}, {"checks", {"bochner"}}, {"dt", 0.01}, {"n_paths", 100}};
  const auto o = run_doc(doc, "estimate");
  const json r = as_json(o.report);
  expect_schema_valid(r);
  EXPECT_EQ(o.exit_code, cli::kCheckFailure);
  EXPECT_EQ(r["results"]["reports"][0]["status"], "not_applicable");
}

TEST(Estimate, TooFewAlivePathsFlushesPartialReport) {
  const json doc = {{"scenario", {{"name", "flat"}, {"params", {{"n", 2}, {"guard_radius", 0.6}}}}},
                    {"checks", {"generator"}},
                    {"functions", {"x1"}},
                    {"t", 0.5},
                    {"dt", 0.01},
                    {"n_paths", 200}};
  const auto o = run_doc(doc, "estimate");
  const json r = as_json(o.report);
  expect_schema_valid(r);
  EXPECT_EQ(o.exit_code, cli::kCheckFailure);
  const json& m = r["results"]["reports"][0];
  EXPECT_EQ(m["status"], "too_few_alive_paths");
  EXPECT_FALSE(m["pass"].get<bool>());
  EXPECT_EQ(m["paths"]["requested"], 200);
  EXPECT_LT(m["paths"]["alive"].get<int>(), 180);
  EXPECT_EQ(m["paths"]["alive"].get<int>() + m["paths"]["dropped"].get<int>(), 200);
}

TEST(Binary, MissingScenarioIsAConfigErrorNamingTheField) {
  const auto cfg = write_config("missing.json", {{"t", 1.0}});
  const CliRun r = run_cli("tensors " + cfg.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/scenario"), std::string::npos) << r.err;
}

TEST(Binary, TooFewPathsRefused) {
  const auto cfg = write_config("few.json", {{"scenario", {{"name", "flat"}}}, {"checks", {"moments"}}, {"n_paths", 1000}});
  const CliRun r = run_cli("estimate " + cfg.string() + " --paths 10");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/n_paths"), std::string::npos) << r.err;
  EXPECT_EQ(run_cli("estimate " + (scratch() / "nope.json").string()).code, 2);
  EXPECT_EQ(run_cli("frobnicate " + cfg.string()).code, 2);
}

TEST(Binary, NumericFailureExitsThree) {
  // The configured start point takes sqrt of a negative number.
  const auto cfg = write_config("domain.json", {{"scenario",
                                                 {{"name", "custom"},
                                                  {"params", {{"n", 2}, {"X", json::array({json::array({"1 + sqrt(x1)", "0"}), json::array({"0", "1"})})}}}}},
                                                {"x0", {-1.0, 0.0}}});
  const fs::path out = scratch() / "domain_report.json";
  const CliRun r = run_cli("tensors " + cfg.string() + " --out " + out.string());
  EXPECT_EQ(r.code, 3) << r.err;
  const json rep = json::parse(slurp(out));
  expect_schema_valid(rep);
  EXPECT_EQ(rep["status"], "error");
}

TEST(Binary, ReportsAndCsvAreReproducibleAcrossThreadCounts) {
  const auto cfg = write_config("repro.json", {{"command", "estimate"},
                                               {"scenario", {{"name", "sphere-gradient"}}},
                                               {"checks", {"filtered", "generator"}},
                                               {"functions", {"x3"}},
                                               {"t", 0.2},
                                               {"dt", 0.01},
                                               {"n_paths", 300}});
  std::vector<std::string> reports;
  std::vector<std::string> csvs;
  for (int threads : {1, 4, 1}) {
    const fs::path out = scratch() / ("repro_" + std::to_string(reports.size()) + ".json");
    const fs::path csv = scratch() / ("repro_" + std::to_string(reports.size()) + ".csv");
    const CliRun r = run_cli("run " + cfg.string() + " --threads " + std::to_string(threads) + " --out " + out.string() +
                          " --dump-paths " + csv.string());
    EXPECT_EQ(r.code, 0) << r.out << r.err;
    const json rep = json::parse(slurp(out));
    expect_schema_valid(rep);
    reports.push_back(cli::without_timing(cli::ojson::parse(slurp(out))));
    csvs.push_back(slurp(csv));
  }
  EXPECT_EQ(reports[0], reports[1]);
  EXPECT_EQ(reports[0], reports[2]);
  EXPECT_EQ(csvs[0], csvs[1]);
  // Header plus one row per (check, path, grid, column).
  EXPECT_GT(std::count(csvs[0].begin(), csvs[0].end(), '\n'), 600);
}

TEST(Binary, SimulateWritesSummaryReportAndCsv) {
  const auto cfg = write_config("sim.json", {{"scenario", {{"name", "so3-left-invariant"}}}, {"t", 0.3}, {"dt", 0.01}, {"n_paths", 150}});
  const fs::path out = scratch() / "sim.json.out";
  const fs::path csv = scratch() / "sim.csv";
  const CliRun r = run_cli("simulate " + cfg.string() + " --seed 11 --out " + out.string() + " --dump-paths " + csv.string());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("E norm_W_v0"), std::string::npos);
  const json rep = json::parse(slurp(out));
  expect_schema_valid(rep);
  EXPECT_EQ(rep["config"]["seed"], 11);
  EXPECT_EQ(rep["results"]["paths"]["alive"], 150);
  const std::string text = slurp(csv);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 151);
  // so3 is flat: the filtered flow is the adjoint transport, an isometry.
  for (const auto& q : rep["results"]["quantities"]) {
    if (q["name"] == "E norm_W_v0(t)") {
      EXPECT_NEAR(q["estimate"]["value"].get<double>(), 1.0, 1e-3);
    }
  }
}

TEST(Binary, ReportToStdout) {
  const CliRun r = run_cli("tensors " + std::string(SDEGEOM_CONFIG_DIR) + "/sphere_tensors.json --out -");
  EXPECT_EQ(r.code, 0);
  const json rep = json::parse(r.out);
  expect_schema_valid(rep);
  EXPECT_NE(r.err.find("tensors:"), std::string::npos);
}
