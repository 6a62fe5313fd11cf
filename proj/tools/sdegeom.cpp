// sdegeom: geometry and Monte Carlo checks for SDEs on manifolds.
//
//   sdegeom tensors  config.json [--out report.json]
//   sdegeom verify   config.json
//   sdegeom simulate config.json [--dump-paths paths.csv]
//   sdegeom estimate config.json [--check moments ...]
//   sdegeom run      config.json          (command taken from the config)
//
// Exit codes: 0 pass, 1 check failure, 2 config error, 3 runtime error.

#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "sdegeom/cli.hpp"

namespace {

using namespace sdegeom;

bool write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  return static_cast<bool>(out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Connections, curvature and Monte Carlo identity checks for SDEs on manifolds"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_path;
  std::string csv_path;
  cli::Overrides ov;
  std::uint64_t seed = 0;
  int paths = 0;
  double dt = 0.0;
  double t = 0.0;
  int threads = 0;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"tensors", "Metric, connections, torsion, curvature, Ricci and H_p at listed points"},
      {"verify", "Geometric identities by independent routes; nonzero exit on any failure"},
      {"simulate", "Flow, derivative flow, filtered flow and LW transport statistics"},
      {"estimate", "Monte Carlo checks: filtered, bismut, moments, generator, oneform, bochner, decompose"},
      {"run", "Take the command from the config's \"command\" field"}};
  std::vector<CLI::App*> subs;
  std::vector<CLI::Option*> opt_seed, opt_paths, opt_dt, opt_t, opt_threads;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("config", config_path, "JSON configuration (schema: docs/config.schema.json)")->required();
    opt_seed.push_back(sub->add_option("--seed", seed, "Override the seed"));
    opt_paths.push_back(sub->add_option("--paths", paths, "Override n_paths"));
    opt_dt.push_back(sub->add_option("--dt", dt, "Override the step size"));
    opt_t.push_back(sub->add_option("--t", t, "Override the time horizon"));
    opt_threads.push_back(sub->add_option("--threads", threads, "Worker threads (default: hardware parallelism)"));
    sub->add_option("--out", out_path, "Write the JSON report here (\"-\" for stdout)");
    sub->add_option("--dump-paths", csv_path, "Write per-path values as CSV");
    if (name == "estimate" || name == "run") sub->add_option("--check", ov.checks, "Checks to run instead of the config's list");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return cli::kConfigError;
  }

  std::string subcommand;
  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    subcommand = subs[i]->get_name();
    if (opt_seed[i]->count()) ov.seed = seed;
    if (opt_paths[i]->count()) ov.paths = paths;
    if (opt_dt[i]->count()) ov.dt = dt;
    if (opt_t[i]->count()) ov.t = t;
    if (opt_threads[i]->count()) ov.threads = threads;
  }

  cli::RunConfig rc;
  try {
    rc = cli::load_config(config_path, subcommand, ov);
  } catch (const Error& e) {
    std::cerr << "sdegeom: " << e.what() << "\n";
    return cli::kConfigError;
  }
  if (!out_path.empty()) rc.report_path = out_path;
  if (!csv_path.empty()) rc.csv_path = csv_path;

  const cli::Outcome res = cli::run(rc);
  const bool report_to_stdout = rc.report_path == "-";
  (report_to_stdout ? std::cerr : std::cout) << res.summary;
  if (report_to_stdout) {
    std::cout << res.report.dump(2) << "\n";
  } else if (!rc.report_path.empty() && !write_file(rc.report_path, res.report.dump(2) + "\n")) {
    std::cerr << "sdegeom: cannot write " << rc.report_path << "\n";
    return cli::kRuntimeError;
  }
  if (!rc.csv_path.empty()) {
    if (res.csv.empty()) {
      std::cerr << "sdegeom: " << rc.command << " produces no per-path data; --dump-paths ignored\n";
    } else if (!write_file(rc.csv_path, res.csv)) {
      std::cerr << "sdegeom: cannot write " << rc.csv_path << "\n";
      return cli::kRuntimeError;
    }
  }
  if (res.exit_code == cli::kConfigError || res.exit_code == cli::kRuntimeError) std::cerr << "sdegeom: " << res.summary;
  return res.exit_code;
}
