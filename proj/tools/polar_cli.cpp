#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "acceptance_checks.hpp"
#include "polar/harness.hpp"

namespace {

constexpr int exit_ok = 0;
constexpr int exit_config = 1;
constexpr int exit_runtime = 2;

int do_run(const std::string& config_path, const std::vector<std::uint64_t>& seeds, std::optional<int> rounds,
           const std::string& output) {
  polar::experiment_config cfg;
  try {
    cfg = polar::parse_config(config_path);
    if (!seeds.empty()) cfg.seeds = seeds;
    if (rounds) cfg.sim.rounds = *rounds;
    if (!output.empty()) cfg.output_dir = output;
    cfg.validate();
  } catch (const polar::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exit_config;
  }
  try {
    const auto res = polar::run_config(cfg, std::cout);
    for (const auto& f : res.failures) std::cerr << "seed " << f.seed << " failed: " << f.message << "\n";
    std::cout << "wrote " << res.completed.size() << " of " << cfg.seeds.size() << " seeds to "
              << res.output_dir.string() << "\n";
    return res.ok() ? exit_ok : exit_runtime;
  } catch (const polar::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << "\n";
    return exit_runtime;
  }
}

int do_report(const std::string& dir) {
  try {
    const auto res = polar::report(dir, std::cout);
    for (const auto& [path, msg] : res.bad_files) std::cerr << "skipped " << path.string() << ": " << msg << "\n";
    return exit_ok;
  } catch (const std::exception& e) {
    std::cerr << "report failed: " << e.what() << "\n";
    return exit_runtime;
  }
}

int do_selftest() {
  bool all = true;
  for (const auto& check : acceptance::fast_checks()) {
    acceptance::verdict v;
    try {
      v = check.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (v.pass ? "PASS " : "FAIL ") << check.name << ": " << v.detail << "\n";
    all = all && v.pass;
  }
  return all ? exit_ok : exit_runtime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"polar: federated learning backdoor simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::uint64_t> seeds;
  std::optional<int> rounds;
  std::string output;
  auto* run = app.add_subcommand("run", "run every seed of an experiment config");
  run->add_option("config", config_path, "JSON config file (empty file = defaults)")->required();
  run->add_option("--seed-override", seeds, "replace the configured seed list");
  run->add_option("--rounds-override", rounds, "replace sim.rounds");
  run->add_option("--output", output, "replace output_dir");

  std::string report_dir;
  auto* rep = app.add_subcommand("report", "tabulate every summary under a directory");
  rep->add_option("dir", report_dir, "run directory")->required();

  auto* self = app.add_subcommand("selftest", "run the fast oracle checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_config;
  }

  if (*run) return do_run(config_path, seeds, rounds, output);
  if (*rep) return do_report(report_dir);
  if (*self) return do_selftest();
  return exit_config;
}
