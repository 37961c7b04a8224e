#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dia/errors.hpp"
#include "dia/harness.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

dia::ExperimentConfig load(const std::string& path) {
  return dia::experiment_config_from_json(dia::read_json_file(path));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive instrument design for indirect experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, experiment;
  std::optional<int> trials;
  std::optional<std::uint64_t> seed;
  auto* run = app.add_subcommand("run", "Run an experiment and write CSV results");
  run->add_option("--config", config_path, "Experiment JSON")->required();
  run->add_option("--out", out_dir, "Output directory")->required();
  run->add_option("--trials", trials, "Override the number of trials");
  run->add_option("--seed", seed, "Override the root seed");
  run->add_option("--experiment", experiment, "Override the experiment kind");

  std::string oracle_config, oracle_out;
  double grid_step = 0.05;
  auto* oracle = app.add_subcommand("oracle", "Brute-force the best fixed policy on a simplex grid");
  oracle->add_option("--config", oracle_config, "Experiment JSON")->required();
  oracle->add_option("--grid-step", grid_step, "Simplex grid step")->capture_default_str();
  oracle->add_option("--out", oracle_out, "Output directory (default: the config's output)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : kConfigError;
  }

  try {
    dia::ExperimentConfig cfg;
    std::string dir;
    if (*run) {
      cfg = load(config_path);
      if (trials) cfg.trials = *trials;
      if (seed) cfg.seed = *seed;
      if (!experiment.empty()) cfg.experiment = dia::parse_experiment_kind(experiment);
      dir = out_dir;
    } else {
      cfg = load(oracle_config);
      cfg.experiment = dia::ExperimentKind::oracle_table;
      cfg.diagnostics.oracle.grid_step = grid_step;
      dir = oracle_out.empty() ? cfg.output : oracle_out;
    }
    cfg.validate();
    for (const auto& p : dia::run_experiment(cfg, dir)) std::cout << p.string() << "\n";
    return 0;
  } catch (const dia::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}
