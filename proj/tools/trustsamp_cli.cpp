// Command-line runner: train models, calibrate the manifold boundary,
// draw guided samples, and execute budget-matched benchmarks.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "trustsamp/experiment.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool has_seed = false;
  std::int64_t nfe_budget = 0;
  bool has_budget = false;
  bool no_boundary = false;
  bool schedule_reversed = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "experiment config file (JSON)")->required();
  cmd->add_option("--out", f.out_dir, "output directory override");
  cmd->add_option("--seed", f.seed, "seed override for this command")->each([&](const std::string&) {
    f.has_seed = true;
  });
  cmd->add_option("--nfe-budget", f.nfe_budget, "NFE budget override")->each([&](const std::string&) {
    f.has_budget = true;
  });
  cmd->add_flag("--no-boundary", f.no_boundary, "disable eps_max early termination for trust methods");
  cmd->add_flag("--schedule-reversed", f.schedule_reversed, "flip trust schedule orientation");
}

trustsamp::ExperimentConfig resolve(const CommonFlags& f, const std::string& command) {
  trustsamp::ExperimentConfig cfg = trustsamp::load_config(f.config_path);
  if (!f.out_dir.empty()) {
    cfg.output_dir = f.out_dir;
    // Only follow the override when the config did not pin a checkpoint.
    if (cfg.checkpoint_path.empty()) cfg.checkpoint_path.clear();
  }
  if (f.has_budget) cfg.nfe_budget = f.nfe_budget;
  for (auto& m : cfg.methods) {
    if (m.kind != "trust") continue;
    if (f.no_boundary) m.eps_max_mode = "disabled";
    if (f.schedule_reversed) m.schedule_reversed = true;
  }
  if (f.has_seed) {
    if (command == "train") {
      cfg.training.seed = f.seed;
    } else if (command == "calibrate") {
      cfg.calibration.seed = f.seed;
    } else if (command == "sample") {
      cfg.sample.seed = f.seed;
      cfg.sample.has_seed = true;
    } else if (command == "benchmark") {
      cfg.seeds = {f.seed};
    }
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"guided diffusion sampling toolkit"};
  app.require_subcommand(1);

  CommonFlags train_f, calibrate_f, sample_f, benchmark_f, validate_f;
  CLI::App* train_cmd = app.add_subcommand("train", "train a denoiser and write a checkpoint");
  add_common(train_cmd, train_f);
  CLI::App* calibrate_cmd = app.add_subcommand("calibrate", "estimate eps_max from unconstrained chains");
  add_common(calibrate_cmd, calibrate_f);
  CLI::App* sample_cmd = app.add_subcommand("sample", "draw guided samples for one method and task");
  add_common(sample_cmd, sample_f);
  CLI::App* benchmark_cmd = app.add_subcommand("benchmark", "run the budget-matched benchmark grid");
  add_common(benchmark_cmd, benchmark_f);
  CLI::App* validate_cmd = app.add_subcommand("validate", "dry-run: parse config, report budgets and tasks");
  add_common(validate_cmd, validate_f);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      trustsamp::cmd_train(resolve(train_f, "train"));
    } else if (calibrate_cmd->parsed()) {
      trustsamp::cmd_calibrate(resolve(calibrate_f, "calibrate"));
    } else if (sample_cmd->parsed()) {
      trustsamp::cmd_sample(resolve(sample_f, "sample"));
    } else if (benchmark_cmd->parsed()) {
      trustsamp::cmd_benchmark(resolve(benchmark_f, "benchmark"));
    } else if (validate_cmd->parsed()) {
      trustsamp::cmd_validate(resolve(validate_f, "validate"), std::cout);
    }
  } catch (const trustsamp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
