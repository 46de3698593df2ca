#include <filesystem>
#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "trustsamp/experiment.hpp"

using namespace trustsamp;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "trustsamp_experiment_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc);
  os << content;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  REQUIRE(is.good());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

/// Small but complete config: tiny model, tiny budget, one task.
std::string tiny_config_json(const std::string& out_dir) {
  return R"({
  "dataset": {"kind": "gaussian_mixture", "n": 120, "seed": 7,
              "params": {"components": 4, "radius": 2.0, "std": 0.15}},
  "model": {"hidden": [16, 16], "time_embed_dim": 8},
  "training": {"epochs": 4, "batch_size": 32, "learning_rate": 0.002, "seed": 3},
  "schedule": {"family": "linear", "T": 60, "beta_start": 0.001, "beta_end": 0.04},
  "grid": {"steps": 6, "eta": 1.0},
  "nfe_budget": 12,
  "methods": [
    {"name": "trust", "method": "trust", "schedule": {"kind": "constant", "start": 1}, "w": 0.3},
    {"name": "dps", "method": "dps", "guidance_scale": 0.2}
  ],
  "tasks": [{"name": "pin_x0", "kind": "pin_coordinate", "params": {"coord": 0}}],
  "seeds": [1, 2],
  "n_chains": 4,
  "workers": 1,
  "output_dir": ")" + out_dir + R"("
})";
}

ExperimentConfig tiny_config(const std::filesystem::path& dir) {
  const auto cfg_path = dir / "config.json";
  write_file(cfg_path, tiny_config_json((dir / "out").string()));
  return load_config(cfg_path.string());
}

}  // namespace

TEST_CASE("config loading and defaults") {
  const auto dir = temp_dir("config");
  const ExperimentConfig cfg = tiny_config(dir);
  REQUIRE(cfg.dataset.mixture.components == 4);
  REQUIRE(cfg.schedule.T == 60);
  REQUIRE(cfg.methods.size() == 2);
  REQUIRE(cfg.methods[0].kind == "trust");
  REQUIRE(cfg.methods[0].w == 0.3);
  REQUIRE(cfg.methods[1].kind == "dps");
  REQUIRE(cfg.tasks.size() == 1);
  REQUIRE(cfg.nfe_budget == 12);
}

TEST_CASE("malformed or missing configs raise ConfigError") {
  const auto dir = temp_dir("badconfig");
  REQUIRE_THROWS_AS(load_config((dir / "missing.json").string()), ConfigError);
  write_file(dir / "bad.json", "{not json");
  REQUIRE_THROWS_AS(load_config((dir / "bad.json").string()), ConfigError);
  write_file(dir / "badmethod.json", R"({"methods": [{"method": "warp_drive"}]})");
  REQUIRE_THROWS_AS(load_config((dir / "badmethod.json").string()), ConfigError);
}

TEST_CASE("budget resolution equalizes methods") {
  const auto dir = temp_dir("budget");
  ExperimentConfig cfg = tiny_config(dir);
  const auto budgets = resolve_budgets(cfg);
  REQUIRE(budgets[0].budget == 12.0);
  REQUIRE(budgets[0].grid_steps == 6);
  REQUIRE(budgets[1].budget == 12.0);
  REQUIRE(budgets[1].grid_steps == 6);  // 12 / 2

  SECTION("trust schedule that misses the budget is rejected") {
    cfg.methods[0].schedule = TrustSchedule::constant(2);  // budget would be 18
    REQUIRE_THROWS_AS(resolve_budgets(cfg), ConfigError);
  }
  SECTION("odd budgets cannot be split for the baselines") {
    cfg.nfe_budget = 13;
    cfg.methods[0].schedule = TrustSchedule::stochastic_linear(7.0 / 6.0, 7.0 / 6.0);
    REQUIRE_THROWS_AS(resolve_budgets(cfg), ConfigError);
  }
}

TEST_CASE("missing dataset files raise ConfigError") {
  const auto dir = temp_dir("missingdata");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.dataset_path = (dir / "nope.txt").string();
  REQUIRE_THROWS_AS(load_environment(cfg), ConfigError);
}

TEST_CASE("ensure_model trains once and reloads bitwise") {
  const auto dir = temp_dir("model");
  const ExperimentConfig cfg = tiny_config(dir);
  const ExperimentEnv env = load_environment(cfg);
  const MlpDenoiser trained = ensure_model(cfg, env);
  REQUIRE(std::filesystem::exists(checkpoint_path_for(cfg)));
  const MlpDenoiser reloaded = ensure_model(cfg, env);
  for (std::size_t l = 0; l < trained.weights().size(); ++l)
    REQUIRE((trained.weights()[l] - reloaded.weights()[l]).norm() == 0.0);
}

TEST_CASE("benchmark rows are deterministic and scheduling-independent") {
  const auto dir = temp_dir("bench");
  ExperimentConfig cfg = tiny_config(dir);
  const ExperimentEnv env = load_environment(cfg);
  const MlpDenoiser model = ensure_model(cfg, env);

  const BenchmarkOutput a = run_benchmark(cfg, model, env);
  REQUIRE(a.rows.size() == 2 * 1 * 2);  // methods x tasks x seeds
  const BenchmarkOutput b = run_benchmark(cfg, model, env);
  cfg.workers = 2;
  const BenchmarkOutput c = run_benchmark(cfg, model, env);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    REQUIRE(a.rows[i].method == b.rows[i].method);
    REQUIRE(a.rows[i].violation == b.rows[i].violation);
    REQUIRE(a.rows[i].sw2 == b.rows[i].sw2);
    REQUIRE(a.rows[i].mean_nfe == b.rows[i].mean_nfe);
    REQUIRE(a.rows[i].violation == c.rows[i].violation);
    REQUIRE(a.rows[i].diversity == c.rows[i].diversity);
  }
  for (const auto& row : a.rows) {
    REQUIRE(row.mean_nfe <= 12.0 + 1e-9);
    REQUIRE(std::isfinite(row.violation));
    REQUIRE(std::isfinite(row.sw2));
    REQUIRE(std::isfinite(row.diversity));
    REQUIRE(row.runtime_s == 0.0);  // walltime recording off by default
  }
}

TEST_CASE("metrics CSV carries the exact header and row grid") {
  const auto dir = temp_dir("csv");
  const ExperimentConfig cfg = tiny_config(dir);
  const ExperimentEnv env = load_environment(cfg);
  const MlpDenoiser model = ensure_model(cfg, env);
  const BenchmarkOutput out = run_benchmark(cfg, model, env);
  const auto csv_path = dir / "metrics.csv";
  write_metrics_csv(csv_path.string(), out.rows);
  const std::string content = read_file(csv_path);
  REQUIRE(content.rfind("method,task,seed,n,mean_nfe,violation,sw2,diversity,runtime_s\n", 0) == 0);
  const auto lines = std::count(content.begin(), content.end(), '\n');
  REQUIRE(lines == 1 + static_cast<long>(out.rows.size()));
}

TEST_CASE("trace CSV has one row per chain and step") {
  const auto dir = temp_dir("traces");
  const ExperimentConfig cfg = tiny_config(dir);
  const ExperimentEnv env = load_environment(cfg);
  const MlpDenoiser model = ensure_model(cfg, env);
  Rng task_rng = Rng::substream(cfg.dataset.seed, 0);
  const Task task = make_task(cfg.tasks[0], env.dataset_spec, env.dataset, task_rng);
  const auto budgets = resolve_budgets(cfg);
  const ResolvedMethod rm = resolve_method(cfg, cfg.methods[0], budgets[0], model, env.noise);
  std::vector<SampleTrace> traces;
  for (int c = 0; c < 3; ++c) {
    Rng rng = Rng::substream(9, static_cast<std::uint64_t>(c));
    traces.push_back(run_method_chain(model, rm, *task.constraint, env.noise, rng).trace);
  }
  const auto path = dir / "traces.csv";
  write_traces_csv(path.string(), traces);
  const std::string content = read_file(path);
  REQUIRE(content.rfind(std::string(kTraceCsvHeader) + "\n", 0) == 0);
  REQUIRE(std::count(content.begin(), content.end(), '\n') == 1 + 3 * 6);
}

TEST_CASE("samples file round trips") {
  const auto dir = temp_dir("samples");
  Mat samples(5, 2);
  Rng rng(1);
  for (int i = 0; i < 5; ++i) samples.row(i) = rng.normal_vec(2).transpose();
  const auto path = (dir / "samples.txt").string();
  save_samples(path, "trust", "pin_x0", 3, samples);
  const Mat loaded = load_samples(path);
  REQUIRE(loaded.rows() == 5);
  REQUIRE(std::memcmp(loaded.data(), samples.data(), sizeof(double) * samples.size()) == 0);
}

TEST_CASE("method and task selection report unknown names") {
  const auto dir = temp_dir("select");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.sample.method = "no_such_method";
  REQUIRE_THROWS_AS(cmd_sample(cfg), ConfigError);
  cfg.sample.method = "trust";
  cfg.sample.task = "no_such_task";
  REQUIRE_THROWS_AS(cmd_sample(cfg), ConfigError);
}

TEST_CASE("record_walltime fills the runtime column") {
  const auto dir = temp_dir("walltime");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.record_walltime = true;
  cfg.seeds = {1};
  const ExperimentEnv env = load_environment(cfg);
  const MlpDenoiser model = ensure_model(cfg, env);
  const BenchmarkOutput out = run_benchmark(cfg, model, env);
  for (const auto& row : out.rows) REQUIRE(row.runtime_s > 0.0);
}
