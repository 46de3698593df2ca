#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "trustsamp/baselines.hpp"
#include "trustsamp/datasets.hpp"
#include "trustsamp/denoiser.hpp"
#include "trustsamp/evaluation.hpp"
#include "trustsamp/trust_sampler.hpp"

namespace trustsamp {

/// Invalid or unreadable configuration / input files. The CLI maps this
/// to exit status 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScheduleConfig {
  std::string family = "linear";  // linear | cosine
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule build() const {
    if (family == "linear") return linear_beta_schedule(T, beta_start, beta_end);
    if (family == "cosine") return cosine_beta_schedule(T);
    throw ConfigError("schedule.family must be 'linear' or 'cosine'");
  }
};

struct MethodConfig {
  std::string label;   // CSV method column; defaults to the kind
  std::string kind;    // trust | dps | dsg | lgd_mc | unguided
  // trust
  TrustSchedule schedule = TrustSchedule::constant(0);
  double w = 1.0;
  std::string eps_max_mode = "disabled";  // disabled | calibrated | fixed
  double eps_max_value = 0.0;
  bool schedule_reversed = false;
  // baselines
  double guidance_scale = 1.0;
  int mc_particles = 10;
  double mc_radius_scale = 1.0;
  bool sigma_scaled_step = false;
};

struct CalibrationConfig {
  int n_chains = 5;
  double margin = 3.0;
  std::uint64_t seed = 1234;
};

struct SampleSelection {
  std::string method;  // method label; empty = first configured method
  std::string task;    // task name; empty = first configured task
  int n = 0;           // 0 = n_chains
  std::uint64_t seed = 0;
  bool has_seed = false;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::string dataset_path;  // when set, load instead of generate
  MlpConfig model;
  TrainConfig training;
  ScheduleConfig schedule;
  int grid_steps = 200;
  double eta = 1.0;
  std::int64_t nfe_budget = 0;  // 0 = no budget matching
  std::vector<MethodConfig> methods;
  std::vector<TaskSpec> tasks;
  std::vector<std::uint64_t> seeds;
  int n_chains = 64;
  std::string output_dir = "out";
  std::string checkpoint_path;  // empty = <output_dir>/checkpoint.bin
  int workers = 1;
  bool record_walltime = false;
  CalibrationConfig calibration;
  SampleSelection sample;
  int sw2_projections = 64;
  int diversity_pairs = 256;
};

// ---------------------------------------------------------------------------
// JSON parsing

namespace detail {

using nlohmann::json;

inline json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw ConfigError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

inline TaskSpec parse_task(const json& j) {
  TaskSpec t;
  t.kind = j.at("kind").get<std::string>();
  t.name = j.value("name", t.kind);
  t.dataset_id = j.value("dataset_id", std::string{});
  if (j.contains("params"))
    for (const auto& [k, v] : j.at("params").items()) t.params[k] = v.get<double>();
  if (j.contains("parts"))
    for (const auto& p : j.at("parts")) t.parts.push_back(parse_task(p));
  return t;
}

inline TrustSchedule parse_schedule(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  const double start = j.at("start").get<double>();
  const double end = j.value("end", start);
  if (kind == "constant") return TrustSchedule::constant(start);
  if (kind == "linear") return TrustSchedule::linear(start, end);
  if (kind == "stochastic_linear") return TrustSchedule::stochastic_linear(start, end);
  throw ConfigError("trust schedule kind must be constant | linear | stochastic_linear");
}

inline MethodConfig parse_method(const json& j) {
  MethodConfig m;
  m.kind = j.at("method").is_string() ? j.at("method").get<std::string>() : "trust";
  m.label = j.value("name", m.kind);
  if (m.kind == "trust") {
    if (j.contains("schedule")) m.schedule = parse_schedule(j.at("schedule"));
    m.w = j.value("w", 1.0);
    m.schedule_reversed = j.value("schedule_reversed", false);
    if (j.contains("eps_max")) {
      const auto& e = j.at("eps_max");
      if (e.is_string()) {
        const std::string mode = e.get<std::string>();
        if (mode != "disabled" && mode != "calibrated")
          throw ConfigError("eps_max must be 'disabled', 'calibrated', or a number");
        m.eps_max_mode = mode;
      } else {
        m.eps_max_mode = "fixed";
        m.eps_max_value = e.get<double>();
      }
    }
  } else if (m.kind == "dps" || m.kind == "dsg" || m.kind == "lgd_mc") {
    m.guidance_scale = j.value("guidance_scale", 1.0);
    m.mc_particles = j.value("mc_particles", 10);
    m.mc_radius_scale = j.value("mc_radius_scale", 1.0);
    m.sigma_scaled_step = j.value("sigma_scaled_step", false);
  } else if (m.kind != "unguided") {
    throw ConfigError("unknown method kind: " + m.kind);
  }
  return m;
}

}  // namespace detail

inline ExperimentConfig load_config(const std::string& path) {
  using detail::json;
  const json j = detail::load_json_file(path);
  ExperimentConfig c;
  try {
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      if (d.contains("path")) c.dataset_path = d.at("path").get<std::string>();
      c.dataset.kind = DatasetSpec::kind_from_name(d.value("kind", std::string("gaussian_mixture")));
      c.dataset.n = d.value("n", 1000);
      c.dataset.seed = d.value("seed", 0ULL);
      if (d.contains("params")) {
        const auto& p = d.at("params");
        switch (c.dataset.kind) {
          case DatasetSpec::Kind::GaussianMixture:
            c.dataset.mixture.components = p.value("components", 8);
            c.dataset.mixture.radius = p.value("radius", 4.0);
            c.dataset.mixture.std_dev = p.value("std", 0.1);
            break;
          case DatasetSpec::Kind::SwissRoll:
            c.dataset.swiss.noise = p.value("noise", 0.1);
            c.dataset.swiss.scale = p.value("scale", 0.25);
            break;
          case DatasetSpec::Kind::Trajectory:
            c.dataset.trajectory.frames = p.value("frames", 32);
            c.dataset.trajectory.dims_per_frame = p.value("dims_per_frame", 2);
            c.dataset.trajectory.smoothness = p.value("smoothness", 4.0);
            break;
        }
      }
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.contains("hidden")) c.model.hidden = m.at("hidden").get<std::vector<int>>();
      c.model.time_embed_dim = m.value("time_embed_dim", 32);
      c.model.activation = activation_from_name(m.value("activation", std::string("silu")));
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      c.training.epochs = t.value("epochs", 200);
      c.training.batch_size = t.value("batch_size", 128);
      c.training.learning_rate = t.value("learning_rate", 1e-3);
      c.training.seed = t.value("seed", 0ULL);
      c.training.dataset_id = t.value("dataset_id", std::string{});
    }
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      c.schedule.family = s.value("family", std::string("linear"));
      c.schedule.T = s.value("T", 1000);
      c.schedule.beta_start = s.value("beta_start", 1e-4);
      c.schedule.beta_end = s.value("beta_end", 0.02);
    }
    if (j.contains("grid")) {
      c.grid_steps = j.at("grid").value("steps", 200);
      c.eta = j.at("grid").value("eta", 1.0);
    }
    c.nfe_budget = j.value("nfe_budget", 0LL);
    if (j.contains("methods"))
      for (const auto& m : j.at("methods")) c.methods.push_back(detail::parse_method(m));
    if (j.contains("tasks"))
      for (const auto& t : j.at("tasks")) c.tasks.push_back(detail::parse_task(t));
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.n_chains = j.value("n_chains", 64);
    c.output_dir = j.value("output_dir", std::string("out"));
    c.checkpoint_path = j.value("checkpoint", std::string{});
    c.workers = j.value("workers", 1);
    c.record_walltime = j.value("record_walltime", false);
    if (j.contains("calibration")) {
      const auto& cal = j.at("calibration");
      c.calibration.n_chains = cal.value("n_chains", 5);
      c.calibration.margin = cal.value("margin", 3.0);
      c.calibration.seed = cal.value("seed", 1234ULL);
    }
    if (j.contains("sample")) {
      const auto& s = j.at("sample");
      c.sample.method = s.value("method", std::string{});
      c.sample.task = s.value("task", std::string{});
      c.sample.n = s.value("n", 0);
      if (s.contains("seed")) {
        c.sample.seed = s.at("seed").get<std::uint64_t>();
        c.sample.has_seed = true;
      }
    }
    c.sw2_projections = j.value("sw2_projections", 64);
    c.diversity_pairs = j.value("diversity_pairs", 256);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Budget resolution

struct MethodBudget {
  std::string label;
  std::string kind;
  int grid_steps = 0;
  double budget = 0.0;  // maximum expected NFEs
};

/// Matches every method to the configured NFE budget: the trust schedule
/// must sum to it over the configured grid, gradient-step baselines get
/// budget/2 DDIM steps (base pass + gradient pass each).
inline std::vector<MethodBudget> resolve_budgets(const ExperimentConfig& cfg) {
  std::vector<MethodBudget> out;
  for (const auto& m : cfg.methods) {
    MethodBudget b;
    b.label = m.label;
    b.kind = m.kind;
    if (m.kind == "trust") {
      b.grid_steps = cfg.grid_steps;
      b.budget = nfe_budget_for(m.schedule, cfg.grid_steps);
      if (cfg.nfe_budget > 0 && b.budget > static_cast<double>(cfg.nfe_budget) + 1e-9)
        throw ConfigError("method '" + m.label + "': trust schedule budget " + format_double(b.budget) +
                          " exceeds nfe_budget " + std::to_string(cfg.nfe_budget));
    } else if (m.kind == "unguided") {
      b.grid_steps = cfg.grid_steps;
      b.budget = cfg.grid_steps;
    } else {
      if (cfg.nfe_budget > 0) {
        if (cfg.nfe_budget % 2 != 0)
          throw ConfigError("nfe_budget must be even for the 2-passes-per-step baselines");
        b.grid_steps = static_cast<int>(cfg.nfe_budget / 2);
      } else {
        b.grid_steps = cfg.grid_steps;
      }
      b.budget = 2.0 * b.grid_steps;
    }
    if (b.grid_steps < 1 || b.grid_steps > cfg.schedule.T)
      throw ConfigError("method '" + m.label + "': resolved grid steps " + std::to_string(b.grid_steps) +
                        " outside 1..T");
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model / dataset acquisition

struct ExperimentEnv {
  NoiseSchedule noise;
  DatasetSpec dataset_spec;
  Mat dataset;
  Mat train_set;
  Mat heldout;
};

inline ExperimentEnv load_environment(const ExperimentConfig& cfg) {
  ExperimentEnv env;
  env.noise = cfg.schedule.build();
  if (!cfg.dataset_path.empty()) {
    if (!std::filesystem::exists(cfg.dataset_path))
      throw ConfigError("dataset file not found: " + cfg.dataset_path);
    auto [spec, data] = load_dataset(cfg.dataset_path);
    env.dataset_spec = spec;
    env.dataset = std::move(data);
  } else {
    env.dataset_spec = cfg.dataset;
    env.dataset = generate(cfg.dataset);
  }
  env.train_set = train_split(env.dataset);
  env.heldout = heldout_split(env.dataset);
  return env;
}

inline std::string checkpoint_path_for(const ExperimentConfig& cfg) {
  if (!cfg.checkpoint_path.empty()) return cfg.checkpoint_path;
  return (std::filesystem::path(cfg.output_dir) / "checkpoint.bin").string();
}

/// Loads the configured checkpoint if present, otherwise trains from the
/// config and saves it there. Either path yields bitwise-identical
/// weights for identical configs.
inline MlpDenoiser ensure_model(const ExperimentConfig& cfg, const ExperimentEnv& env,
                                std::vector<double>* loss_history = nullptr) {
  const std::string path = checkpoint_path_for(cfg);
  if (std::filesystem::exists(path)) {
    return load_checkpoint(path).model;
  }
  TrainResult tr = train(env.train_set, env.noise, cfg.training, cfg.model);
  if (loss_history) *loss_history = tr.loss_history;
  CheckpointMeta meta;
  meta.T = static_cast<std::uint32_t>(cfg.schedule.T);
  meta.beta_start = cfg.schedule.beta_start;
  meta.beta_end = cfg.schedule.beta_end;
  meta.seed = cfg.training.seed;
  meta.epochs = static_cast<std::uint32_t>(cfg.training.epochs);
  meta.batch_size = static_cast<std::uint32_t>(cfg.training.batch_size);
  meta.learning_rate = cfg.training.learning_rate;
  meta.final_loss = tr.final_loss;
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  save_checkpoint(path, tr.model, meta);
  return tr.model;
}

// ---------------------------------------------------------------------------
// Sampling dispatch

struct ResolvedMethod {
  MethodConfig method;
  StepGrid grid;
  double eps_max = 0.0;
  bool eps_max_enabled = false;
  std::int64_t max_nfe = 0;
};

inline ResolvedMethod resolve_method(const ExperimentConfig& cfg, const MethodConfig& m, const MethodBudget& b,
                                     const MlpDenoiser& model, const NoiseSchedule& noise) {
  ResolvedMethod r;
  r.method = m;
  r.grid = StepGrid::uniform(cfg.schedule.T, b.grid_steps, cfg.eta);
  if (m.kind == "trust") {
    if (m.eps_max_mode == "fixed") {
      r.eps_max = m.eps_max_value;
      r.eps_max_enabled = true;
    } else if (m.eps_max_mode == "calibrated") {
      Rng rng(cfg.calibration.seed);
      const CalibrationResult cal =
          calibrate_epsilon_max(model, noise, r.grid, cfg.calibration.n_chains, rng, cfg.calibration.margin);
      r.eps_max = cal.eps_max;
      r.eps_max_enabled = true;
    }
    if (cfg.nfe_budget > 0) r.max_nfe = cfg.nfe_budget;
  }
  return r;
}

template <class Model>
SampleResult run_method_chain(const Model& model, const ResolvedMethod& rm, const Constraint& con,
                              const NoiseSchedule& noise, Rng& rng) {
  const auto& m = rm.method;
  if (m.kind == "trust") {
    SamplerConfig sc;
    sc.grid = rm.grid;
    sc.schedule = m.schedule;
    sc.w = m.w;
    sc.eps_max = rm.eps_max;
    sc.eps_max_enabled = rm.eps_max_enabled;
    sc.schedule_reversed = m.schedule_reversed;
    sc.max_nfe = rm.max_nfe;
    return trust_sample(model, con, noise, sc, rng);
  }
  if (m.kind == "unguided") return unguided_sample(model, noise, rm.grid, rng);
  BaselineConfig bc;
  bc.grid = rm.grid;
  bc.guidance_scale = m.guidance_scale;
  bc.mc_particles = m.mc_particles;
  bc.mc_radius_scale = m.mc_radius_scale;
  bc.sigma_scaled_step = m.sigma_scaled_step;
  if (m.kind == "dps") {
    bc.method = BaselineMethod::Dps;
    return dps_sample(model, con, noise, bc, rng);
  }
  if (m.kind == "dsg") {
    bc.method = BaselineMethod::Dsg;
    return dsg_sample(model, con, noise, bc, rng);
  }
  bc.method = BaselineMethod::LgdMc;
  return lgd_mc_sample(model, con, noise, bc, rng);
}

// ---------------------------------------------------------------------------
// Output writers

inline void save_samples(const std::string& path, const std::string& method, const std::string& task,
                         std::uint64_t seed, const Mat& samples) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("save_samples: cannot open " + path);
  os << "# trustsamp-samples method=" << method << " task=" << task << " n=" << samples.rows()
     << " seed=" << seed << " dim=" << samples.cols() << "\n";
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    for (Eigen::Index j = 0; j < samples.cols(); ++j) {
      if (j) os << ' ';
      os << format_double(samples(i, j));
    }
    os << '\n';
  }
}

inline Mat load_samples(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_samples: cannot open " + path);
  std::string header;
  if (!std::getline(is, header) || header.rfind("# trustsamp-samples ", 0) != 0)
    throw std::runtime_error("load_samples: bad header in " + path);
  std::istringstream hs(header);
  std::string tok;
  Eigen::Index n = 0, dim = 0;
  while (hs >> tok) {
    if (tok.rfind("n=", 0) == 0) n = std::stoll(tok.substr(2));
    if (tok.rfind("dim=", 0) == 0) dim = std::stoll(tok.substr(4));
  }
  Mat out(n, dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < dim; ++j)
      if (!(is >> out(i, j))) throw std::runtime_error("load_samples: truncated data");
  return out;
}

inline constexpr const char* kTraceCsvHeader =
    "chain,step,t,j_limit,j_used,boundary,loss_before,loss_after,eps_norm_last,step_nfe";

inline void write_traces_csv(const std::string& path, const std::vector<SampleTrace>& traces) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("write_traces_csv: cannot open " + path);
  os << kTraceCsvHeader << "\n";
  for (std::size_t c = 0; c < traces.size(); ++c) {
    for (const auto& st : traces[c].steps) {
      os << c << ',' << st.k << ',' << st.t << ',' << st.j_limit << ',' << st.j_used << ','
         << (st.boundary_triggered ? 1 : 0) << ',' << format_double(st.loss_before) << ','
         << format_double(st.loss_after) << ',' << format_double(st.eps_norms.back()) << ','
         << (1 + st.j_used) << '\n';
    }
  }
}

inline constexpr const char* kMetricsCsvHeader = "method,task,seed,n,mean_nfe,violation,sw2,diversity,runtime_s";

struct BenchmarkRow {
  std::string method;
  std::string task;
  std::uint64_t seed = 0;
  int n = 0;
  double mean_nfe = 0.0;
  double violation = 0.0;
  double sw2 = 0.0;
  double diversity = 0.0;
  double runtime_s = 0.0;
};

inline void write_metrics_csv(const std::string& path, const std::vector<BenchmarkRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  os << kMetricsCsvHeader << "\n";
  for (const auto& r : rows) {
    os << r.method << ',' << r.task << ',' << r.seed << ',' << r.n << ',' << format_double(r.mean_nfe) << ','
       << format_double(r.violation) << ',' << format_double(r.sw2) << ',' << format_double(r.diversity) << ','
       << format_double(r.runtime_s) << '\n';
  }
}

/// Standalone matplotlib script over the metrics CSV; keeps the core
/// dependency-free.
inline void write_plot_script(const std::string& path, const std::string& csv_name) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("write_plot_script: cannot open " + path);
  os << "#!/usr/bin/env python3\n"
        "\"\"\"Bar charts per task for the benchmark metrics CSV.\"\"\"\n"
        "import csv\n"
        "import sys\n"
        "from collections import defaultdict\n"
        "\n"
        "import matplotlib.pyplot as plt\n"
        "\n"
        "csv_path = sys.argv[1] if len(sys.argv) > 1 else \"" << csv_name << "\"\n"
        "rows = list(csv.DictReader(open(csv_path)))\n"
        "tasks = sorted({r[\"task\"] for r in rows})\n"
        "metrics = [\"violation\", \"sw2\", \"diversity\", \"mean_nfe\"]\n"
        "fig, axes = plt.subplots(len(tasks), len(metrics), squeeze=False,\n"
        "                         figsize=(4 * len(metrics), 3 * len(tasks)))\n"
        "for ti, task in enumerate(tasks):\n"
        "    by_method = defaultdict(list)\n"
        "    for r in rows:\n"
        "        if r[\"task\"] == task:\n"
        "            for m in metrics:\n"
        "                by_method[(r[\"method\"], m)].append(float(r[m]))\n"
        "    methods = sorted({r[\"method\"] for r in rows if r[\"task\"] == task})\n"
        "    for mi, metric in enumerate(metrics):\n"
        "        ax = axes[ti][mi]\n"
        "        vals = [sum(by_method[(m, metric)]) / len(by_method[(m, metric)]) for m in methods]\n"
        "        ax.bar(methods, vals)\n"
        "        ax.set_title(f\"{task}: {metric}\")\n"
        "        ax.tick_params(axis=\"x\", rotation=30)\n"
        "plt.tight_layout()\n"
        "out = csv_path.rsplit(\".\", 1)[0] + \".png\"\n"
        "plt.savefig(out, dpi=120)\n"
        "print(f\"wrote {out}\")\n";
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_validate(const ExperimentConfig& cfg, std::ostream& out) {
  const auto budgets = resolve_budgets(cfg);
  ExperimentEnv env = load_environment(cfg);
  out << "config ok\n";
  out << "dataset: " << env.dataset_spec.kind_name() << " n=" << env.dataset.rows()
      << " dim=" << env.dataset.cols() << "\n";
  out << "methods:\n";
  for (const auto& b : budgets)
    out << "  " << b.label << " (" << b.kind << "): steps=" << b.grid_steps
        << " max_expected_nfe=" << format_double(b.budget) << "\n";
  out << "tasks:\n";
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    Rng task_rng = Rng::substream(env.dataset_spec.seed, i);
    const Task task = make_task(cfg.tasks[i], env.dataset_spec, env.dataset, task_rng);
    out << "  " << task.name << ": feasible (witness loss=" << format_double(task.witness_loss) << ")\n";
  }
  if (cfg.seeds.empty()) out << "warning: no seeds configured\n";
}

inline void cmd_train(const ExperimentConfig& cfg) {
  ExperimentEnv env = load_environment(cfg);
  std::filesystem::create_directories(cfg.output_dir);
  const std::string ckpt = checkpoint_path_for(cfg);
  if (std::filesystem::exists(ckpt)) std::filesystem::remove(ckpt);
  std::vector<double> losses;
  ensure_model(cfg, env, &losses);
  {
    std::ofstream os(std::filesystem::path(cfg.output_dir) / "training_loss.csv", std::ios::trunc);
    os << "epoch,loss\n";
    for (std::size_t e = 0; e < losses.size(); ++e) os << e << ',' << format_double(losses[e]) << '\n';
  }
  if (cfg.dataset_path.empty())
    save_dataset((std::filesystem::path(cfg.output_dir) / "dataset.txt").string(), env.dataset_spec, env.dataset);
  std::cout << "checkpoint: " << ckpt << "\n";
  std::cout << "final_loss: " << format_double(losses.empty() ? 0.0 : losses.back()) << "\n";
}

inline void cmd_calibrate(const ExperimentConfig& cfg) {
  ExperimentEnv env = load_environment(cfg);
  const MlpDenoiser model = ensure_model(cfg, env);
  const StepGrid grid = StepGrid::uniform(cfg.schedule.T, cfg.grid_steps, cfg.eta);
  Rng rng(cfg.calibration.seed);
  const CalibrationResult cal =
      calibrate_epsilon_max(model, env.noise, grid, cfg.calibration.n_chains, rng, cfg.calibration.margin);
  std::filesystem::create_directories(cfg.output_dir);
  nlohmann::json j;
  j["eps_max"] = cal.eps_max;
  j["mean"] = cal.mean;
  j["stddev"] = cal.stddev;
  j["margin"] = cal.margin;
  j["n_chains"] = cal.n_chains;
  j["n_observations"] = cal.n_observations;
  j["seed"] = cfg.calibration.seed;
  std::ofstream os(std::filesystem::path(cfg.output_dir) / "calibration.json", std::ios::trunc);
  os << j.dump(2) << "\n";
  std::cout << "eps_max: " << format_double(cal.eps_max) << " (mean " << format_double(cal.mean) << ", stddev "
            << format_double(cal.stddev) << ", margin " << format_double(cal.margin) << ")\n";
}

namespace detail {

inline const MethodConfig& select_method(const ExperimentConfig& cfg, const std::string& label) {
  if (cfg.methods.empty()) throw ConfigError("no methods configured");
  if (label.empty()) return cfg.methods.front();
  for (const auto& m : cfg.methods)
    if (m.label == label) return m;
  throw ConfigError("unknown method label: " + label);
}

inline std::size_t select_task_index(const ExperimentConfig& cfg, const std::string& name) {
  if (cfg.tasks.empty()) throw ConfigError("no tasks configured");
  if (name.empty()) return 0;
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i)
    if (cfg.tasks[i].name == name || (cfg.tasks[i].name.empty() && cfg.tasks[i].kind == name)) return i;
  throw ConfigError("unknown task name: " + name);
}

inline const MethodBudget& budget_for(const std::vector<MethodBudget>& budgets, const std::string& label) {
  for (const auto& b : budgets)
    if (b.label == label) return b;
  throw std::logic_error("budget_for: missing label");
}

}  // namespace detail

inline void cmd_sample(const ExperimentConfig& cfg) {
  ExperimentEnv env = load_environment(cfg);
  const MlpDenoiser model = ensure_model(cfg, env);
  const auto budgets = resolve_budgets(cfg);
  const MethodConfig& method = detail::select_method(cfg, cfg.sample.method);
  const std::size_t task_idx = detail::select_task_index(cfg, cfg.sample.task);
  Rng task_rng = Rng::substream(env.dataset_spec.seed, task_idx);
  const Task task = make_task(cfg.tasks[task_idx], env.dataset_spec, env.dataset, task_rng);
  const ResolvedMethod rm =
      resolve_method(cfg, method, detail::budget_for(budgets, method.label), model, env.noise);

  const int n = cfg.sample.n > 0 ? cfg.sample.n : cfg.n_chains;
  const std::uint64_t seed = cfg.sample.has_seed ? cfg.sample.seed : (cfg.seeds.empty() ? 0 : cfg.seeds.front());

  Mat samples(n, model.dim());
  std::vector<SampleTrace> traces;
  traces.reserve(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) {
    Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(c));
    SampleResult r = run_method_chain(model, rm, *task.constraint, env.noise, rng);
    samples.row(c) = r.x0.transpose();
    traces.push_back(std::move(r.trace));
  }
  std::filesystem::create_directories(cfg.output_dir);
  const std::string stem = method.label + "_" + task.name;
  save_samples((std::filesystem::path(cfg.output_dir) / ("samples_" + stem + ".txt")).string(), method.label,
               task.name, seed, samples);
  write_traces_csv((std::filesystem::path(cfg.output_dir) / ("traces_" + stem + ".csv")).string(), traces);
  std::int64_t total = 0;
  for (const auto& t : traces) total += t.total_nfe;
  std::cout << "samples: " << n << " total_nfe: " << total << "\n";
}

struct BenchmarkOutput {
  std::vector<BenchmarkRow> rows;
  nlohmann::json meta;
};

/// Every (method, task, seed) cell draws n_chains chains and reduces to
/// one metrics row. Cells are independent; a worker pool may execute
/// them in any order without changing the output.
inline BenchmarkOutput run_benchmark(const ExperimentConfig& cfg, const MlpDenoiser& model,
                                     const ExperimentEnv& env) {
  if (cfg.methods.empty() || cfg.tasks.empty() || cfg.seeds.empty())
    throw ConfigError("benchmark needs methods, tasks, and seeds");
  const auto budgets = resolve_budgets(cfg);

  std::vector<Task> tasks;
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    Rng task_rng = Rng::substream(env.dataset_spec.seed, i);
    tasks.push_back(make_task(cfg.tasks[i], env.dataset_spec, env.dataset, task_rng));
  }
  std::vector<ResolvedMethod> methods;
  for (std::size_t i = 0; i < cfg.methods.size(); ++i)
    methods.push_back(resolve_method(cfg, cfg.methods[i], budgets[i], model, env.noise));

  struct Cell {
    std::size_t method_idx, task_idx, seed_idx;
  };
  std::vector<Cell> cells;
  for (std::size_t m = 0; m < methods.size(); ++m)
    for (std::size_t t = 0; t < tasks.size(); ++t)
      for (std::size_t s = 0; s < cfg.seeds.size(); ++s) cells.push_back({m, t, s});

  std::vector<BenchmarkRow> rows(cells.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::string failure;
  std::mutex failure_mutex;

  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size() || failed.load()) return;
      try {
        const Cell& cell = cells[i];
        const ResolvedMethod& rm = methods[cell.method_idx];
        const Task& task = tasks[cell.task_idx];
        const std::uint64_t seed = cfg.seeds[cell.seed_idx];
        const auto t0 = std::chrono::steady_clock::now();

        Mat samples(cfg.n_chains, model.dim());
        double nfe_total = 0.0;
        for (int c = 0; c < cfg.n_chains; ++c) {
          Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(c));
          SampleResult r = run_method_chain(model, rm, *task.constraint, env.noise, rng);
          samples.row(c) = r.x0.transpose();
          nfe_total += static_cast<double>(r.trace.total_nfe);
          const double budget = detail::budget_for(budgets, rm.method.label).budget;
          if (static_cast<double>(r.trace.total_nfe) > budget + 1e-9)
            throw std::runtime_error("method '" + rm.method.label + "' exceeded its NFE budget (" +
                                     std::to_string(r.trace.total_nfe) + " > " + format_double(budget) + ")");
        }
        BenchmarkRow row;
        row.method = rm.method.label;
        row.task = task.name;
        row.seed = seed;
        row.n = cfg.n_chains;
        row.mean_nfe = nfe_total / cfg.n_chains;
        row.violation = constraint_violation(samples, *task.constraint);
        Rng metric_rng = Rng::substream(seed, 0x4D455452ULL + cell.task_idx);
        row.sw2 = sliced_wasserstein(samples, env.heldout, cfg.sw2_projections, metric_rng);
        row.diversity = diversity(samples, cfg.diversity_pairs, metric_rng);
        if (cfg.record_walltime) {
          row.runtime_s =
              std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - t0)
                  .count();
        }
        rows[i] = std::move(row);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        failure = e.what();
        failed.store(true);
        return;
      }
    }
  };

  const int n_workers = std::max(1, std::min<int>(cfg.workers, static_cast<int>(cells.size())));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failed.load()) throw std::runtime_error("benchmark failed: " + failure);

  BenchmarkOutput out;
  out.rows = std::move(rows);

  // Ground-truth reference numbers reported alongside the CSV.
  Rng gt_rng = Rng::substream(env.dataset_spec.seed, 0x47545245ULL);
  DatasetSpec alt1 = env.dataset_spec;
  alt1.n = cfg.n_chains;
  alt1.seed = splitmix64(env.dataset_spec.seed + 1);
  DatasetSpec alt2 = alt1;
  alt2.seed = splitmix64(env.dataset_spec.seed + 2);
  const Mat gt1 = generate(alt1);
  const Mat gt2 = generate(alt2);
  out.meta["sw2_noise_floor"] = sliced_wasserstein(gt1, gt2, cfg.sw2_projections, gt_rng);
  out.meta["diversity_ground_truth"] = diversity(env.heldout, cfg.diversity_pairs, gt_rng);
  nlohmann::json jb = nlohmann::json::array();
  for (const auto& b : budgets)
    jb.push_back({{"method", b.label}, {"kind", b.kind}, {"steps", b.grid_steps}, {"max_expected_nfe", b.budget}});
  out.meta["budgets"] = jb;
  nlohmann::json jt = nlohmann::json::array();
  for (const auto& t : tasks) jt.push_back({{"task", t.name}, {"witness_loss", t.witness_loss}});
  out.meta["tasks"] = jt;
  return out;
}

inline void cmd_benchmark(const ExperimentConfig& cfg) {
  ExperimentEnv env = load_environment(cfg);
  const MlpDenoiser model = ensure_model(cfg, env);
  const auto budgets = resolve_budgets(cfg);
  std::cout << "budgets:\n";
  for (const auto& b : budgets)
    std::cout << "  " << b.label << ": steps=" << b.grid_steps << " max_expected_nfe=" << format_double(b.budget)
              << "\n";
  BenchmarkOutput out = run_benchmark(cfg, model, env);
  std::filesystem::create_directories(cfg.output_dir);
  write_metrics_csv((std::filesystem::path(cfg.output_dir) / "metrics.csv").string(), out.rows);
  write_plot_script((std::filesystem::path(cfg.output_dir) / "plot_metrics.py").string(), "metrics.csv");
  std::ofstream meta(std::filesystem::path(cfg.output_dir) / "benchmark_meta.json", std::ios::trunc);
  meta << out.meta.dump(2) << "\n";
  std::cout << "rows: " << out.rows.size() << "\n";
}

}  // namespace trustsamp
