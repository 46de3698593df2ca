#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trustsamp/constraints.hpp"
#include "trustsamp/rng.hpp"

namespace trustsamp {

struct MixtureParams {
  int components = 8;
  double radius = 4.0;
  double std_dev = 0.1;
};

struct SwissRollParams {
  double noise = 0.1;
  double scale = 0.25;
};

struct TrajectoryParams {
  int frames = 32;
  int dims_per_frame = 2;
  double smoothness = 4.0;  // Gaussian smoothing width, in frames
};

/// Seeded synthetic data: Gaussian mixtures on a ring, a 2D swiss roll,
/// and smooth 2D trajectory sequences.
struct DatasetSpec {
  enum class Kind { GaussianMixture, SwissRoll, Trajectory };

  Kind kind = Kind::GaussianMixture;
  int n = 1000;
  std::uint64_t seed = 0;
  MixtureParams mixture;
  SwissRollParams swiss;
  TrajectoryParams trajectory;

  int dim() const {
    switch (kind) {
      case Kind::GaussianMixture: return 2;
      case Kind::SwissRoll: return 2;
      case Kind::Trajectory: return trajectory.frames * trajectory.dims_per_frame;
    }
    throw std::logic_error("unknown dataset kind");
  }

  void validate() const {
    if (n < 1) throw std::invalid_argument("DatasetSpec: n must be >= 1");
    switch (kind) {
      case Kind::GaussianMixture:
        if (mixture.components < 1 || mixture.radius < 0.0 || mixture.std_dev < 0.0)
          throw std::invalid_argument("DatasetSpec: bad mixture params");
        break;
      case Kind::SwissRoll:
        if (swiss.noise < 0.0 || swiss.scale <= 0.0) throw std::invalid_argument("DatasetSpec: bad swiss roll params");
        break;
      case Kind::Trajectory:
        if (trajectory.frames < 2 || trajectory.dims_per_frame < 1 || trajectory.smoothness <= 0.0)
          throw std::invalid_argument("DatasetSpec: bad trajectory params");
        break;
    }
  }

  std::string kind_name() const {
    switch (kind) {
      case Kind::GaussianMixture: return "gaussian_mixture";
      case Kind::SwissRoll: return "swiss_roll";
      case Kind::Trajectory: return "trajectory";
    }
    throw std::logic_error("unknown dataset kind");
  }

  static Kind kind_from_name(const std::string& name) {
    if (name == "gaussian_mixture") return Kind::GaussianMixture;
    if (name == "swiss_roll") return Kind::SwissRoll;
    if (name == "trajectory") return Kind::Trajectory;
    throw std::invalid_argument("unknown dataset kind: " + name);
  }
};

namespace detail {

/// White noise over frames smoothed by a truncated, renormalized
/// Gaussian kernel and rescaled back to roughly unit variance.
inline std::vector<double> smooth_noise(int frames, double width, Rng& rng) {
  std::vector<double> white(static_cast<std::size_t>(frames));
  for (auto& v : white) v = rng.normal();
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * width)));
  std::vector<double> out(static_cast<std::size_t>(frames), 0.0);
  for (int i = 0; i < frames; ++i) {
    double norm = 0.0, acc = 0.0, norm2 = 0.0;
    for (int j = -radius; j <= radius; ++j) {
      const int g = i + j;
      if (g < 0 || g >= frames) continue;
      const double w = std::exp(-0.5 * j * j / (width * width));
      acc += w * white[static_cast<std::size_t>(g)];
      norm += w;
      norm2 += w * w;
    }
    out[static_cast<std::size_t>(i)] = acc / norm * (norm / std::sqrt(norm2));
  }
  return out;
}

}  // namespace detail

/// Deterministic sample matrix (rows are samples) for a spec.
inline Mat generate(const DatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Mat out(spec.n, spec.dim());
  switch (spec.kind) {
    case DatasetSpec::Kind::GaussianMixture: {
      const int k = spec.mixture.components;
      for (int i = 0; i < spec.n; ++i) {
        const auto comp = rng.uniform_int(k);
        const double angle = 2.0 * M_PI * static_cast<double>(comp) / k;
        out(i, 0) = spec.mixture.radius * std::cos(angle) + spec.mixture.std_dev * rng.normal();
        out(i, 1) = spec.mixture.radius * std::sin(angle) + spec.mixture.std_dev * rng.normal();
      }
      break;
    }
    case DatasetSpec::Kind::SwissRoll: {
      for (int i = 0; i < spec.n; ++i) {
        const double t = 1.5 * M_PI * (1.0 + 2.0 * rng.uniform());
        out(i, 0) = spec.swiss.scale * t * std::cos(t) + spec.swiss.noise * rng.normal();
        out(i, 1) = spec.swiss.scale * t * std::sin(t) + spec.swiss.noise * rng.normal();
      }
      break;
    }
    case DatasetSpec::Kind::Trajectory: {
      const int frames = spec.trajectory.frames;
      const int dpf = spec.trajectory.dims_per_frame;
      for (int i = 0; i < spec.n; ++i) {
        for (int d = 0; d < dpf; ++d) {
          const auto sn = detail::smooth_noise(frames, spec.trajectory.smoothness, rng);
          for (int f = 0; f < frames; ++f) {
            double v;
            if (d == 0) {
              // Progress coordinate: a sweep with smooth wiggle.
              v = 2.0 * f / (frames - 1) - 1.0 + 0.25 * sn[static_cast<std::size_t>(f)];
            } else {
              // Height-like coordinate around 0.45.
              v = 0.45 + 0.3 * sn[static_cast<std::size_t>(f)];
            }
            out(i, f * dpf + d) = v;
          }
        }
      }
      break;
    }
  }
  return out;
}

/// First 90% of rows: training split.
inline Mat train_split(const Mat& dataset) {
  const Eigen::Index held = std::max<Eigen::Index>(1, (dataset.rows() + 9) / 10);
  if (held >= dataset.rows()) return dataset;
  return dataset.topRows(dataset.rows() - held);
}

/// Last 10% of rows (at least one): reserved for constraint-target extraction.
inline Mat heldout_split(const Mat& dataset) {
  const Eigen::Index held = std::max<Eigen::Index>(1, (dataset.rows() + 9) / 10);
  return dataset.bottomRows(std::min(held, dataset.rows()));
}

// ---------------------------------------------------------------------------
// Columnar text persistence. One header line, then n rows of dim
// space-separated decimal values printed with 17 significant digits so
// the doubles round-trip exactly. Layout documented in docs/file_formats.md.

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void save_dataset(const std::string& path, const DatasetSpec& spec, const Mat& data) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("save_dataset: cannot open " + path);
  os << "# trustsamp-dataset kind=" << spec.kind_name() << " params=";
  switch (spec.kind) {
    case DatasetSpec::Kind::GaussianMixture:
      os << "components:" << spec.mixture.components << ";radius:" << format_double(spec.mixture.radius)
         << ";std:" << format_double(spec.mixture.std_dev);
      break;
    case DatasetSpec::Kind::SwissRoll:
      os << "noise:" << format_double(spec.swiss.noise) << ";scale:" << format_double(spec.swiss.scale);
      break;
    case DatasetSpec::Kind::Trajectory:
      os << "frames:" << spec.trajectory.frames << ";dims_per_frame:" << spec.trajectory.dims_per_frame
         << ";smoothness:" << format_double(spec.trajectory.smoothness);
      break;
  }
  os << " n=" << data.rows() << " seed=" << spec.seed << " dim=" << data.cols() << "\n";
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.cols(); ++j) {
      if (j) os << ' ';
      os << format_double(data(i, j));
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("save_dataset: write failed: " + path);
}

inline std::pair<DatasetSpec, Mat> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_dataset: cannot open " + path);
  std::string header;
  if (!std::getline(is, header) || header.rfind("# trustsamp-dataset ", 0) != 0)
    throw std::runtime_error("load_dataset: bad header in " + path);

  std::map<std::string, std::string> fields;
  std::istringstream hs(header.substr(std::string("# trustsamp-dataset ").size()));
  std::string tok;
  while (hs >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw std::runtime_error("load_dataset: malformed header field: " + tok);
    fields[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  DatasetSpec spec;
  spec.kind = DatasetSpec::kind_from_name(fields.at("kind"));
  spec.n = std::stoi(fields.at("n"));
  spec.seed = std::stoull(fields.at("seed"));
  const int dim = std::stoi(fields.at("dim"));

  std::map<std::string, std::string> params;
  std::istringstream ps(fields.at("params"));
  std::string kv;
  while (std::getline(ps, kv, ';')) {
    const auto colon = kv.find(':');
    if (colon == std::string::npos) throw std::runtime_error("load_dataset: malformed param: " + kv);
    params[kv.substr(0, colon)] = kv.substr(colon + 1);
  }
  switch (spec.kind) {
    case DatasetSpec::Kind::GaussianMixture:
      spec.mixture.components = std::stoi(params.at("components"));
      spec.mixture.radius = std::stod(params.at("radius"));
      spec.mixture.std_dev = std::stod(params.at("std"));
      break;
    case DatasetSpec::Kind::SwissRoll:
      spec.swiss.noise = std::stod(params.at("noise"));
      spec.swiss.scale = std::stod(params.at("scale"));
      break;
    case DatasetSpec::Kind::Trajectory:
      spec.trajectory.frames = std::stoi(params.at("frames"));
      spec.trajectory.dims_per_frame = std::stoi(params.at("dims_per_frame"));
      spec.trajectory.smoothness = std::stod(params.at("smoothness"));
      break;
  }
  if (dim != spec.dim()) throw std::runtime_error("load_dataset: header dim disagrees with kind params");

  Mat data(spec.n, dim);
  for (int i = 0; i < spec.n; ++i) {
    for (int j = 0; j < dim; ++j) {
      if (!(is >> data(i, j))) throw std::runtime_error("load_dataset: truncated data section");
    }
  }
  return {spec, data};
}

// ---------------------------------------------------------------------------
// Constraint tasks over datasets.

/// Constraint description by kind + numeric parameters. Equality targets
/// not given explicitly are extracted from held-out samples.
struct TaskSpec {
  std::string name;
  std::string kind;  // pin_coordinate | average | blur | endpoints | min_height | obstacle | angular_momentum | composite
  std::string dataset_id;
  std::map<std::string, double> params;
  std::vector<TaskSpec> parts;  // composite only
};

struct Task {
  std::string name;
  std::shared_ptr<const Constraint> constraint;
  Vec witness;
  double witness_loss = 0.0;
};

namespace detail {

inline double task_param(const TaskSpec& spec, const std::string& key, double fallback) {
  const auto it = spec.params.find(key);
  return it == spec.params.end() ? fallback : it->second;
}

inline bool task_has_param(const TaskSpec& spec, const std::string& key) {
  return spec.params.find(key) != spec.params.end();
}

/// Builds the constraint for one (non-composite) task kind, extracting
/// equality targets from `source` where the spec does not pin them.
inline std::shared_ptr<const Constraint> build_constraint(const TaskSpec& task, const DatasetSpec& dspec,
                                                          const Vec& source) {
  const int dim = dspec.dim();
  if (task.kind == "pin_coordinate") {
    const int coord = static_cast<int>(task_param(task, "coord", 0));
    if (coord < 0 || coord >= dim) throw std::invalid_argument("pin_coordinate: coord out of range");
    Vec y(1);
    y[0] = task_has_param(task, "target") ? task_param(task, "target", 0.0) : source[coord];
    return std::make_shared<EqualityConstraint>(std::vector<int>{coord}, y, dim);
  }
  if (task.kind == "average") {
    const int factor = static_cast<int>(task_param(task, "factor", 2));
    Mat a = averaging_operator(dim, factor);
    return std::make_shared<EqualityConstraint>(a, Vec(a * source));
  }
  if (task.kind == "blur") {
    if (dspec.kind != DatasetSpec::Kind::Trajectory) throw std::invalid_argument("blur: trajectory datasets only");
    Mat a = gaussian_blur_operator(dspec.trajectory.frames, dspec.trajectory.dims_per_frame,
                                   task_param(task, "kernel_std", 2.0),
                                   static_cast<int>(task_param(task, "kernel_radius", 4)));
    return std::make_shared<EqualityConstraint>(a, Vec(a * source));
  }
  if (task.kind == "endpoints") {
    if (dspec.kind != DatasetSpec::Kind::Trajectory)
      throw std::invalid_argument("endpoints: trajectory datasets only");
    const int dpf = dspec.trajectory.dims_per_frame;
    std::vector<int> mask;
    for (int d = 0; d < dpf; ++d) mask.push_back(d);
    for (int d = 0; d < dpf; ++d) mask.push_back((dspec.trajectory.frames - 1) * dpf + d);
    Vec y(static_cast<Eigen::Index>(mask.size()));
    for (std::size_t i = 0; i < mask.size(); ++i) y[static_cast<Eigen::Index>(i)] = source[mask[i]];
    return std::make_shared<EqualityConstraint>(mask, y, dim);
  }
  if (task.kind == "min_height") {
    if (dspec.kind != DatasetSpec::Kind::Trajectory)
      throw std::invalid_argument("min_height: trajectory datasets only");
    const int frame = static_cast<int>(task_param(task, "frame", dspec.trajectory.frames / 2));
    const int coord = frame * dspec.trajectory.dims_per_frame + static_cast<int>(task_param(task, "dim", 1));
    if (coord < 0 || coord >= dim) throw std::invalid_argument("min_height: coordinate out of range");
    std::vector<std::shared_ptr<const InequalityTerm>> parts;
    parts.push_back(std::make_shared<CoordinateTerm>(coord, task_param(task, "threshold", 0.6)));
    return std::make_shared<InequalityConstraint>(dim, std::move(parts));
  }
  if (task.kind == "obstacle") {
    if (dspec.kind != DatasetSpec::Kind::Trajectory)
      throw std::invalid_argument("obstacle: trajectory datasets only");
    const int dpf = dspec.trajectory.dims_per_frame;
    if (dpf < 2) throw std::invalid_argument("obstacle: needs at least 2 dims per frame");
    const double cx = task_param(task, "center_x", 0.0);
    const double cy = task_param(task, "center_y", 0.45);
    const double radius = task_param(task, "radius", 0.2);
    std::vector<std::shared_ptr<const InequalityTerm>> parts;
    for (int f = 0; f < dspec.trajectory.frames; ++f)
      parts.push_back(std::make_shared<PointDistanceTerm>(f * dpf, f * dpf + 1, cx, cy, radius));
    return std::make_shared<InequalityConstraint>(dim, std::move(parts));
  }
  if (task.kind == "angular_momentum") {
    if (dspec.kind != DatasetSpec::Kind::Trajectory)
      throw std::invalid_argument("angular_momentum: trajectory datasets only");
    if (dspec.trajectory.dims_per_frame != 2)
      throw std::invalid_argument("angular_momentum: needs 2 dims per frame");
    const int frames = dspec.trajectory.frames;
    // Fixed "end effector" frame proxies: four frames spread over the clip.
    std::vector<int> effectors = {frames / 8, 3 * frames / 8, 5 * frames / 8, 7 * frames / 8};
    std::vector<std::shared_ptr<const InequalityTerm>> parts;
    parts.push_back(std::make_shared<AngularMomentumTerm>(frames, effectors, task_param(task, "threshold", 0.0)));
    return std::make_shared<InequalityConstraint>(dspec.dim(), std::move(parts));
  }
  throw std::invalid_argument("unknown task kind: " + task.kind);
}

}  // namespace detail

/// Builds the constraint and verifies feasibility by exhibiting a
/// dataset sample (or the analytic pinned point) with loss below 1e-6.
/// Infeasible task constructions are rejected.
inline Task make_task(const TaskSpec& task, const DatasetSpec& dspec, const Mat& dataset, Rng& rng) {
  if (dataset.cols() != dspec.dim()) throw std::invalid_argument("make_task: dataset/spec dimension mismatch");
  const Mat held = heldout_split(dataset);
  const auto source_row = rng.uniform_int(held.rows());
  const Vec source = held.row(source_row).transpose();
  constexpr double kWitnessTol = 1e-6;

  Task out;
  out.name = task.name.empty() ? task.kind : task.name;

  auto finish_with_witness = [&](std::shared_ptr<const Constraint> con) {
    // Prefer the source sample; fall back to scanning the full dataset.
    if (con->loss(source) < kWitnessTol) {
      out.witness = source;
    } else {
      bool found = false;
      for (Eigen::Index i = 0; i < dataset.rows(); ++i) {
        if (con->loss(dataset.row(i).transpose()) < kWitnessTol) {
          out.witness = dataset.row(i).transpose();
          found = true;
          break;
        }
      }
      if (!found)
        throw std::invalid_argument("make_task: task '" + out.name + "' is infeasible on this dataset");
    }
    out.witness_loss = con->loss(out.witness);
    out.constraint = std::move(con);
  };

  if (task.kind == "composite") {
    if (task.parts.empty()) throw std::invalid_argument("make_task: composite task needs parts");
    std::vector<std::shared_ptr<const Constraint>> parts;
    for (const auto& p : task.parts) parts.push_back(detail::build_constraint(p, dspec, source));
    auto con = std::make_shared<CompositeConstraint>(std::move(parts));
    // All equality parts were extracted from the same source sample, so a
    // feasible composite should be witnessed by a sample satisfying the
    // inequality parts as well; scan held-out sources if this one fails.
    if (con->loss(source) < kWitnessTol) {
      out.witness = source;
      out.witness_loss = con->loss(source);
      out.constraint = std::move(con);
      return out;
    }
    for (Eigen::Index i = 0; i < held.rows(); ++i) {
      const Vec alt = held.row(i).transpose();
      std::vector<std::shared_ptr<const Constraint>> alt_parts;
      for (const auto& p : task.parts) alt_parts.push_back(detail::build_constraint(p, dspec, alt));
      auto alt_con = std::make_shared<CompositeConstraint>(std::move(alt_parts));
      if (alt_con->loss(alt) < kWitnessTol) {
        out.witness = alt;
        out.witness_loss = alt_con->loss(alt);
        out.constraint = std::move(alt_con);
        return out;
      }
    }
    throw std::invalid_argument("make_task: composite task '" + out.name + "' is infeasible on this dataset");
  }

  auto con = detail::build_constraint(task, dspec, source);
  if (task.kind == "pin_coordinate" && detail::task_has_param(task, "target")) {
    // Analytic witness: the source sample with the pinned coordinate set.
    Vec w = source;
    w[static_cast<int>(detail::task_param(task, "coord", 0))] = detail::task_param(task, "target", 0.0);
    out.witness = w;
    out.witness_loss = con->loss(w);
    out.constraint = std::move(con);
    return out;
  }
  finish_with_witness(std::move(con));
  return out;
}

}  // namespace trustsamp
