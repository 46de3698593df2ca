#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "trustsamp/constraints.hpp"
#include "trustsamp/diffusion.hpp"
#include "trustsamp/rng.hpp"

namespace trustsamp {

/// Per-inference-step cap on inner gradient iterations. `start` is the
/// expected limit at the noisiest inference step, `end` at the cleanest;
/// in between the expectation is linear in inference progress. The
/// stochastic kind rounds the expectation up with probability equal to
/// its fractional part, so budget arithmetic holds in expectation.
struct TrustSchedule {
  enum class Kind { Constant, Linear, StochasticLinear };

  Kind kind = Kind::Constant;
  double start = 0.0;
  double end = 0.0;

  static TrustSchedule constant(double c) { return make(Kind::Constant, c, c); }
  static TrustSchedule linear(double s, double e) { return make(Kind::Linear, s, e); }
  static TrustSchedule stochastic_linear(double s, double e) { return make(Kind::StochasticLinear, s, e); }

  static TrustSchedule make(Kind kind, double start, double end) {
    TrustSchedule t;
    t.kind = kind;
    t.start = start;
    t.end = end;
    if (start < 0.0 || end < 0.0) throw std::invalid_argument("TrustSchedule: limits must be nonnegative");
    if (kind == Kind::Constant && start != end)
      throw std::invalid_argument("TrustSchedule: constant kind requires start == end");
    if (kind != Kind::StochasticLinear) {
      if (!is_integer(start) || !is_integer(end))
        throw std::invalid_argument("TrustSchedule: deterministic kinds require integer endpoints");
    }
    return t;
  }

  /// E[J_k] for inference step k of K (1-based).
  double expected_limit(int k, int K) const {
    if (k < 1 || k > K) throw std::out_of_range("TrustSchedule: step index out of range");
    if (K == 1) return start;
    return start + (end - start) * static_cast<double>(k - 1) / static_cast<double>(K - 1);
  }

  /// The linear kind demands an integer expectation at every step.
  void validate_for(int K) const {
    if (kind != Kind::Linear) return;
    for (int k = 1; k <= K; ++k) {
      if (!is_integer(expected_limit(k, K)))
        throw std::invalid_argument("TrustSchedule: linear kind has non-integer limit at step " + std::to_string(k));
    }
  }

  static bool is_integer(double v) { return std::abs(v - std::round(v)) < 1e-9; }
};

/// Realized iteration limit at inference step k of K. Deterministic kinds
/// return the exact expectation; the stochastic kind draws the Bernoulli
/// rounding (one uniform per call).
inline int iteration_limit(const TrustSchedule& schedule, int k, int K, Rng& rng) {
  const double e = schedule.expected_limit(k, K);
  if (schedule.kind == TrustSchedule::Kind::StochasticLinear) {
    const double base = std::floor(e);
    const double frac = e - base;
    return static_cast<int>(base) + (rng.bernoulli(frac) ? 1 : 0);
  }
  if (!TrustSchedule::is_integer(e))
    throw std::invalid_argument("iteration_limit: non-integer limit for deterministic schedule");
  return static_cast<int>(std::llround(e));
}

/// Maximum expected budget K + sum_k E[J_k]. Realized NFEs stay at or
/// below this for deterministic schedules and boundary termination.
inline double nfe_budget_for(const TrustSchedule& schedule, int K) {
  if (K < 1) throw std::invalid_argument("nfe_budget_for: K must be positive");
  if (K == 1) return 1.0 + schedule.start;
  // Sum of the arithmetic sequence of expectations, in closed form.
  return K + K * (schedule.start + schedule.end) / 2.0;
}

struct SamplerConfig {
  StepGrid grid;
  TrustSchedule schedule;
  double w = 1.0;                 // guidance step size
  double eps_max = 0.0;           // manifold-boundary norm threshold
  bool eps_max_enabled = false;
  bool schedule_reversed = false; // apply `start` at the cleanest step instead
  std::int64_t max_nfe = 0;       // hard cap on realized NFEs; 0 = uncapped
  std::uint64_t seed = 0;

  void validate(int T) const {
    grid.validate(T);
    if (w <= 0.0) throw std::invalid_argument("SamplerConfig: w must be positive");
    if (eps_max_enabled && eps_max <= 0.0)
      throw std::invalid_argument("SamplerConfig: eps_max must be positive when enabled");
    schedule.validate_for(grid.steps());
  }
};

struct StepTraceRecord {
  int k = 0;  // inference step, 1-based
  int t = 0;  // timestep
  int j_limit = 0;
  int j_used = 0;  // inner network passes consumed (each costs one NFE)
  bool boundary_triggered = false;
  double loss_before = std::numeric_limits<double>::quiet_NaN();
  double loss_after = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> eps_norms;  // base-pass norm first, then one per inner pass
};

struct SampleTrace {
  std::vector<StepTraceRecord> steps;
  std::int64_t total_nfe = 0;
};

struct SampleResult {
  Vec x0;
  SampleTrace trace;
};

/// Inner optimization of one diffusion step: up to `j_limit` normalized
/// gradient iterations on L(x0_hat(x*), y), each costing one network
/// pass. The pass at the current x* provides both the gradient and the
/// fresh boundary norm, so a stale norm never gates a fresh state; a
/// pass whose norm trips eps_max terminates the loop with its gradient
/// unused but still counted in j_used.
template <class Model>
Vec guided_inner_loop(const Model& m, const Constraint& con, Vec x, int t, const NoiseSchedule& s,
                      int j_limit, double w, const double* eps_max, std::int64_t pass_allowance,
                      StepTraceRecord& rec) {
  int j = 0;
  while (j < j_limit && j < pass_allowance) {
    const GuidanceResult g = guidance_gradient(m, con, x, t, s);
    ++j;
    rec.eps_norms.push_back(g.eps_pred.norm());
    if (j == 1) rec.loss_before = g.loss;
    rec.loss_after = g.loss;
    if (eps_max != nullptr && rec.eps_norms.back() >= *eps_max) {
      rec.boundary_triggered = true;
      break;
    }
    const double gnorm = g.grad.norm();
    // Zero gradient (e.g. a satisfied hinge): skip the move, keep the count.
    if (gnorm > 0.0) x -= (w / gnorm) * g.grad;
  }
  rec.j_used = j;
  return x;
}

/// Trust Sampling: DDIM with a per-step budget of normalized constraint
/// gradient iterations, early-terminated when the predicted-noise norm
/// leaves the calibrated state-manifold boundary.
template <class Model>
SampleResult trust_sample(const Model& m, const Constraint& con, const NoiseSchedule& s,
                          const SamplerConfig& cfg, Rng& rng) {
  cfg.validate(s.T);
  if (m.dim() != con.dim()) throw std::invalid_argument("trust_sample: model/constraint dimension mismatch");
  const int K = cfg.grid.steps();
  const int d = m.dim();

  SampleResult result;
  result.trace.steps.reserve(static_cast<std::size_t>(K));
  Vec x = rng.normal_vec(d);

  for (int k = 1; k <= K; ++k) {
    const int t_cur = cfg.grid.indices[static_cast<std::size_t>(k - 1)];
    const int t_prev = (k < K) ? cfg.grid.indices[static_cast<std::size_t>(k)] : 0;

    StepTraceRecord rec;
    rec.k = k;
    rec.t = t_cur;
    const int sched_pos = cfg.schedule_reversed ? (K - k + 1) : k;
    rec.j_limit = iteration_limit(cfg.schedule, sched_pos, K, rng);

    const Vec eps = m.forward(x, t_cur);
    result.trace.total_nfe += 1;
    rec.eps_norms.push_back(eps.norm());

    const double sigma = sigma_ddpm(t_cur, t_prev, s, cfg.grid.eta);
    Vec x_star = ddim_mean(x, eps, t_cur, t_prev, sigma, s);

    if (rec.j_limit > 0) {
      std::int64_t allowance = std::numeric_limits<std::int64_t>::max();
      if (cfg.max_nfe > 0) {
        // Keep one base pass in reserve for each remaining step.
        allowance = cfg.max_nfe - result.trace.total_nfe - (K - k);
        if (allowance < 0) allowance = 0;
      }
      const double* bound = cfg.eps_max_enabled ? &cfg.eps_max : nullptr;
      x_star = guided_inner_loop(m, con, std::move(x_star), t_cur, s, rec.j_limit, cfg.w, bound,
                                 allowance, rec);
      result.trace.total_nfe += rec.j_used;
    }

    if (sigma > 0.0) {
      x = x_star + sigma * rng.normal_vec(d);
    } else {
      x = std::move(x_star);
    }
    if (!x.allFinite())
      throw std::runtime_error("trust_sample: non-finite state at step k=" + std::to_string(k) +
                               " (t=" + std::to_string(t_cur) + ")");
    result.trace.steps.push_back(std::move(rec));
  }
  result.x0 = std::move(x);
  return result;
}

/// Plain DDIM chain (no guidance). Consumes the rng stream exactly like
/// trust_sample with an all-zero schedule.
template <class Model>
SampleResult unguided_sample(const Model& m, const NoiseSchedule& s, const StepGrid& grid, Rng& rng) {
  grid.validate(s.T);
  const int K = grid.steps();
  const int d = m.dim();
  SampleResult result;
  result.trace.steps.reserve(static_cast<std::size_t>(K));
  Vec x = rng.normal_vec(d);
  for (int k = 1; k <= K; ++k) {
    const int t_cur = grid.indices[static_cast<std::size_t>(k - 1)];
    const int t_prev = (k < K) ? grid.indices[static_cast<std::size_t>(k)] : 0;
    StepTraceRecord rec;
    rec.k = k;
    rec.t = t_cur;
    const Vec eps = m.forward(x, t_cur);
    result.trace.total_nfe += 1;
    rec.eps_norms.push_back(eps.norm());
    const double sigma = sigma_ddpm(t_cur, t_prev, s, grid.eta);
    Vec mu = ddim_mean(x, eps, t_cur, t_prev, sigma, s);
    if (sigma > 0.0) {
      x = mu + sigma * rng.normal_vec(d);
    } else {
      x = std::move(mu);
    }
    if (!x.allFinite()) throw std::runtime_error("unguided_sample: non-finite state at step " + std::to_string(k));
    result.trace.steps.push_back(std::move(rec));
  }
  result.x0 = std::move(x);
  return result;
}

struct CalibrationResult {
  double eps_max = 0.0;
  double mean = 0.0;
  double stddev = 0.0;
  double margin = 3.0;
  int n_chains = 0;
  std::int64_t n_observations = 0;
};

/// Observes the predicted-noise norm at every step of unconstrained
/// chains and returns mean + margin * stddev as the manifold boundary.
template <class Model>
CalibrationResult calibrate_epsilon_max(const Model& m, const NoiseSchedule& s, const StepGrid& grid,
                                        int n_chains, Rng& rng, double margin = 3.0) {
  if (n_chains < 1) throw std::invalid_argument("calibrate_epsilon_max: n_chains must be >= 1");
  std::vector<double> norms;
  norms.reserve(static_cast<std::size_t>(n_chains) * static_cast<std::size_t>(grid.steps()));
  for (int c = 0; c < n_chains; ++c) {
    const SampleResult r = unguided_sample(m, s, grid, rng);
    for (const auto& step : r.trace.steps) norms.push_back(step.eps_norms.front());
  }
  CalibrationResult out;
  out.margin = margin;
  out.n_chains = n_chains;
  out.n_observations = static_cast<std::int64_t>(norms.size());
  double mean = 0.0;
  for (double v : norms) mean += v;
  mean /= static_cast<double>(norms.size());
  double var = 0.0;
  for (double v : norms) var += (v - mean) * (v - mean);
  var = norms.size() > 1 ? var / static_cast<double>(norms.size() - 1) : 0.0;
  out.mean = mean;
  out.stddev = std::sqrt(var);
  out.eps_max = mean + margin * out.stddev;
  return out;
}

}  // namespace trustsamp
