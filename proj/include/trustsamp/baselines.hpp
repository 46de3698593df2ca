#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "trustsamp/constraints.hpp"
#include "trustsamp/diffusion.hpp"
#include "trustsamp/rng.hpp"
#include "trustsamp/trust_sampler.hpp"

namespace trustsamp {

// Reference reimplementations, simplified: budget-matched comparators
// built from the same ddim_mean / predict_x0 / guidance_gradient
// primitives as the trust sampler, following each method's canonical
// update form.

enum class BaselineMethod { Dps, Dsg, LgdMc };

inline std::string baseline_name(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::Dps: return "dps";
    case BaselineMethod::Dsg: return "dsg";
    case BaselineMethod::LgdMc: return "lgd_mc";
  }
  throw std::logic_error("unknown baseline");
}

struct BaselineConfig {
  BaselineMethod method = BaselineMethod::Dps;
  double guidance_scale = 1.0;
  int mc_particles = 10;        // lgd_mc only
  double mc_radius_scale = 1.0; // lgd_mc only
  StepGrid grid;
  std::uint64_t seed = 0;
  bool sigma_scaled_step = false;  // dsg: scale the step by sqrt(d) * sigma_t

  void validate(int T) const {
    grid.validate(T);
    if (guidance_scale < 0.0) throw std::invalid_argument("BaselineConfig: guidance_scale must be >= 0");
    if (method == BaselineMethod::LgdMc) {
      if (mc_particles < 1) throw std::invalid_argument("BaselineConfig: mc_particles must be >= 1");
      if (mc_radius_scale < 0.0) throw std::invalid_argument("BaselineConfig: mc_radius_scale must be >= 0");
    }
  }
};

/// One DDIM step followed by one unnormalized gradient step
/// x <- x - zeta_t * grad with zeta_t = scale / (sqrt(loss) + 1e-8).
template <class Model>
SampleResult dps_sample(const Model& m, const Constraint& con, const NoiseSchedule& s,
                        const BaselineConfig& cfg, Rng& rng) {
  cfg.validate(s.T);
  if (m.dim() != con.dim()) throw std::invalid_argument("dps_sample: model/constraint dimension mismatch");
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
    rec.j_limit = 1;
    const Vec eps = m.forward(x, t_cur);
    result.trace.total_nfe += 1;
    rec.eps_norms.push_back(eps.norm());
    const double sigma = sigma_ddpm(t_cur, t_prev, s, cfg.grid.eta);
    Vec x_star = ddim_mean(x, eps, t_cur, t_prev, sigma, s);

    const GuidanceResult g = guidance_gradient(m, con, x_star, t_cur, s);
    result.trace.total_nfe += 1;
    rec.j_used = 1;
    rec.eps_norms.push_back(g.eps_pred.norm());
    rec.loss_before = g.loss;
    rec.loss_after = g.loss;
    if (cfg.guidance_scale > 0.0) {
      const double zeta = cfg.guidance_scale / (std::sqrt(g.loss) + 1e-8);
      x_star -= zeta * g.grad;
    }

    if (sigma > 0.0) {
      x = x_star + sigma * rng.normal_vec(d);
    } else {
      x = std::move(x_star);
    }
    if (!x.allFinite()) throw std::runtime_error("dps_sample: non-finite state at step " + std::to_string(k));
    result.trace.steps.push_back(std::move(rec));
  }
  result.x0 = std::move(x);
  return result;
}

/// One normalized gradient step per DDIM step. With sigma_scaled_step
/// the step size follows sqrt(d) * sigma_t; otherwise it is the constant
/// guidance_scale, which makes the method exactly the trust sampler with
/// a constant-1 schedule and no boundary (shared inner loop).
template <class Model>
SampleResult dsg_sample(const Model& m, const Constraint& con, const NoiseSchedule& s,
                        const BaselineConfig& cfg, Rng& rng) {
  cfg.validate(s.T);
  if (m.dim() != con.dim()) throw std::invalid_argument("dsg_sample: model/constraint dimension mismatch");
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
    rec.j_limit = 1;
    const Vec eps = m.forward(x, t_cur);
    result.trace.total_nfe += 1;
    rec.eps_norms.push_back(eps.norm());
    const double sigma = sigma_ddpm(t_cur, t_prev, s, cfg.grid.eta);
    Vec x_star = ddim_mean(x, eps, t_cur, t_prev, sigma, s);

    const double step = cfg.sigma_scaled_step ? cfg.guidance_scale * std::sqrt(static_cast<double>(d)) * sigma
                                              : cfg.guidance_scale;
    if (step > 0.0) {
      x_star = guided_inner_loop(m, con, std::move(x_star), t_cur, s, /*j_limit=*/1, step,
                                 /*eps_max=*/nullptr, std::numeric_limits<std::int64_t>::max(), rec);
    } else {
      const GuidanceResult g = guidance_gradient(m, con, x_star, t_cur, s);
      rec.j_used = 1;
      rec.eps_norms.push_back(g.eps_pred.norm());
      rec.loss_before = g.loss;
      rec.loss_after = g.loss;
    }
    result.trace.total_nfe += 1;

    if (sigma > 0.0) {
      x = x_star + sigma * rng.normal_vec(d);
    } else {
      x = std::move(x_star);
    }
    if (!x.allFinite()) throw std::runtime_error("dsg_sample: non-finite state at step " + std::to_string(k));
    result.trace.steps.push_back(std::move(rec));
  }
  result.x0 = std::move(x);
  return result;
}

struct LgdGuidance {
  double surrogate = 0.0;  // -log(mean_i exp(-L(particle_i)))
  Vec grad;                // d surrogate / d x, through x0_hat only
  Vec eps_pred;
};

/// Monte-Carlo smoothed guidance: particles are x0_hat + radius * xi_i.
/// The surrogate gradient is the softmax(-L)-weighted mean of particle
/// gradients pulled back through the x0 prediction (one network pass).
template <class Model>
LgdGuidance lgd_mc_guidance(const Model& m, const Constraint& con, const Vec& x, int t,
                            const NoiseSchedule& s, const Mat& xi, double radius) {
  typename Model::Tape tape;
  LgdGuidance out;
  out.eps_pred = m.forward(x, t, tape);
  const Vec x0_hat = predict_x0(x, out.eps_pred, t, s);
  const int n = static_cast<int>(xi.rows());

  std::vector<double> losses(static_cast<std::size_t>(n));
  double min_loss = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const Vec particle = x0_hat + radius * xi.row(i).transpose();
    losses[static_cast<std::size_t>(i)] = con.loss(particle);
    min_loss = std::min(min_loss, losses[static_cast<std::size_t>(i)]);
  }
  // Overflow-safe log-mean-exp and softmax weights, shifted by min loss.
  double z = 0.0;
  for (double l : losses) z += std::exp(-(l - min_loss));
  out.surrogate = min_loss - std::log(z / n);

  Vec g0 = Vec::Zero(x.size());
  for (int i = 0; i < n; ++i) {
    const double wgt = std::exp(-(losses[static_cast<std::size_t>(i)] - min_loss)) / z;
    const Vec particle = x0_hat + radius * xi.row(i).transpose();
    g0 += wgt * con.grad_x0(particle);
  }
  const double ab = s.alpha_bar(t);
  const Vec pullback = m.vjp(tape, g0);
  out.grad = (g0 - std::sqrt(1.0 - ab) * pullback) / std::sqrt(ab);
  return out;
}

/// DPS-style step on the Monte-Carlo surrogate; reduces to dps_sample
/// when n = 1 and the perturbation radius is zero.
template <class Model>
SampleResult lgd_mc_sample(const Model& m, const Constraint& con, const NoiseSchedule& s,
                           const BaselineConfig& cfg, Rng& rng) {
  cfg.validate(s.T);
  if (m.dim() != con.dim()) throw std::invalid_argument("lgd_mc_sample: model/constraint dimension mismatch");
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
    rec.j_limit = 1;
    const Vec eps = m.forward(x, t_cur);
    result.trace.total_nfe += 1;
    rec.eps_norms.push_back(eps.norm());
    const double sigma = sigma_ddpm(t_cur, t_prev, s, cfg.grid.eta);
    Vec x_star = ddim_mean(x, eps, t_cur, t_prev, sigma, s);

    Mat xi(cfg.mc_particles, d);
    for (int i = 0; i < cfg.mc_particles; ++i) xi.row(i) = rng.normal_vec(d).transpose();
    const double ab = s.alpha_bar(t_cur);
    const double radius = cfg.mc_radius_scale * std::sqrt((1.0 - ab) / ab);
    const LgdGuidance g = lgd_mc_guidance(m, con, x_star, t_cur, s, xi, radius);
    result.trace.total_nfe += 1;
    rec.j_used = 1;
    rec.eps_norms.push_back(g.eps_pred.norm());
    rec.loss_before = g.surrogate;
    rec.loss_after = g.surrogate;
    if (cfg.guidance_scale > 0.0) {
      const double zeta = cfg.guidance_scale / (std::sqrt(std::max(g.surrogate, 0.0)) + 1e-8);
      x_star -= zeta * g.grad;
    }

    if (sigma > 0.0) {
      x = x_star + sigma * rng.normal_vec(d);
    } else {
      x = std::move(x_star);
    }
    if (!x.allFinite()) throw std::runtime_error("lgd_mc_sample: non-finite state at step " + std::to_string(k));
    result.trace.steps.push_back(std::move(rec));
  }
  result.x0 = std::move(x);
  return result;
}

}  // namespace trustsamp
