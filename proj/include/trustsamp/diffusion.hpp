#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace trustsamp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Variance schedule of the forward process. Timesteps are 1-based
/// (t in {1..T}); index 0 is the clean-data convention alpha_cum[0] = 1.
/// alpha_cum[t] is the cumulative product of (1 - beta[s]) for s <= t.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // size T+1, beta[0] unused
  std::vector<double> alpha_cum;  // size T+1, alpha_cum[0] = 1

  double alpha_bar(int t) const {
    if (t < 0 || t > T) throw std::out_of_range("timestep out of range: " + std::to_string(t));
    return alpha_cum[static_cast<std::size_t>(t)];
  }

  void check_timestep(int t) const {
    if (t < 1 || t > T) throw std::out_of_range("timestep out of range: " + std::to_string(t));
  }
};

inline NoiseSchedule linear_beta_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("linear_beta_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("linear_beta_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha_cum.assign(static_cast<std::size_t>(T) + 1, 1.0);
  double prod = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double frac = (T == 1) ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0 - b;
    s.beta[static_cast<std::size_t>(t)] = b;
    s.alpha_cum[static_cast<std::size_t>(t)] = prod;
  }
  return s;
}

/// Squared-cosine cumulative schedule; betas are recovered from the
/// alpha_cum ratios and clipped away from 1.
inline NoiseSchedule cosine_beta_schedule(int T, double offset = 0.008) {
  if (T < 1) throw std::invalid_argument("cosine_beta_schedule: T must be >= 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha_cum.assign(static_cast<std::size_t>(T) + 1, 1.0);
  auto f = [&](double u) {
    const double v = std::cos((u + offset) / (1.0 + offset) * M_PI / 2.0);
    return v * v;
  };
  const double f0 = f(0.0);
  double prev = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double target = f(static_cast<double>(t) / T) / f0;
    double b = 1.0 - target / prev;
    b = std::min(std::max(b, 1e-8), 0.999);
    prev *= 1.0 - b;
    s.beta[static_cast<std::size_t>(t)] = b;
    s.alpha_cum[static_cast<std::size_t>(t)] = prev;
  }
  return s;
}

/// DDIM inference sub-sequence tau_K > ... > tau_1 drawn from {1..T},
/// stored noisiest-first. eta = 0 is deterministic DDIM, eta = 1 matches
/// the DDPM noise level.
struct StepGrid {
  std::vector<int> indices;  // strictly decreasing
  double eta = 1.0;

  int steps() const { return static_cast<int>(indices.size()); }

  void validate(int T) const {
    if (indices.empty()) throw std::invalid_argument("StepGrid: empty index sequence");
    if (eta < 0.0) throw std::invalid_argument("StepGrid: eta must be >= 0");
    int prev = T + 1;
    for (int t : indices) {
      if (t < 1 || t > T) throw std::invalid_argument("StepGrid: index outside {1..T}");
      if (t >= prev) throw std::invalid_argument("StepGrid: indices must be strictly decreasing");
      prev = t;
    }
  }

  /// K evenly spaced timesteps ending near t=1: {round(K*T/K), ..., round(T/K)}.
  static StepGrid uniform(int T, int K, double eta) {
    if (K < 1 || K > T) throw std::invalid_argument("StepGrid::uniform: need 1 <= K <= T");
    StepGrid g;
    g.eta = eta;
    g.indices.reserve(static_cast<std::size_t>(K));
    for (int k = K; k >= 1; --k) {
      int t = static_cast<int>(std::llround(static_cast<double>(k) * T / K));
      t = std::max(1, std::min(T, t));
      if (!g.indices.empty() && t >= g.indices.back()) t = g.indices.back() - 1;
      if (t < 1) throw std::invalid_argument("StepGrid::uniform: K too dense for T");
      g.indices.push_back(t);
    }
    g.validate(T);
    return g;
  }
};

/// State at noise level t; t = 0 means clean data.
struct LatentState {
  Vec x;
  int t = 0;
};

inline Vec forward_diffuse(const Vec& x0, int t, const Vec& eps, const NoiseSchedule& s) {
  s.check_timestep(t);
  if (x0.size() != eps.size()) throw std::invalid_argument("forward_diffuse: dimension mismatch");
  const double ab = s.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

inline Vec predict_x0(const Vec& x_t, const Vec& eps_pred, int t, const NoiseSchedule& s) {
  s.check_timestep(t);
  if (x_t.size() != eps_pred.size()) throw std::invalid_argument("predict_x0: dimension mismatch");
  const double ab = s.alpha_bar(t);
  return (x_t - std::sqrt(1.0 - ab) * eps_pred) / std::sqrt(ab);
}

/// DDPM-level sigma for the step t_cur -> t_prev, scaled by eta.
inline double sigma_ddpm(int t_cur, int t_prev, const NoiseSchedule& s, double eta) {
  if (t_prev >= t_cur) throw std::invalid_argument("sigma_ddpm: need t_prev < t_cur");
  if (eta < 0.0) throw std::invalid_argument("sigma_ddpm: eta must be >= 0");
  s.check_timestep(t_cur);
  const double ab_cur = s.alpha_bar(t_cur);
  const double ab_prev = s.alpha_bar(t_prev);
  return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_cur)) * std::sqrt(1.0 - ab_cur / ab_prev);
}

/// Mean of the DDIM reverse update:
///   sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev - sigma^2) * eps_pred.
inline Vec ddim_mean(const Vec& x_t, const Vec& eps_pred, int t_cur, int t_prev, double sigma,
                     const NoiseSchedule& s) {
  const double ab_prev = s.alpha_bar(t_prev);
  const double rem = 1.0 - ab_prev - sigma * sigma;
  if (rem < -1e-15) throw std::invalid_argument("ddim_mean: sigma^2 exceeds 1 - alpha_cum[t_prev]");
  const Vec x0_hat = predict_x0(x_t, eps_pred, t_cur, s);
  return std::sqrt(ab_prev) * x0_hat + std::sqrt(std::max(rem, 0.0)) * eps_pred;
}

}  // namespace trustsamp
