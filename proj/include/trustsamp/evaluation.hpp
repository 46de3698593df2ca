#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "trustsamp/constraints.hpp"
#include "trustsamp/rng.hpp"

namespace trustsamp {

struct MetricReport {
  std::string method;
  std::string task;
  int seed_count = 0;
  double mean_violation = 0.0;
  double sw2 = 0.0;
  double diversity = 0.0;
  double mean_nfe = 0.0;
  double runtime_seconds = 0.0;
};

/// Root-mean-square constraint violation over samples (rows). Per sample
/// the violation is sqrt(loss): RMS residual for equality constraints,
/// RMS hinge excess for inequalities.
inline double constraint_violation(const Mat& samples, const Constraint& con) {
  if (samples.rows() == 0) throw std::invalid_argument("constraint_violation: empty sample set");
  double total = 0.0;
  for (Eigen::Index i = 0; i < samples.rows(); ++i) total += con.loss(samples.row(i).transpose());
  return std::sqrt(total / static_cast<double>(samples.rows()));
}

namespace detail {

/// 2-Wasserstein distance between two equal-size 1D empiricals
/// (sorted-sample L2).
inline double wasserstein2_1d(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(total / static_cast<double>(a.size()));
}

/// Seeded subsample of `count` distinct rows.
inline Mat subsample_rows(const Mat& m, Eigen::Index count, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.rows()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Eigen::Index>(i);
  for (std::size_t i = idx.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i + 1)));
    std::swap(idx[i], idx[j]);
  }
  Mat out(count, m.cols());
  for (Eigen::Index i = 0; i < count; ++i) out.row(i) = m.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace detail

/// Average over random unit projections of the 1D 2-Wasserstein distance
/// between the projected empirical distributions. Unequal-size sets are
/// subsampled to the smaller size with seeded selection.
inline double sliced_wasserstein(const Mat& a, const Mat& b, int n_projections, Rng& rng) {
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("sliced_wasserstein: empty sample set");
  if (a.cols() != b.cols()) throw std::invalid_argument("sliced_wasserstein: dimension mismatch");
  if (n_projections < 1) throw std::invalid_argument("sliced_wasserstein: n_projections must be >= 1");
  const Eigen::Index n = std::min(a.rows(), b.rows());
  const Mat& aa = a;
  const Mat& bb = b;
  Mat asub, bsub;
  const Mat* pa = &aa;
  const Mat* pb = &bb;
  if (a.rows() != n) {
    asub = detail::subsample_rows(a, n, rng);
    pa = &asub;
  }
  if (b.rows() != n) {
    bsub = detail::subsample_rows(b, n, rng);
    pb = &bsub;
  }
  const int d = static_cast<int>(a.cols());
  double total = 0.0;
  for (int p = 0; p < n_projections; ++p) {
    Vec dir = rng.normal_vec(d);
    const double norm = dir.norm();
    if (norm == 0.0) continue;  // measure-zero; keeps the draw count stable
    dir /= norm;
    std::vector<double> pa1(static_cast<std::size_t>(n)), pb1(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      pa1[static_cast<std::size_t>(i)] = pa->row(i).dot(dir.transpose());
      pb1[static_cast<std::size_t>(i)] = pb->row(i).dot(dir.transpose());
    }
    total += detail::wasserstein2_1d(std::move(pa1), std::move(pb1));
  }
  return total / n_projections;
}

/// Mean Euclidean distance over random distinct sample pairs.
inline double diversity(const Mat& samples, int n_pairs, Rng& rng) {
  if (samples.rows() < 2) throw std::invalid_argument("diversity: need at least 2 samples");
  if (n_pairs < 1) throw std::invalid_argument("diversity: n_pairs must be >= 1");
  const auto n = samples.rows();
  double total = 0.0;
  for (int p = 0; p < n_pairs; ++p) {
    const auto i = rng.uniform_int(n);
    auto j = rng.uniform_int(n - 1);
    if (j >= i) ++j;
    total += (samples.row(i) - samples.row(j)).norm();
  }
  return total / n_pairs;
}

struct JensenCase {
  std::string name;
  ScalarPosterior posterior;
  std::shared_ptr<const Constraint> constraint;
};

struct JensenSuiteEntry {
  std::string name;
  JensenBounds bounds;
  bool pass = false;
};

struct JensenSuiteResult {
  std::vector<JensenSuiteEntry> entries;
  bool all_pass = true;
};

/// Scalar hinge loss max(0, a - x)^2 on the single coordinate; the
/// clipped-linear member of the oracle grid.
inline std::shared_ptr<const Constraint> scalar_hinge_constraint(double threshold) {
  std::vector<std::shared_ptr<const InequalityTerm>> parts;
  parts.push_back(std::make_shared<CoordinateTerm>(0, threshold));
  return std::make_shared<InequalityConstraint>(1, std::move(parts));
}

/// Scalar quadratic loss (x - c)^2.
inline std::shared_ptr<const Constraint> scalar_quadratic_constraint(double center) {
  Vec y(1);
  y[0] = center;
  return std::make_shared<EqualityConstraint>(std::vector<int>{0}, y, 1);
}

/// Documented posterior x loss grid for the Jensen-bound suite:
/// point masses, symmetric and asymmetric two-point posteriors, and
/// discretized Gaussians, against quadratic and clipped-linear losses.
inline std::vector<JensenCase> jensen_default_grid() {
  std::vector<JensenCase> cases;
  auto discretized_gaussian = [](double mean, double std_dev, int bins) {
    ScalarPosterior p;
    double total = 0.0;
    for (int i = 0; i < bins; ++i) {
      const double z = -3.0 + 6.0 * i / (bins - 1);
      const double w = std::exp(-0.5 * z * z);
      p.values.push_back(mean + std_dev * z);
      p.probs.push_back(w);
      total += w;
    }
    for (auto& w : p.probs) w /= total;
    return p;
  };
  auto two_point = [](double a, double b, double pa) {
    return ScalarPosterior{{a, b}, {pa, 1.0 - pa}};
  };

  const std::vector<std::pair<std::string, std::shared_ptr<const Constraint>>> losses = {
      {"quadratic_c0", scalar_quadratic_constraint(0.0)},
      {"quadratic_c1", scalar_quadratic_constraint(1.0)},
      {"hinge_a0.5", scalar_hinge_constraint(0.5)},
      {"hinge_a0", scalar_hinge_constraint(0.0)},
  };
  const std::vector<std::pair<std::string, ScalarPosterior>> posteriors = {
      {"point_mass_0", ScalarPosterior{{0.0}, {1.0}}},
      {"point_mass_2", ScalarPosterior{{2.0}, {1.0}}},
      {"sym_pm_0.1", two_point(-0.1, 0.1, 0.5)},
      {"sym_pm_0.5", two_point(-0.5, 0.5, 0.5)},
      {"sym_pm_1", two_point(-1.0, 1.0, 0.5)},
      {"asym_2pt", two_point(-0.3, 0.9, 0.25)},
      {"gauss_m0_s0.2", discretized_gaussian(0.0, 0.2, 41)},
      {"gauss_m0.5_s0.5", discretized_gaussian(0.5, 0.5, 41)},
  };
  for (const auto& [lname, con] : losses)
    for (const auto& [pname, post] : posteriors)
      cases.push_back({lname + "/" + pname, post, con});
  return cases;
}

/// Runs the oracle across the grid; a case passes iff
/// lower - tol <= gap <= upper + tol with tol relative to the bracket scale.
inline JensenSuiteResult run_jensen_suite(const std::vector<JensenCase>& cases, double rel_tol = 1e-9) {
  JensenSuiteResult result;
  for (const auto& c : cases) {
    JensenSuiteEntry e;
    e.name = c.name;
    e.bounds = jensen_gap_oracle(*c.constraint, c.posterior);
    const double scale = std::max({1.0, std::abs(e.bounds.lower), std::abs(e.bounds.upper), std::abs(e.bounds.gap)});
    const double tol = rel_tol * scale;
    e.pass = (e.bounds.lower - tol <= e.bounds.gap) && (e.bounds.gap <= e.bounds.upper + tol);
    result.all_pass = result.all_pass && e.pass;
    result.entries.push_back(std::move(e));
  }
  return result;
}

}  // namespace trustsamp
