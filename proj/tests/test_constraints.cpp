#include <cstring>

#include <catch2/catch_amalgamated.hpp>

#include "support/test_models.hpp"
#include "trustsamp/constraints.hpp"
#include "trustsamp/denoiser.hpp"
#include "trustsamp/evaluation.hpp"

using namespace trustsamp;

namespace {

/// Identically-zero loss, for the guidance trivial case.
struct NullConstraint : Constraint {
  int d;
  explicit NullConstraint(int dim) : d(dim) {}
  int dim() const override { return d; }
  double loss(const Vec&) const override { return 0.0; }
  Vec grad_x0(const Vec& x) const override { return Vec::Zero(x.size()); }
};

void check_grad_matches_fd(const Constraint& con, const Vec& x, double tol = 1e-4) {
  const Vec g = con.grad_x0(x);
  const Vec fd = testing::central_difference_gradient([&](const Vec& p) { return con.loss(p); }, x, 1e-5);
  REQUIRE((g - fd).norm() / std::max(1e-8, fd.norm()) < tol);
}

}  // namespace

TEST_CASE("equality loss examples") {
  SECTION("exact observation gives zero") {
    Vec y(1);
    y << 3.0;
    EqualityConstraint con(std::vector<int>{0}, y, 2);
    Vec x(2);
    x << 3.0, -7.0;
    REQUIRE(con.loss(x) == 0.0);
  }
  SECTION("mask selecting coordinate 0") {
    Vec y(1);
    y << 1.0;
    EqualityConstraint con(std::vector<int>{0}, y, 2);
    Vec x(2);
    x << 3.0, 4.0;
    REQUIRE(con.loss(x) == Catch::Approx(4.0).margin(1e-15));
  }
  SECTION("averaging operator") {
    Mat a(1, 2);
    a << 0.5, 0.5;
    Vec y(1);
    y << 1.0;
    EqualityConstraint con(a, y);
    Vec x(2);
    x << 1.0, 3.0;
    REQUIRE(con.loss(x) == Catch::Approx(1.0).margin(1e-15));
  }
  SECTION("dimension mismatch is rejected") {
    Vec y(1);
    y << 1.0;
    EqualityConstraint con(std::vector<int>{0}, y, 2);
    REQUIRE_THROWS_AS(con.loss(Vec::Zero(3)), std::invalid_argument);
  }
}

TEST_CASE("inequality loss examples") {
  auto term = [](double threshold) {
    return std::make_shared<CoordinateTerm>(0, threshold);
  };
  SECTION("satisfied constraint contributes zero") {
    Vec x(1);
    x << 0.8;
    REQUIRE(inequality_loss(x, {term(0.6)}) == 0.0);
  }
  SECTION("violated by 0.1") {
    Vec x(1);
    x << 0.5;
    REQUIRE(inequality_loss(x, {term(0.6)}) == Catch::Approx(0.01).margin(1e-15));
  }
  SECTION("mean over two parts") {
    Vec x(1);
    x << 0.5;
    REQUIRE(inequality_loss(x, {term(0.6), term(0.4)}) == Catch::Approx(0.005).margin(1e-15));
  }
  SECTION("empty parts rejected") {
    Vec x(1);
    REQUIRE_THROWS_AS(inequality_loss(x, {}), std::invalid_argument);
  }
}

TEST_CASE("inequality loss is zero exactly on satisfying inputs") {
  std::vector<std::shared_ptr<const InequalityTerm>> parts = {
      std::make_shared<CoordinateTerm>(0, 0.5), std::make_shared<CoordinateTerm>(1, -1.0)};
  InequalityConstraint con(2, parts);
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const Vec x = 2.0 * rng.normal_vec(2);
    const bool satisfied = x[0] >= 0.5 && x[1] >= -1.0;
    REQUIRE((con.loss(x) == 0.0) == satisfied);
    REQUIRE(con.satisfied(x) == (x[0] >= 0.5 && x[1] >= -1.0));
  }
}

TEST_CASE("composite loss is exactly the mean of part losses") {
  Vec y0(1), y1(1);
  y0 << 1.0;
  y1 << -2.0;
  auto a = std::make_shared<EqualityConstraint>(std::vector<int>{0}, y0, 2);
  auto b = std::make_shared<EqualityConstraint>(std::vector<int>{1}, y1, 2);
  CompositeConstraint combo({a, b});
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const Vec x = rng.normal_vec(2);
    REQUIRE(combo.loss(x) == Catch::Approx((a->loss(x) + b->loss(x)) / 2.0).epsilon(1e-15));
  }
  Vec sat(2);
  sat << 1.0, -2.0;
  REQUIRE(combo.loss(sat) == 0.0);
}

TEST_CASE("constraint zoo gradients match finite differences away from kinks") {
  Rng rng(5);
  SECTION("equality mask") {
    Vec y(2);
    y << 0.3, -0.7;
    EqualityConstraint con(std::vector<int>{0, 2}, y, 4);
    for (int i = 0; i < 20; ++i) check_grad_matches_fd(con, rng.normal_vec(4));
  }
  SECTION("explicit operator") {
    Mat a = averaging_operator(4, 2);
    Vec y(2);
    y << 0.1, 0.2;
    EqualityConstraint con(a, y);
    for (int i = 0; i < 20; ++i) check_grad_matches_fd(con, rng.normal_vec(4));
  }
  SECTION("gaussian blur operator") {
    Mat a = gaussian_blur_operator(8, 2, 1.5, 3);
    Rng tr(6);
    const Vec target_src = tr.normal_vec(16);
    EqualityConstraint con(a, Vec(a * target_src));
    for (int i = 0; i < 20; ++i) check_grad_matches_fd(con, rng.normal_vec(16));
  }
  SECTION("coordinate hinge away from the kink") {
    std::vector<std::shared_ptr<const InequalityTerm>> parts = {std::make_shared<CoordinateTerm>(1, 0.5)};
    InequalityConstraint con(3, parts);
    int done = 0;
    while (done < 20) {
      const Vec x = rng.normal_vec(3);
      if (std::abs(x[1] - 0.5) < 0.05) continue;
      check_grad_matches_fd(con, x);
      ++done;
    }
  }
  SECTION("point distance hinge") {
    std::vector<std::shared_ptr<const InequalityTerm>> parts = {
        std::make_shared<PointDistanceTerm>(0, 1, 0.2, -0.1, 0.8)};
    InequalityConstraint con(4, parts);
    int done = 0;
    while (done < 20) {
      const Vec x = rng.normal_vec(4);
      const double dist = std::hypot(x[0] - 0.2, x[1] + 0.1);
      if (std::abs(dist - 0.8) < 0.05 || dist < 0.05) continue;
      check_grad_matches_fd(con, x);
      ++done;
    }
  }
  SECTION("angular momentum") {
    std::vector<std::shared_ptr<const InequalityTerm>> parts = {
        std::make_shared<AngularMomentumTerm>(8, std::vector<int>{1, 3, 5}, 10.0)};
    InequalityConstraint con(16, parts);
    // Threshold far above any realized value keeps the hinge active.
    for (int i = 0; i < 20; ++i) check_grad_matches_fd(con, rng.normal_vec(16));
  }
  SECTION("composite") {
    Vec y(1);
    y << 0.4;
    auto e = std::make_shared<EqualityConstraint>(std::vector<int>{0}, y, 4);
    std::vector<std::shared_ptr<const InequalityTerm>> parts = {std::make_shared<CoordinateTerm>(3, 5.0)};
    auto h = std::make_shared<InequalityConstraint>(4, parts);
    CompositeConstraint combo({e, h});
    for (int i = 0; i < 20; ++i) check_grad_matches_fd(combo, rng.normal_vec(4));
  }
}

TEST_CASE("guidance gradient trivial cases") {
  const auto s = linear_beta_schedule(100, 1e-3, 0.05);
  SECTION("identically-zero loss gives zero gradient") {
    testing::LinearDenoiser model;
    Rng rng(7);
    model.a = Mat(2, 2);
    model.a << 0.1 * rng.normal(), 0.1 * rng.normal(), 0.1 * rng.normal(), 0.1 * rng.normal();
    model.b = Vec::Zero(2);
    NullConstraint con(2);
    const GuidanceResult g = guidance_gradient(model, con, rng.normal_vec(2), 50, s);
    REQUIRE(g.loss == 0.0);
    REQUIRE(g.grad.norm() == 0.0);
  }
  SECTION("zero denoiser collapses the chain rule") {
    testing::ZeroDenoiser model;
    model.d = 2;
    Vec y(1);
    y << 0.7;
    EqualityConstraint con(std::vector<int>{0}, y, 2);
    Rng rng(8);
    const Vec x = rng.normal_vec(2);
    const int t = 30;
    const double ab = s.alpha_bar(t);
    const GuidanceResult g = guidance_gradient(model, con, x, t, s);
    const Vec expected = con.grad_x0(x / std::sqrt(ab)) / std::sqrt(ab);
    REQUIRE((g.grad - expected).norm() < 1e-14);
  }
}

TEST_CASE("guidance gradient matches finite differences through a trained model") {
  const auto s = linear_beta_schedule(100, 1e-3, 0.05);
  Rng dr(9);
  Mat data(128, 2);
  for (int i = 0; i < 128; ++i) data.row(i) = dr.normal_vec(2).transpose();
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 64;
  cfg.seed = 10;
  MlpConfig arch;
  arch.hidden = {24, 24};
  arch.time_embed_dim = 8;
  const TrainResult tr = train(data, s, cfg, arch);

  Vec y(1);
  y << 0.4;
  EqualityConstraint con(std::vector<int>{0}, y, 2);
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec x = rng.normal_vec(2);
    const int t = 1 + static_cast<int>(rng.uniform_int(100));
    const GuidanceResult g = guidance_gradient(tr.model, con, x, t, s);
    const Vec fd = testing::central_difference_gradient(
        [&](const Vec& p) {
          const Vec eps = tr.model.forward(p, t);
          return con.loss(predict_x0(p, eps, t, s));
        },
        x, 1e-5);
    REQUIRE((g.grad - fd).norm() / std::max(1e-8, fd.norm()) < 1e-4);
  }
}

TEST_CASE("guidance gradient returns the same eps_pred as a standalone forward") {
  const auto s = linear_beta_schedule(100, 1e-3, 0.05);
  Rng rng(12);
  MlpConfig arch;
  arch.hidden = {16};
  arch.time_embed_dim = 8;
  MlpDenoiser model(2, arch, rng);
  Vec y(1);
  y << 0.0;
  EqualityConstraint con(std::vector<int>{0}, y, 2);
  const Vec x = rng.normal_vec(2);
  const GuidanceResult g = guidance_gradient(model, con, x, 42, s);
  const Vec eps = model.forward(x, 42);
  REQUIRE(std::memcmp(g.eps_pred.data(), eps.data(), sizeof(double) * 2) == 0);
}

TEST_CASE("jensen gap oracle examples") {
  SECTION("point mass gives exact zeros") {
    const auto con = scalar_quadratic_constraint(0.3);
    const JensenBounds b = jensen_gap_oracle(*con, ScalarPosterior{{1.2}, {1.0}});
    REQUIRE(b.gap == 0.0);
    REQUIRE(b.lower == 0.0);
    REQUIRE(b.upper == 0.0);
    REQUIRE(b.variance == 0.0);
  }
  SECTION("quadratic loss: gap near the local curvature estimate, inside the bracket") {
    const auto con = scalar_quadratic_constraint(0.0);
    const double h = 0.05;
    const ScalarPosterior p{{-h, h}, {0.5, 0.5}};
    const JensenBounds b = jensen_gap_oracle(*con, p);
    // f = exp(-x^2): f''(0) = -2, Var = h^2.
    REQUIRE(b.lower <= b.gap);
    REQUIRE(b.gap <= b.upper);
    REQUIRE(b.gap == Catch::Approx(-2.0 / 2.0 * h * h).epsilon(0.02));
  }
  SECTION("symmetric two-point posterior with even f") {
    const auto con = scalar_quadratic_constraint(0.0);
    const double h = 0.8;
    const JensenBounds b = jensen_gap_oracle(*con, ScalarPosterior{{-h, h}, {0.5, 0.5}});
    const double expected = std::exp(-h * h) - 1.0;  // f(h) - f(0)
    REQUIRE(b.gap == Catch::Approx(expected).epsilon(1e-12));
  }
  SECTION("non-scalar constraint rejected") {
    Vec y(1);
    y << 0.0;
    EqualityConstraint con(std::vector<int>{0}, y, 2);
    REQUIRE_THROWS_AS(jensen_gap_oracle(con, ScalarPosterior{{0.0}, {1.0}}), std::invalid_argument);
  }
  SECTION("invalid posteriors rejected") {
    const auto con = scalar_quadratic_constraint(0.0);
    REQUIRE_THROWS_AS(jensen_gap_oracle(*con, ScalarPosterior{{0.0}, {0.5}}), std::invalid_argument);
    REQUIRE_THROWS_AS(jensen_gap_oracle(*con, ScalarPosterior{{}, {}}), std::invalid_argument);
  }
}
