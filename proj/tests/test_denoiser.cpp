#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "support/test_models.hpp"
#include "trustsamp/denoiser.hpp"

using namespace trustsamp;

namespace {

MlpConfig small_arch() {
  MlpConfig a;
  a.hidden = {16, 16};
  a.time_embed_dim = 8;
  return a;
}

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "trustsamp_denoiser_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("all-zero weights produce the zero vector") {
  Rng rng(1);
  MlpDenoiser m(3, small_arch(), rng);
  for (auto& w : m.weights()) w.setZero();
  for (auto& b : m.biases()) b.setZero();
  Rng xr(2);
  REQUIRE(m.forward(xr.normal_vec(3), 7).norm() == 0.0);
}

TEST_CASE("output dimension equals input dimension") {
  for (int d : {1, 2, 5, 8}) {
    Rng rng(static_cast<std::uint64_t>(d));
    MlpDenoiser m(d, small_arch(), rng);
    REQUIRE(m.forward(rng.normal_vec(d), 3).size() == d);
  }
}

TEST_CASE("layer dims follow the data and embedding widths") {
  Rng rng(1);
  MlpDenoiser m(4, small_arch(), rng);
  REQUIRE(m.layer_dims().front() == 4 + 8);
  REQUIRE(m.layer_dims().back() == 4);
}

TEST_CASE("vjp of zero cotangent is zero") {
  Rng rng(3);
  MlpDenoiser m(3, small_arch(), rng);
  REQUIRE(m.vjp_input(rng.normal_vec(3), 5, Vec::Zero(3)).norm() == 0.0);
}

TEST_CASE("single linear layer vjp equals the x-block transpose") {
  MlpConfig arch;
  arch.hidden = {};  // one linear layer
  arch.time_embed_dim = 4;
  Rng rng(9);
  MlpDenoiser m(3, arch, rng);
  Rng xr(10);
  const Vec x = xr.normal_vec(3);
  const Vec cot = xr.normal_vec(3);
  const Mat wx = m.weights()[0].leftCols(3);
  const Vec expected = wx.transpose() * cot;
  const Vec got = m.vjp_input(x, 2, cot);
  REQUIRE((got - expected).norm() < 1e-14);
}

TEST_CASE("vjp matches central finite differences") {
  Rng rng(11);
  MlpDenoiser m(3, small_arch(), rng);
  Rng xr(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec x = xr.normal_vec(3);
    const int t = 1 + static_cast<int>(xr.uniform_int(100));
    const Vec cot = xr.normal_vec(3);
    const Vec vjp = m.vjp_input(x, t, cot);
    const Vec fd = testing::central_difference_gradient(
        [&](const Vec& p) { return cot.dot(m.forward(p, t)); }, x, 1e-5);
    REQUIRE((vjp - fd).norm() / std::max(1e-12, vjp.norm()) < 1e-4);
  }
}

TEST_CASE("forward stays finite on bounded inputs") {
  Rng rng(13);
  MlpDenoiser m(4, small_arch(), rng);
  Rng xr(14);
  for (int trial = 0; trial < 50; ++trial) {
    Vec x = xr.normal_vec(4);
    x *= 100.0 / x.norm();
    REQUIRE(m.forward(x, 1 + static_cast<int>(xr.uniform_int(1000))).allFinite());
  }
}

TEST_CASE("training on a point mass reaches the closed-form predictor") {
  const auto s = linear_beta_schedule(100, 1e-3, 0.05);
  Vec c(2);
  c << 1.5, -0.5;
  Mat data(128, 2);
  for (int i = 0; i < 128; ++i) data.row(i) = c.transpose();
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch_size = 32;
  cfg.learning_rate = 3e-3;
  cfg.seed = 21;
  MlpConfig arch;
  arch.hidden = {64, 64};
  arch.time_embed_dim = 16;
  const TrainResult tr = train(data, s, cfg, arch);
  REQUIRE(tr.final_loss < 0.05);

  // For delta data the loss-minimizing prediction is recoverable in
  // closed form; compare on fresh diffused points.
  testing::PointMassDenoiser oracle;
  oracle.center = c;
  oracle.schedule = &s;
  Rng xr(22);
  double err = 0.0;
  int count = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int t = 10 + static_cast<int>(xr.uniform_int(90));
    const Vec eps = xr.normal_vec(2);
    const Vec x_t = forward_diffuse(c, t, eps, s);
    err += (tr.model.forward(x_t, t) - oracle.forward(x_t, t)).squaredNorm();
    ++count;
  }
  REQUIRE(err / count < 0.05);
}

TEST_CASE("seed-fixed training is bitwise reproducible") {
  const auto s = linear_beta_schedule(50, 1e-3, 0.05);
  Rng dr(31);
  Mat data(64, 2);
  for (int i = 0; i < 64; ++i) data.row(i) = dr.normal_vec(2).transpose();
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 32;
  cfg.seed = 77;
  const TrainResult a = train(data, s, cfg, small_arch());
  const TrainResult b = train(data, s, cfg, small_arch());
  REQUIRE(a.loss_history == b.loss_history);
  for (std::size_t l = 0; l < a.model.weights().size(); ++l) {
    REQUIRE(std::memcmp(a.model.weights()[l].data(), b.model.weights()[l].data(),
                        sizeof(double) * a.model.weights()[l].size()) == 0);
  }
}

TEST_CASE("zero learning rate leaves the initialization unchanged") {
  const auto s = linear_beta_schedule(50, 1e-3, 0.05);
  Rng dr(41);
  Mat data(32, 2);
  for (int i = 0; i < 32; ++i) data.row(i) = dr.normal_vec(2).transpose();
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.0;
  cfg.seed = 5;
  const TrainResult tr = train(data, s, cfg, small_arch());
  Rng init_rng(cfg.seed);
  const MlpDenoiser reference(2, small_arch(), init_rng);
  for (std::size_t l = 0; l < tr.model.weights().size(); ++l)
    REQUIRE((tr.model.weights()[l] - reference.weights()[l]).norm() == 0.0);
}

TEST_CASE("smoothed loss history is nonincreasing") {
  const auto s = linear_beta_schedule(100, 1e-3, 0.05);
  Rng dr(51);
  Mat data(256, 2);
  for (int i = 0; i < 256; ++i) data.row(i) = (Vec(2) << dr.normal(), dr.normal()).finished().transpose();
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 64;
  cfg.seed = 6;
  const TrainResult tr = train(data, s, cfg, small_arch());
  const auto mean_of = [&](std::size_t lo, std::size_t hi) {
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += tr.loss_history[i];
    return acc / (hi - lo);
  };
  REQUIRE(mean_of(36, 40) <= mean_of(0, 4));
}

TEST_CASE("training rejects an empty dataset and diverging loss") {
  const auto s = linear_beta_schedule(50, 1e-3, 0.05);
  TrainConfig cfg;
  REQUIRE_THROWS_AS(train(Mat(0, 2), s, cfg, small_arch()), std::invalid_argument);

  Rng dr(61);
  Mat data(32, 2);
  for (int i = 0; i < 32; ++i) data.row(i) = (100.0 * dr.normal_vec(2)).transpose();
  TrainConfig bad;
  bad.epochs = 5;
  bad.batch_size = 8;
  bad.learning_rate = 1e160;  // one Adam step overflows the next forward pass
  bad.seed = 2;
  REQUIRE_THROWS_WITH(train(data, s, bad, small_arch()), Catch::Matchers::ContainsSubstring("diverged"));
}

TEST_CASE("checkpoint round trip reproduces forward bitwise") {
  Rng rng(71);
  MlpDenoiser m(3, small_arch(), rng);
  CheckpointMeta meta;
  meta.T = 100;
  meta.beta_start = 1e-4;
  meta.beta_end = 0.02;
  meta.seed = 99;
  meta.epochs = 17;
  meta.final_loss = 0.123;
  const auto path = temp_file("roundtrip.ckpt").string();
  save_checkpoint(path, m, meta);
  const Checkpoint loaded = load_checkpoint(path);
  REQUIRE(loaded.meta.seed == 99);
  REQUIRE(loaded.meta.epochs == 17);
  REQUIRE(loaded.meta.T == 100);
  REQUIRE(loaded.meta.final_loss == 0.123);
  REQUIRE(loaded.model.layer_dims() == m.layer_dims());
  Rng xr(72);
  for (int i = 0; i < 100; ++i) {
    const Vec x = xr.normal_vec(3);
    const int t = 1 + static_cast<int>(xr.uniform_int(100));
    const Vec a = m.forward(x, t);
    const Vec b = loaded.model.forward(x, t);
    REQUIRE(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
  }
}

TEST_CASE("checkpoint loading rejects malformed files") {
  Rng rng(81);
  MlpDenoiser m(3, small_arch(), rng);
  CheckpointMeta meta;
  const auto good = temp_file("good.ckpt").string();
  save_checkpoint(good, m, meta);

  SECTION("bad magic") {
    const auto bad = temp_file("bad_magic.ckpt").string();
    std::ofstream os(bad, std::ios::binary);
    os << "NOTACKPT-and-some-garbage";
    os.close();
    REQUIRE_THROWS_AS(load_checkpoint(bad), std::runtime_error);
  }
  SECTION("payload length disagrees with layer dims") {
    std::ifstream is(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    is.close();
    const auto truncated = temp_file("truncated.ckpt").string();
    std::ofstream os(truncated, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 16));
    os.close();
    REQUIRE_THROWS_AS(load_checkpoint(truncated), std::runtime_error);

    const auto padded = temp_file("padded.ckpt").string();
    std::ofstream os2(padded, std::ios::binary);
    os2.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    const double extra = 1.0;
    os2.write(reinterpret_cast<const char*>(&extra), sizeof(extra));
    os2.close();
    REQUIRE_THROWS_AS(load_checkpoint(padded), std::runtime_error);
  }
  SECTION("missing file") { REQUIRE_THROWS_AS(load_checkpoint(temp_file("nope.ckpt").string()), std::runtime_error); }
}

TEST_CASE("time embedding is even-dimensional and bounded") {
  REQUIRE_THROWS_AS(sinusoidal_time_embedding(3, 7), std::invalid_argument);
  const Vec e = sinusoidal_time_embedding(500, 32);
  REQUIRE(e.size() == 32);
  REQUIRE(e.cwiseAbs().maxCoeff() <= 1.0);
}
