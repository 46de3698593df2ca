#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "trustsamp/diffusion.hpp"
#include "trustsamp/rng.hpp"

namespace trustsamp {

enum class Activation { Silu, Tanh };

inline std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Silu: return "silu";
    case Activation::Tanh: return "tanh";
  }
  throw std::logic_error("unknown activation");
}

inline Activation activation_from_name(const std::string& name) {
  if (name == "silu") return Activation::Silu;
  if (name == "tanh") return Activation::Tanh;
  throw std::invalid_argument("unknown activation: " + name);
}

/// Sinusoidal embedding of a raw timestep index. Frequencies fall
/// geometrically from 1 to 1e-4 over dim/2 (sin, cos) pairs.
inline Vec sinusoidal_time_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("time embedding dim must be even and >= 2");
  const int half = dim / 2;
  Vec e(dim);
  for (int i = 0; i < half; ++i) {
    const double exponent = (half == 1) ? 0.0 : static_cast<double>(i) / (half - 1);
    const double freq = std::exp(-std::log(10000.0) * exponent);
    e[2 * i] = std::sin(t * freq);
    e[2 * i + 1] = std::cos(t * freq);
  }
  return e;
}

struct MlpConfig {
  std::vector<int> hidden{128, 128, 128, 128};
  int time_embed_dim = 32;
  Activation activation = Activation::Silu;
};

/// Small time-conditioned MLP predicting the forward-process noise.
/// The timestep enters as a sinusoidal embedding concatenated to x.
/// All arithmetic is in doubles so gradient checks have headroom.
class MlpDenoiser {
 public:
  /// Per-call scratch holding what the input-VJP needs: the activation
  /// derivatives at each hidden layer of the most recent forward pass.
  struct Tape {
    std::vector<Vec> act_deriv;
  };

  MlpDenoiser() = default;

  MlpDenoiser(int data_dim, const MlpConfig& cfg, Rng& init_rng)
      : data_dim_(data_dim), time_embed_dim_(cfg.time_embed_dim), activation_(cfg.activation) {
    if (data_dim < 1) throw std::invalid_argument("MlpDenoiser: data_dim must be positive");
    dims_.push_back(data_dim + cfg.time_embed_dim);
    for (int h : cfg.hidden) {
      if (h < 1) throw std::invalid_argument("MlpDenoiser: hidden widths must be positive");
      dims_.push_back(h);
    }
    dims_.push_back(data_dim);
    const std::size_t layers = dims_.size() - 1;
    weights_.resize(layers);
    biases_.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      const int in = dims_[l], out = dims_[l + 1];
      const double scale = std::sqrt(2.0 / in);
      weights_[l] = Mat(out, in);
      for (int r = 0; r < out; ++r)
        for (int c = 0; c < in; ++c) weights_[l](r, c) = scale * init_rng.normal();
      biases_[l] = Vec::Zero(out);
    }
  }

  int dim() const { return data_dim_; }
  int time_embed_dim() const { return time_embed_dim_; }
  Activation activation() const { return activation_; }
  const std::vector<int>& layer_dims() const { return dims_; }
  std::vector<Mat>& weights() { return weights_; }
  std::vector<Vec>& biases() { return biases_; }
  const std::vector<Mat>& weights() const { return weights_; }
  const std::vector<Vec>& biases() const { return biases_; }

  Vec forward(const Vec& x, int t) const {
    Tape tape;
    return forward(x, t, tape);
  }

  Vec forward(const Vec& x, int t, Tape& tape) const {
    if (x.size() != data_dim_) throw std::invalid_argument("MlpDenoiser::forward: dimension mismatch");
    const std::size_t layers = weights_.size();
    tape.act_deriv.assign(layers > 0 ? layers - 1 : 0, Vec());
    Vec a(dims_[0]);
    a.head(data_dim_) = x;
    a.tail(time_embed_dim_) = sinusoidal_time_embedding(t, time_embed_dim_);
    for (std::size_t l = 0; l < layers; ++l) {
      Vec z = weights_[l] * a + biases_[l];
      if (l + 1 < layers) {
        a = apply_activation(z, &tape.act_deriv[l]);
      } else {
        a = std::move(z);
      }
    }
    return a;
  }

  /// Pullback of `cotangent` through the most recent forward pass,
  /// with respect to the spatial input only (not t, not weights).
  Vec vjp(const Tape& tape, const Vec& cotangent) const {
    if (cotangent.size() != data_dim_) throw std::invalid_argument("MlpDenoiser::vjp: dimension mismatch");
    Vec v = cotangent;
    for (std::size_t l = weights_.size(); l-- > 0;) {
      if (l + 1 < weights_.size()) v = v.cwiseProduct(tape.act_deriv[l]);
      v = weights_[l].transpose() * v;
    }
    return v.head(data_dim_);
  }

  Vec vjp_input(const Vec& x, int t, const Vec& cotangent) const {
    Tape tape;
    forward(x, t, tape);
    return vjp(tape, cotangent);
  }

  /// Batched forward used by the trainer; rows of `a0` are full inputs
  /// (x concatenated with the time embedding). Stores layer inputs and
  /// activation derivatives for backprop.
  Mat forward_batch(const Mat& a0, std::vector<Mat>& layer_inputs, std::vector<Mat>& act_derivs) const {
    const std::size_t layers = weights_.size();
    layer_inputs.assign(layers, Mat());
    act_derivs.assign(layers > 0 ? layers - 1 : 0, Mat());
    Mat a = a0;
    for (std::size_t l = 0; l < layers; ++l) {
      layer_inputs[l] = a;
      Mat z = a * weights_[l].transpose();
      z.rowwise() += biases_[l].transpose();
      if (l + 1 < layers) {
        act_derivs[l] = Mat(z.rows(), z.cols());
        a = apply_activation_batch(z, act_derivs[l]);
      } else {
        a = std::move(z);
      }
    }
    return a;
  }

 private:
  Vec apply_activation(const Vec& z, Vec* deriv) const {
    Vec out(z.size());
    deriv->resize(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      double o, d;
      eval_activation(z[i], o, d);
      out[i] = o;
      (*deriv)[i] = d;
    }
    return out;
  }

  Mat apply_activation_batch(const Mat& z, Mat& deriv) const {
    Mat out(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r)
      for (Eigen::Index c = 0; c < z.cols(); ++c) {
        double o, d;
        eval_activation(z(r, c), o, d);
        out(r, c) = o;
        deriv(r, c) = d;
      }
    return out;
  }

  void eval_activation(double z, double& out, double& deriv) const {
    if (activation_ == Activation::Silu) {
      const double s = 1.0 / (1.0 + std::exp(-z));
      out = z * s;
      deriv = s * (1.0 + z * (1.0 - s));
    } else {
      const double th = std::tanh(z);
      out = th;
      deriv = 1.0 - th * th;
    }
  }

  int data_dim_ = 0;
  int time_embed_dim_ = 0;
  Activation activation_ = Activation::Silu;
  std::vector<int> dims_;
  std::vector<Mat> weights_;
  std::vector<Vec> biases_;
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::string dataset_id;

  void validate() const {
    if (epochs < 1 || batch_size < 1 || learning_rate < 0.0)
      throw std::invalid_argument("TrainConfig: epochs and batch_size must be positive, learning_rate >= 0");
  }
};

struct TrainResult {
  MlpDenoiser model;
  std::vector<double> loss_history;  // one entry per epoch
  double final_loss = 0.0;
};

namespace detail {
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
}  // namespace detail

/// Noise-prediction training: per sample draw t ~ Unif{1..T} then
/// eps ~ N(0, I), diffuse, and regress the predicted noise onto eps with
/// squared-norm loss under Adam. Fully deterministic for a fixed seed.
inline TrainResult train(const Mat& dataset, const NoiseSchedule& s, const TrainConfig& cfg,
                         const MlpConfig& arch = MlpConfig{}) {
  cfg.validate();
  if (dataset.rows() == 0) throw std::invalid_argument("train: empty dataset");
  const int n = static_cast<int>(dataset.rows());
  const int d = static_cast<int>(dataset.cols());

  Rng rng(cfg.seed);
  MlpDenoiser model(d, arch, rng);

  const std::size_t layers = model.weights().size();
  std::vector<Mat> m_w(layers), v_w(layers);
  std::vector<Vec> m_b(layers), v_b(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    m_w[l] = Mat::Zero(model.weights()[l].rows(), model.weights()[l].cols());
    v_w[l] = m_w[l];
    m_b[l] = Vec::Zero(model.biases()[l].size());
    v_b[l] = m_b[l];
  }

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.loss_history.reserve(static_cast<std::size_t>(cfg.epochs));
  long adam_step = 0;

  std::vector<Mat> layer_inputs, act_derivs;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates shuffle from the training stream.
    for (int i = n - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(i + 1));
      std::swap(order[static_cast<std::size_t>(i)], order[j]);
    }
    double epoch_loss = 0.0;
    int batches = 0;
    for (int begin = 0; begin < n; begin += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - begin);
      Mat a0(bsz, d + model.time_embed_dim());
      Mat target(bsz, d);
      for (int b = 0; b < bsz; ++b) {
        const int row = order[static_cast<std::size_t>(begin + b)];
        const int t = 1 + static_cast<int>(rng.uniform_int(s.T));
        const Vec eps = rng.normal_vec(d);
        const Vec x_t = forward_diffuse(dataset.row(row).transpose(), t, eps, s);
        a0.row(b).head(d) = x_t.transpose();
        a0.row(b).tail(model.time_embed_dim()) = sinusoidal_time_embedding(t, model.time_embed_dim()).transpose();
        target.row(b) = eps.transpose();
      }
      const Mat out = model.forward_batch(a0, layer_inputs, act_derivs);
      const Mat resid = out - target;
      const double loss = resid.squaredNorm() / bsz;
      if (!std::isfinite(loss))
        throw std::runtime_error("train: loss diverged to NaN/Inf at epoch " + std::to_string(epoch));
      epoch_loss += loss;
      ++batches;

      // Backprop and Adam update.
      Mat dz = (2.0 / bsz) * resid;
      ++adam_step;
      const double bias1 = 1.0 - std::pow(detail::kAdamBeta1, adam_step);
      const double bias2 = 1.0 - std::pow(detail::kAdamBeta2, adam_step);
      for (std::size_t l = layers; l-- > 0;) {
        const Mat dw = dz.transpose() * layer_inputs[l];
        const Vec db = dz.colwise().sum().transpose();
        if (l > 0) {
          Mat da = dz * model.weights()[l];
          dz = da.cwiseProduct(act_derivs[l - 1]);
        }
        m_w[l] = detail::kAdamBeta1 * m_w[l] + (1.0 - detail::kAdamBeta1) * dw;
        v_w[l] = detail::kAdamBeta2 * v_w[l] + (1.0 - detail::kAdamBeta2) * dw.cwiseProduct(dw);
        m_b[l] = detail::kAdamBeta1 * m_b[l] + (1.0 - detail::kAdamBeta1) * db;
        v_b[l] = detail::kAdamBeta2 * v_b[l] + (1.0 - detail::kAdamBeta2) * db.cwiseProduct(db);
        model.weights()[l] -= (cfg.learning_rate / bias1) *
            (m_w[l].array() / ((v_w[l].array() / bias2).sqrt() + detail::kAdamEps)).matrix();
        model.biases()[l] -= (cfg.learning_rate / bias1) *
            (m_b[l].array() / ((v_b[l].array() / bias2).sqrt() + detail::kAdamEps)).matrix();
      }
    }
    result.loss_history.push_back(epoch_loss / batches);
  }
  result.final_loss = result.loss_history.back();
  result.model = std::move(model);
  return result;
}

/// Self-describing checkpoint: fixed binary header followed by weights
/// in layer order (W row-major then bias), 64-bit little-endian doubles.
/// The exact layout is documented in docs/file_formats.md.
struct CheckpointMeta {
  std::uint32_t version = 1;
  std::uint32_t T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::uint64_t seed = 0;
  std::uint32_t epochs = 0;
  std::uint32_t batch_size = 0;
  double learning_rate = 0.0;
  double adam_beta1 = detail::kAdamBeta1;
  double adam_beta2 = detail::kAdamBeta2;
  double adam_eps = detail::kAdamEps;
  double final_loss = 0.0;
};

struct Checkpoint {
  CheckpointMeta meta;
  MlpDenoiser model;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian");

inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'A', 'M', 'P', 'C', 'K', 'P'};

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const MlpDenoiser& model, const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_pod(os, meta.version);
  detail::write_pod(os, meta.T);
  detail::write_pod(os, meta.beta_start);
  detail::write_pod(os, meta.beta_end);
  const auto& dims = model.layer_dims();
  detail::write_pod(os, static_cast<std::uint32_t>(dims.size()));
  for (int v : dims) detail::write_pod(os, static_cast<std::uint32_t>(v));
  detail::write_pod(os, static_cast<std::uint32_t>(model.time_embed_dim()));
  char act[16] = {};
  std::string an = activation_name(model.activation());
  std::memcpy(act, an.data(), std::min<std::size_t>(an.size(), 15));
  os.write(act, sizeof(act));
  detail::write_pod(os, meta.seed);
  detail::write_pod(os, meta.epochs);
  detail::write_pod(os, meta.batch_size);
  detail::write_pod(os, meta.learning_rate);
  detail::write_pod(os, meta.adam_beta1);
  detail::write_pod(os, meta.adam_beta2);
  detail::write_pod(os, meta.adam_eps);
  detail::write_pod(os, meta.final_loss);
  for (std::size_t l = 0; l < model.weights().size(); ++l) {
    const Mat& w = model.weights()[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) detail::write_pod(os, w(r, c));
    const Vec& b = model.biases()[l];
    for (Eigen::Index i = 0; i < b.size(); ++i) detail::write_pod(os, b[i]);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  Checkpoint ckpt;
  ckpt.meta.version = detail::read_pod<std::uint32_t>(is);
  if (ckpt.meta.version != 1) throw std::runtime_error("checkpoint: unsupported version");
  ckpt.meta.T = detail::read_pod<std::uint32_t>(is);
  ckpt.meta.beta_start = detail::read_pod<double>(is);
  ckpt.meta.beta_end = detail::read_pod<double>(is);
  const auto n_dims = detail::read_pod<std::uint32_t>(is);
  if (n_dims < 2 || n_dims > 64) throw std::runtime_error("checkpoint: implausible layer count");
  std::vector<int> dims(n_dims);
  for (auto& v : dims) v = static_cast<int>(detail::read_pod<std::uint32_t>(is));
  const auto emb = static_cast<int>(detail::read_pod<std::uint32_t>(is));
  char act[16];
  is.read(act, sizeof(act));
  if (!is) throw std::runtime_error("checkpoint: truncated header");
  act[15] = '\0';
  const Activation activation = activation_from_name(act);
  ckpt.meta.seed = detail::read_pod<std::uint64_t>(is);
  ckpt.meta.epochs = detail::read_pod<std::uint32_t>(is);
  ckpt.meta.batch_size = detail::read_pod<std::uint32_t>(is);
  ckpt.meta.learning_rate = detail::read_pod<double>(is);
  ckpt.meta.adam_beta1 = detail::read_pod<double>(is);
  ckpt.meta.adam_beta2 = detail::read_pod<double>(is);
  ckpt.meta.adam_eps = detail::read_pod<double>(is);
  ckpt.meta.final_loss = detail::read_pod<double>(is);

  const int d = dims.back();
  if (dims.front() != d + emb)
    throw std::runtime_error("checkpoint: first layer width disagrees with data dim + embedding dim");
  MlpConfig arch;
  arch.hidden.assign(dims.begin() + 1, dims.end() - 1);
  arch.time_embed_dim = emb;
  arch.activation = activation;
  Rng dummy(0);
  MlpDenoiser model(d, arch, dummy);
  for (std::size_t l = 0; l < model.weights().size(); ++l) {
    Mat& w = model.weights()[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = detail::read_pod<double>(is);
    Vec& b = model.biases()[l];
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = detail::read_pod<double>(is);
  }
  // Exactly the payload and nothing more.
  is.peek();
  if (!is.eof()) throw std::runtime_error("checkpoint: layer_dims disagree with weight payload length");
  ckpt.model = std::move(model);
  return ckpt;
}

}  // namespace trustsamp
