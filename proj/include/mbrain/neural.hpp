#pragma once

// Differentiable building blocks shared by the self-supervised tasks and
// the downstream head: per-channel convolutional encoder, LSTM summarizer,
// graph aggregation without self-loops, segment pooling and bilinear
// scoring. Row layouts used throughout:
//   segment batch input   (b*C + i)*W + w        per-channel encoder
//   local codes z         (b*C + i)*T + t        width d
//   context at one step   b*C + i                width d_ar

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbrain/autograd.hpp"
#include "mbrain/graph.hpp"
#include "mbrain/layers.hpp"
#include "mbrain/rng.hpp"

namespace mbrain {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class EncoderKind { per_channel, multi_channel };
enum class Aggregator { graph, none, mlp };
enum class Pooling { mean, last };

struct ModelConfig {
  std::size_t channels = 8;
  std::size_t window = 250;
  std::size_t d = 256;
  std::size_t d_ar = 256;
  std::array<std::size_t, 3> kernels{10, 4, 4};
  std::array<std::size_t, 3> strides{5, 2, 1};
  std::size_t k1_max = 8;
  std::size_t head_hidden = 64;
  EncoderKind encoder = EncoderKind::per_channel;
  Aggregator aggregator = Aggregator::graph;
  Pooling pooling = Pooling::mean;
};

/// Sequence length after the three strided convolutions.
inline std::size_t encoded_length(const ModelConfig& cfg) {
  std::size_t len = cfg.window;
  for (std::size_t s : cfg.strides) {
    if (s == 0) throw ConfigError("encoder stride must be positive");
    len = (len + s - 1) / s;
  }
  return len;
}

inline std::size_t downsample_factor(const ModelConfig& cfg) { return cfg.strides[0] * cfg.strides[1] * cfg.strides[2]; }

inline void validate(const ModelConfig& cfg) {
  if (cfg.channels < 2) throw ConfigError("channels must be >= 2");
  if (cfg.d == 0 || cfg.d_ar == 0) throw ConfigError("d and d_ar must be positive");
  for (std::size_t k : cfg.kernels)
    if (k == 0) throw ConfigError("encoder kernel sizes must be positive");
  const std::size_t t = encoded_length(cfg);
  if (t < cfg.k1_max + 2)
    throw ConfigError("window " + std::to_string(cfg.window) + " too short: encoded length " + std::to_string(t) +
                      " < k1_max + 2 = " + std::to_string(cfg.k1_max + 2));
  if (cfg.window < cfg.kernels[0]) throw ConfigError("window shorter than the first kernel");
}

/// Mean over the time axis.
inline ag::Var pool_segment(const std::vector<ag::Var>& c_self) {
  if (c_self.empty()) throw ShapeError("pool_segment: T must be >= 1");
  return ag::scale(ag::add_n(c_self), 1.0 / static_cast<double>(c_self.size()));
}

/// Trunk (encoder + summarizer) and the self-supervised heads.
class MBrainModel {
 public:
  MBrainModel() = default;
  MBrainModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg);
    Rng rng(mix_seed(seed, 0x1417));
    const std::size_t d = cfg.d, h = cfg.d_ar;
    if (cfg.encoder == EncoderKind::per_channel) {
      conv_[0] = Conv1d(1, d, cfg.kernels[0], cfg.strides[0], rng);
      conv_[1] = Conv1d(d, d, cfg.kernels[1], cfg.strides[1], rng);
      conv_[2] = Conv1d(d, d, cfg.kernels[2], cfg.strides[2], rng);
    } else {
      conv_[0] = Conv1d(cfg.channels, d, cfg.kernels[0], cfg.strides[0], rng);
      conv_[1] = Conv1d(d, d, cfg.kernels[1], cfg.strides[1], rng);
      conv_[2] = Conv1d(d, cfg.channels * d, cfg.kernels[2], cfg.strides[2], rng);
    }
    lstm_ = Lstm(d, h, rng);
    sigma_ = SigmaNetwork(h, rng);
    theta_ = ag::parameter(fan_in_uniform(h, h, h, rng));
    for (std::size_t k = 0; k < cfg.k1_max; ++k) w_k_.push_back(ag::parameter(fan_in_uniform(2 * h, d, 2 * h, rng)));
    delayed_head_ = Mlp2(2 * h, cfg.head_hidden, 2, rng);
    replace_head_ = Mlp2(h, cfg.head_hidden, 1, rng);
    if (cfg.aggregator == Aggregator::mlp) mlp_aggregator_ = Mlp2(cfg.channels * h, h, h, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t steps() const { return encoded_length(cfg_); }

  const Lstm& summarizer() const { return lstm_; }
  const SigmaNetwork& sigma_network() const { return sigma_; }
  const ag::Var& theta() const { return theta_; }
  const ag::Var& bilinear(std::size_t k) const { return w_k_.at(k - 1); }
  const Mlp2& delayed_head() const { return delayed_head_; }
  const Mlp2& replace_head() const { return replace_head_; }
  const Mlp2& mlp_aggregator() const { return mlp_aggregator_; }

  /// Encoder and summarizer: the part reused downstream.
  ParamList trunk_params() const {
    ParamList p;
    for (std::size_t i = 0; i < 3; ++i) conv_[i].collect(p, "encoder.conv" + std::to_string(i));
    lstm_.collect(p, "summarizer");
    return p;
  }

  ParamList graph_params() const {
    ParamList p;
    sigma_.collect(p, "graph.sigma");
    p.add("graph.theta", theta_);
    if (cfg_.aggregator == Aggregator::mlp) mlp_aggregator_.collect(p, "graph.mlp_aggregator");
    return p;
  }

  ParamList instant_params() const {
    ParamList p;
    for (std::size_t k = 0; k < w_k_.size(); ++k) p.add("instant.w" + std::to_string(k + 1), w_k_[k]);
    return p;
  }
  ParamList delayed_params() const {
    ParamList p;
    delayed_head_.collect(p, "delayed.head");
    return p;
  }
  ParamList replace_params() const {
    ParamList p;
    replace_head_.collect(p, "replace.head");
    return p;
  }

  ParamList all_params() const {
    ParamList p = trunk_params();
    p.append(graph_params());
    p.append(instant_params());
    p.append(delayed_params());
    p.append(replace_params());
    return p;
  }

  /// Local codes for B segments (each W x C): rows (b*C + i)*T + t, width d.
  ag::Var encode(const std::vector<Matrix>& segments) const {
    const std::size_t b_count = segments.size(), ch = cfg_.channels, w = cfg_.window;
    for (const auto& s : segments)
      if (s.rows != w || s.cols != ch)
        throw ShapeError("encode: segment " + shape_str(s) + " does not match window x channels");
    if (cfg_.encoder == EncoderKind::per_channel) {
      Matrix x(b_count * ch * w, 1);
      for (std::size_t b = 0; b < b_count; ++b)
        for (std::size_t i = 0; i < ch; ++i)
          for (std::size_t t = 0; t < w; ++t) x.data[(b * ch + i) * w + t] = segments[b](t, i);
      return encode_sequences(ag::constant(std::move(x)), b_count * ch);
    }
    Matrix x(b_count * w, ch);
    for (std::size_t b = 0; b < b_count; ++b)
      std::copy(segments[b].data.begin(), segments[b].data.end(), x.data.begin() + static_cast<std::ptrdiff_t>(b * w * ch));
    ag::Var y = encode_sequences(ag::constant(std::move(x)), b_count);  // rows b*T + t, width C*d
    const std::size_t t_len = steps();
    ag::Var flat = ag::reshape(y, b_count * t_len * ch, cfg_.d);  // rows (b*T + t)*C + i
    std::vector<std::size_t> order(b_count * ch * t_len);
    for (std::size_t b = 0; b < b_count; ++b)
      for (std::size_t i = 0; i < ch; ++i)
        for (std::size_t t = 0; t < t_len; ++t) order[(b * ch + i) * t_len + t] = (b * t_len + t) * ch + i;
    return ag::gather_rows(flat, std::move(order));
  }

  /// Hidden state after each of the T steps, each [(B*C) x d_ar].
  std::vector<ag::Var> contextualize(const ag::Var& z, std::size_t n_seq) const {
    return lstm_.run(z, n_seq, steps());
  }

  /// Segment representation h from the per-step contexts.
  ag::Var pool(const std::vector<ag::Var>& c_self) const {
    if (cfg_.pooling == Pooling::last) {
      if (c_self.empty()) throw ShapeError("pool: T must be >= 1");
      return c_self.back();
    }
    return pool_segment(c_self);
  }

 private:
  ag::Var encode_sequences(const ag::Var& x, std::size_t n_seq) const {
    std::size_t len = cfg_.window;
    ag::Var y = x;
    for (const auto& conv : conv_) {
      y = ag::relu(conv(y, n_seq, len));
      len = conv.out_len(len);
    }
    return y;
  }

  ModelConfig cfg_;
  std::array<Conv1d, 3> conv_;
  Lstm lstm_;
  SigmaNetwork sigma_;
  ag::Var theta_;
  std::vector<ag::Var> w_k_;
  Mlp2 delayed_head_;
  Mlp2 replace_head_;
  Mlp2 mlp_aggregator_;
};

/// c_other_i = ReLU(weighted mean over j != i of c_j, times theta).
/// Rows with no incoming weight produce zeros.
inline ag::Var aggregate_neighbors(const ag::Var& c_tau, const ag::Var& a_t, const ag::Var& theta, std::size_t channels) {
  ag::Var weights = ag::normalize_offdiag_rows(a_t, channels);
  return ag::relu(ag::matmul(ag::block_matmul(weights, c_tau, channels), theta));
}

/// Feedforward aggregation over all channels in fixed order with the target
/// channel's slot zeroed.
inline ag::Var aggregate_mlp(const ag::Var& c_tau, const Mlp2& mlp, std::size_t channels) {
  const std::size_t blocks = c_tau->rows() / channels, width = c_tau->cols();
  std::vector<std::size_t> idx;
  Matrix mask(blocks * channels * channels, width, 1.0);
  idx.reserve(blocks * channels * channels);
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < channels; ++i)
      for (std::size_t j = 0; j < channels; ++j) {
        const std::size_t r = idx.size();
        idx.push_back(b * channels + j);
        if (i == j)
          for (std::size_t c = 0; c < width; ++c) mask(r, c) = 0.0;
      }
  ag::Var slots = ag::mul(ag::gather_rows(c_tau, std::move(idx)), ag::constant(std::move(mask)));
  return mlp(ag::reshape(slots, blocks * channels, channels * width));
}

/// c^T W z.
inline double bilinear_score(std::span<const double> c, const Matrix& w, std::span<const double> z) {
  if (c.size() != w.rows || z.size() != w.cols)
    throw ShapeError("bilinear_score: expected c[" + std::to_string(w.rows) + "], z[" + std::to_string(w.cols) + "]");
  Eigen::Map<const Eigen::RowVectorXd> cv(c.data(), static_cast<Eigen::Index>(c.size()));
  Eigen::Map<const Eigen::VectorXd> zv(z.data(), static_cast<Eigen::Index>(z.size()));
  return cv * as_eigen(w) * zv;
}

}  // namespace mbrain
