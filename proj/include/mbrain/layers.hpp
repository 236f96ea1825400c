#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mbrain/autograd.hpp"
#include "mbrain/rng.hpp"

namespace mbrain {

/// Ordered name -> parameter list. Used for checkpoints, optimizer groups
/// and gradient checks.
struct ParamList {
  std::vector<std::pair<std::string, ag::Var>> items;

  void add(std::string name, ag::Var v) { items.emplace_back(std::move(name), std::move(v)); }
  void append(const ParamList& other) { items.insert(items.end(), other.items.begin(), other.items.end()); }
  std::vector<ag::Var> vars() const {
    std::vector<ag::Var> out;
    for (const auto& [_, v] : items) out.push_back(v);
    return out;
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : items) n += v->value.size();
    return n;
  }
};

/// Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Matrix fan_in_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  Matrix m(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  for (double& v : m.data) v = rng.uniform(-bound, bound);
  return m;
}

struct Linear {
  ag::Var weight;  // in x out
  ag::Var bias;    // 1 x out

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(ag::parameter(fan_in_uniform(in, out, in, rng))), bias(ag::parameter(Matrix(1, out))) {}

  ag::Var operator()(const ag::Var& x) const { return ag::add_row(ag::matmul(x, weight), bias); }

  void collect(ParamList& p, const std::string& prefix) const {
    p.add(prefix + ".weight", weight);
    p.add(prefix + ".bias", bias);
  }
};

/// Two-layer feedforward: Linear -> ReLU -> Linear.
struct Mlp2 {
  Linear first, second;

  Mlp2() = default;
  Mlp2(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) : first(in, hidden, rng), second(hidden, out, rng) {}

  ag::Var operator()(const ag::Var& x) const { return second(ag::relu(first(x))); }

  void collect(ParamList& p, const std::string& prefix) const {
    first.collect(p, prefix + ".0");
    second.collect(p, prefix + ".1");
  }
};

/// Single-layer LSTM with gate order [input | forget | cell | output].
struct Lstm {
  ag::Var w_input;   // in x 4H
  ag::Var w_hidden;  // H x 4H
  ag::Var bias;      // 1 x 4H
  std::size_t hidden = 0;

  Lstm() = default;
  Lstm(std::size_t in, std::size_t hidden_size, Rng& rng)
      : w_input(ag::parameter(fan_in_uniform(in, 4 * hidden_size, hidden_size, rng))),
        w_hidden(ag::parameter(fan_in_uniform(hidden_size, 4 * hidden_size, hidden_size, rng))),
        bias(ag::parameter(Matrix(1, 4 * hidden_size))),
        hidden(hidden_size) {}

  /// Runs over N sequences of length T whose rows are laid out n*T + t.
  /// Returns the hidden state after each step, each N x H.
  std::vector<ag::Var> run(const ag::Var& x, std::size_t n_seq, std::size_t steps) const {
    if (x->rows() != n_seq * steps) throw ShapeError("Lstm::run: rows != n_seq * steps");
    const ag::Var projected = ag::matmul(x, w_input);
    ag::Var h = ag::constant(Matrix(n_seq, hidden));
    ag::Var c = ag::constant(Matrix(n_seq, hidden));
    std::vector<ag::Var> out;
    out.reserve(steps);
    std::vector<std::size_t> idx(n_seq);
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t n = 0; n < n_seq; ++n) idx[n] = n * steps + t;
      ag::Var gates = ag::add_row(ag::add(ag::gather_rows(projected, idx), ag::matmul(h, w_hidden)), bias);
      ag::Var hc = ag::lstm_pointwise(gates, c);
      h = ag::slice_cols(hc, 0, hidden);
      c = ag::slice_cols(hc, hidden, hidden);
      out.push_back(h);
    }
    return out;
  }

  void collect(ParamList& p, const std::string& prefix) const {
    p.add(prefix + ".w_input", w_input);
    p.add(prefix + ".w_hidden", w_hidden);
    p.add(prefix + ".bias", bias);
  }
};

/// "Same"-style padded strided 1-D convolution: output length is
/// ceil(len / stride), padding split left-heavy-right.
struct Conv1d {
  ag::Var weight;  // out x kernel*in
  ag::Var bias;    // 1 x out
  std::size_t in_ch = 0, out_ch = 0, kernel = 0, stride = 1;

  Conv1d() = default;
  Conv1d(std::size_t in, std::size_t out, std::size_t kernel_size, std::size_t stride_size, Rng& rng)
      : weight(ag::parameter(fan_in_uniform(out, kernel_size * in, kernel_size * in, rng))),
        bias(ag::parameter(Matrix(1, out))),
        in_ch(in),
        out_ch(out),
        kernel(kernel_size),
        stride(stride_size) {}

  std::size_t out_len(std::size_t len) const { return (len + stride - 1) / stride; }

  std::size_t pad_left(std::size_t len) const {
    const std::size_t o = out_len(len);
    const std::size_t needed = (o - 1) * stride + kernel;
    const std::size_t pad = needed > len ? needed - len : 0;
    return pad / 2;
  }

  ag::Var operator()(const ag::Var& x, std::size_t n_seq, std::size_t len) const {
    return ag::conv1d(x, weight, bias, n_seq, len, kernel, stride, pad_left(len), out_len(len));
  }

  void collect(ParamList& p, const std::string& prefix) const {
    p.add(prefix + ".weight", weight);
    p.add(prefix + ".bias", bias);
  }
};

}  // namespace mbrain
