#pragma once

// Channel correlation graphs: segment cosine matrices, the coarse prior,
// learned Gaussian perturbation with threshold filtering, and the
// delayed cross-segment correlation used for pseudo labels.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbrain/autograd.hpp"
#include "mbrain/layers.hpp"
#include "mbrain/rng.hpp"
#include "mbrain/signal.hpp"

namespace mbrain {

namespace detail {

inline double column_dot(const Matrix& a, std::size_t ca, const Matrix& b, std::size_t cb) {
  double s = 0.0;
  for (std::size_t r = 0; r < a.rows; ++r) s += a(r, ca) * b(r, cb);
  return s;
}

inline double column_cosine(const Matrix& a, std::size_t ca, const Matrix& b, std::size_t cb) {
  const double na = std::sqrt(column_dot(a, ca, a, ca));
  const double nb = std::sqrt(column_dot(b, cb, b, cb));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return column_dot(a, ca, b, cb) / (na * nb);
}

}  // namespace detail

/// Pairwise cosine similarity of the columns of a W x C segment. Columns
/// with zero norm get an all-zero row and column, diagonal included.
inline Matrix cosine_matrix(const Matrix& segment) {
  const std::size_t ch = segment.cols;
  std::vector<double> norms(ch);
  for (std::size_t c = 0; c < ch; ++c) norms[c] = std::sqrt(detail::column_dot(segment, c, segment, c));
  Matrix out(ch, ch);
  for (std::size_t i = 0; i < ch; ++i)
    for (std::size_t j = i; j < ch; ++j) {
      double v = 0.0;
      if (norms[i] > 0.0 && norms[j] > 0.0) v = detail::column_dot(segment, i, segment, j) / (norms[i] * norms[j]);
      out(i, j) = out(j, i) = v;
    }
  return out;
}

struct CoarsePrior {
  Matrix a_coarse;  // C x C
};

/// Mean of the per-segment cosine matrices.
inline CoarsePrior coarse_prior(const std::vector<const Matrix*>& segments) {
  if (segments.empty()) throw std::invalid_argument("coarse_prior: no segments");
  const std::size_t ch = segments.front()->cols;
  Matrix acc(ch, ch);
  for (const Matrix* s : segments) {
    if (s->cols != ch) throw ShapeError("coarse_prior: channel count differs between segments");
    as_eigen(acc) += as_eigen(cosine_matrix(*s));
  }
  as_eigen(acc) /= static_cast<double>(segments.size());
  return {std::move(acc)};
}

inline CoarsePrior coarse_prior(const SegmentSeries& series) {
  std::vector<const Matrix*> ptrs;
  for (const auto& s : series.segments) ptrs.push_back(&s);
  return coarse_prior(ptrs);
}

/// Keeps entries >= theta1, zeroes the rest.
inline Matrix threshold_filter(const Matrix& a_fine, double theta1) {
  Matrix out = a_fine;
  for (double& v : out.data)
    if (!(v >= theta1)) v = 0.0;
  return out;
}

struct FineGraph {
  Matrix sigma;
  Matrix noise;
  Matrix a_fine;
  Matrix a_t;
  double theta1 = 0.5;
};

enum class GraphMode { train, eval };

/// SoftPlus(two-layer feedforward) over the concatenated contextual codes
/// of a channel pair.
struct SigmaNetwork {
  Mlp2 mlp;
  static constexpr std::size_t kHidden = 64;

  SigmaNetwork() = default;
  SigmaNetwork(std::size_t code_width, Rng& rng) : mlp(2 * code_width, kHidden, 1, rng) {}

  void collect(ParamList& p, const std::string& prefix) const { mlp.collect(p, prefix); }
};

/// Differentiable fine graphs for a batch of B segments. `c_tau` rows are
/// b*C + i; `prior_rows` stacks each segment's coarse prior the same way.
/// Outputs keep the [(B*C) x C] layout.
struct FineGraphBatch {
  ag::Var sigma;
  ag::Var a_fine;
  ag::Var a_t;
  Matrix noise;
};

inline FineGraphBatch sample_fine_graph_batch(const ag::Var& c_tau, std::size_t channels, const Matrix& prior_rows,
                                              double theta1, GraphMode mode, Rng& rng, const SigmaNetwork& net) {
  if (c_tau->rows() % channels != 0) throw ShapeError("sample_fine_graph: code rows not a multiple of C");
  if (prior_rows.rows != c_tau->rows() || prior_rows.cols != channels)
    throw ShapeError("sample_fine_graph: prior rows must be [(B*C) x C]");
  if (!(theta1 >= 0.0 && theta1 <= 1.0)) throw std::invalid_argument("sample_fine_graph: theta1 must lie in [0, 1]");
  const std::size_t blocks = c_tau->rows() / channels;
  std::vector<std::size_t> left, right;
  left.reserve(blocks * channels * channels);
  right.reserve(blocks * channels * channels);
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < channels; ++i)
      for (std::size_t j = 0; j < channels; ++j) {
        left.push_back(b * channels + i);
        right.push_back(b * channels + j);
      }
  ag::Var pairs = ag::concat_cols({ag::gather_rows(c_tau, std::move(left)), ag::gather_rows(c_tau, std::move(right))});
  ag::Var sigma = ag::reshape(ag::softplus(net.mlp(pairs)), blocks * channels, channels);
  for (std::size_t r = 0; r < sigma->rows(); ++r)
    for (std::size_t j = 0; j < channels; ++j)
      if (!std::isfinite(sigma->value(r, j)))
        throw std::runtime_error("sample_fine_graph: non-finite sigma for pair (" + std::to_string(r % channels) + ", " +
                                 std::to_string(j) + ") of segment " + std::to_string(r / channels));
  Matrix noise(sigma->rows(), channels);
  if (mode == GraphMode::train)
    for (double& v : noise.data) v = rng.normal();
  ag::Var a_fine = ag::add(ag::constant(prior_rows), ag::mul(sigma, ag::constant(noise)));
  Matrix mask(a_fine->rows(), channels);
  for (std::size_t k = 0; k < mask.size(); ++k) {
    mask.data[k] = a_fine->value.data[k] >= theta1 ? 1.0 : 0.0;
    ag::record_branch(mask.data[k] != 0.0);
  }
  ag::Var a_t = ag::mul(a_fine, ag::constant(std::move(mask)));
  return {sigma, a_fine, a_t, std::move(noise)};
}

/// Single-segment convenience wrapper over sample_fine_graph_batch.
inline FineGraph sample_fine_graph(const Matrix& c_self_at_tau, const CoarsePrior& prior, double theta1, GraphMode mode,
                                   Rng& rng, const SigmaNetwork& net) {
  auto batch = sample_fine_graph_batch(ag::constant(c_self_at_tau), prior.a_coarse.rows, prior.a_coarse, theta1, mode, rng, net);
  return {batch.sigma->value, batch.noise, batch.a_fine->value, batch.a_t->value, theta1};
}

/// B(k2-1, j) = cosine(s_t[:, i], s_{t+k2}[:, j]) for k2 = 1..K2.
inline Matrix delayed_correlation_matrix(const std::vector<Matrix>& segments, std::size_t t, std::size_t channel,
                                         std::size_t k2_max) {
  if (segments.empty() || t + k2_max > segments.size() - 1)
    throw std::out_of_range("delayed_correlation_matrix: t + K2 must be <= |S| - 1 (t=" + std::to_string(t) +
                            ", K2=" + std::to_string(k2_max) + ", |S|=" + std::to_string(segments.size()) + ")");
  const std::size_t ch = segments[t].cols;
  if (channel >= ch) throw std::out_of_range("delayed_correlation_matrix: channel out of range");
  Matrix out(k2_max, ch);
  for (std::size_t k = 1; k <= k2_max; ++k)
    for (std::size_t j = 0; j < ch; ++j) out(k - 1, j) = detail::column_cosine(segments[t], channel, segments[t + k], j);
  return out;
}

inline Matrix delayed_correlation_matrix(const SegmentSeries& s, std::size_t t, std::size_t channel, std::size_t k2_max) {
  return delayed_correlation_matrix(s.segments, t, channel, k2_max);
}

struct ShiftReport {
  Matrix mean_a;
  Matrix mean_b;
  Matrix difference;  // mean_a - mean_b
};

inline ShiftReport correlation_shift_report(const SegmentSeries& a, const SegmentSeries& b) {
  if (a.segments.empty() || b.segments.empty()) throw std::invalid_argument("correlation_shift_report: empty series");
  if (a.segments.front().cols != b.segments.front().cols)
    throw ShapeError("correlation_shift_report: channel counts differ");
  ShiftReport r{coarse_prior(a).a_coarse, coarse_prior(b).a_coarse, {}};
  r.difference = r.mean_a;
  as_eigen(r.difference) -= as_eigen(r.mean_b);
  return r;
}

inline double max_abs(const Matrix& m) {
  double v = 0.0;
  for (double x : m.data) v = std::max(v, std::abs(x));
  return v;
}

// ---- CSV export -----------------------------------------------------------

inline std::string format_number(double v) {
  // Shortest text that parses back to the same double.
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Header row of channel names, then one row of cells per matrix row.
inline std::string matrix_csv(const Matrix& m, const std::vector<std::string>& channel_names) {
  if (channel_names.size() != m.cols) throw ShapeError("matrix_csv: one header name per column required");
  std::ostringstream out;
  for (std::size_t c = 0; c < m.cols; ++c) out << (c ? "," : "") << channel_names[c];
  out << "\n";
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) out << (c ? "," : "") << format_number(m(r, c));
    out << "\n";
  }
  return out.str();
}

/// Off-diagonal nonzero entries of a thresholded adjacency as (i, j, weight).
inline std::string edge_list_csv(const Matrix& a_t, const std::vector<std::string>& channel_names) {
  std::ostringstream out;
  out << "i,j,weight\n";
  for (std::size_t i = 0; i < a_t.rows; ++i)
    for (std::size_t j = 0; j < a_t.cols; ++j)
      if (i != j && a_t(i, j) != 0.0) out << channel_names[i] << "," << channel_names[j] << "," << format_number(a_t(i, j)) << "\n";
  return out.str();
}

}  // namespace mbrain
