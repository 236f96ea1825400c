#pragma once

// Numerical checks of the multi-channel InfoNCE bound on Gaussian data with
// known mutual information.
//
// Data model per sample: contexts c_i ~ N(0, 1) iid over channels,
// s_i = sum_{j != i} c_j / sqrt(n - 1), and
//   x_i = rho_t * c_i + rho_x * s_i + sqrt(1 - rho_t^2 - rho_x^2) * eps_i.
// Then I(x_i; c_i) = -0.5 ln(1 - rho_t^2) and
// I(x_i; c_i, s_i) = -0.5 ln(1 - rho_t^2 - rho_x^2).

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbrain/autograd.hpp"
#include "mbrain/optim.hpp"
#include "mbrain/rng.hpp"

namespace mbrain {

inline double analytic_gaussian_mi(double rho) {
  if (!(std::abs(rho) < 1.0)) throw std::invalid_argument("analytic_gaussian_mi: |rho| must be < 1");
  return -0.5 * std::log1p(-rho * rho);
}

struct GaussianChannelSpec {
  std::size_t n_channels = 2;
  std::vector<double> rho_temporal{0.5, 0.5};  // per channel
  double rho_cross = 0.0;
  std::size_t samples_per_batch = 128;
};

inline void validate(const GaussianChannelSpec& s) {
  if (s.n_channels == 0) throw std::invalid_argument("GaussianChannelSpec: n_channels must be >= 1");
  if (s.rho_temporal.size() != s.n_channels) throw std::invalid_argument("GaussianChannelSpec: one rho per channel required");
  if (s.n_channels == 1 && s.rho_cross != 0.0) throw std::invalid_argument("GaussianChannelSpec: rho_cross needs >= 2 channels");
  for (double r : s.rho_temporal)
    if (!(r * r + s.rho_cross * s.rho_cross < 1.0))
      throw std::invalid_argument("GaussianChannelSpec: rho_t^2 + rho_cross^2 must be < 1 for a positive definite covariance");
  if (s.samples_per_batch < 2) throw std::invalid_argument("GaussianChannelSpec: samples_per_batch must be >= 2");
}

inline GaussianChannelSpec uniform_spec(std::size_t n, double rho_t, double rho_x, std::size_t batch = 128) {
  return {n, std::vector<double>(n, rho_t), rho_x, batch};
}

enum class Aggregation { self_only, with_neighbors };

inline double true_mi(const GaussianChannelSpec& s, std::size_t i, Aggregation agg) {
  const double rt = s.rho_temporal[i];
  if (agg == Aggregation::self_only) return analytic_gaussian_mi(rt);
  return -0.5 * std::log1p(-(rt * rt + s.rho_cross * s.rho_cross));
}

struct GaussianBatch {
  Matrix c, s, x;  // M x n
};

inline GaussianBatch sample_gaussian(const GaussianChannelSpec& spec, std::size_t m, Rng& rng) {
  const std::size_t n = spec.n_channels;
  GaussianBatch b{Matrix(m, n), Matrix(m, n), Matrix(m, n)};
  for (double& v : b.c.data) v = rng.normal();
  for (std::size_t r = 0; r < m; ++r) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += b.c(r, i);
    for (std::size_t i = 0; i < n; ++i) {
      b.s(r, i) = n > 1 ? (total - b.c(r, i)) / std::sqrt(static_cast<double>(n - 1)) : 0.0;
      const double rt = spec.rho_temporal[i], rx = spec.rho_cross;
      b.x(r, i) = rt * b.c(r, i) + rx * b.s(r, i) + std::sqrt(1.0 - rt * rt - rx * rx) * rng.normal();
    }
  }
  return b;
}

namespace detail {

/// u(c) = (c_i, [s_i,] 1), rows m*n + i.
inline Matrix context_features(const GaussianBatch& b, Aggregation agg) {
  const std::size_t m = b.c.rows, n = b.c.cols, w = agg == Aggregation::self_only ? 2 : 3;
  Matrix u(m * n, w);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = r * n + i;
      u(row, 0) = b.c(r, i);
      if (w == 3) u(row, 1) = b.s(r, i);
      u(row, w - 1) = 1.0;
    }
  return u;
}

/// v(x) = (x, x^2), rows m*n + i.
inline Matrix future_features(const GaussianBatch& b) {
  Matrix v(b.x.size(), 2);
  for (std::size_t k = 0; k < b.x.size(); ++k) {
    v(k, 0) = b.x.data[k];
    v(k, 1) = b.x.data[k] * b.x.data[k];
  }
  return v;
}

/// Candidate rows per anchor (m, i): the positive first, then N-1 distinct
/// futures from other samples of the batch. `same_channel` restricts the
/// negatives to channel i (single-channel CPC); otherwise they come from
/// every channel's futures. Futures of the anchor's own sample are excluded
/// because they are correlated with its context when rho_cross != 0.
inline std::vector<std::size_t> candidates(std::size_t m, std::size_t n, std::size_t big_n, bool same_channel, Rng& rng) {
  const std::size_t per_sample = same_channel ? 1 : n;
  const std::size_t pool = (m - 1) * per_sample, k = big_n - 1;
  if (k > pool) throw std::invalid_argument("theory: batch too small for N (pool " + std::to_string(pool) + ")");
  std::vector<std::size_t> idx;
  idx.reserve(m * n * big_n);
  std::vector<std::size_t> picked;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t i = 0; i < n; ++i) {
      idx.push_back(r * n + i);
      picked.clear();
      for (std::size_t j = pool - k; j < pool; ++j) {
        const std::size_t t = rng.index(j + 1);
        picked.push_back(std::find(picked.begin(), picked.end(), t) != picked.end() ? j : t);
      }
      for (std::size_t s : picked) {
        std::size_t other = s / per_sample;
        if (other >= r) ++other;
        const std::size_t ch = same_channel ? i : s % n;
        idx.push_back(other * n + ch);
      }
    }
  return idx;
}

/// Per-sample loss summed over channels.
inline std::vector<double> per_sample_losses(const Matrix& w, const Matrix& u, const Matrix& v, const std::vector<std::size_t>& idx,
                                             std::size_t n, std::size_t big_n) {
  const std::size_t rows = u.rows;
  Matrix p(rows, 2);
  as_eigen(p).noalias() = as_eigen(u) * as_eigen(w);
  std::vector<double> out(rows / n, 0.0);
  std::vector<double> logits(big_n);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < big_n; ++c) {
      const std::size_t j = idx[r * big_n + c];
      logits[c] = p(r, 0) * v(j, 0) + p(r, 1) * v(j, 1);
      mx = std::max(mx, logits[c]);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    out[r / n] += mx + std::log(z) - logits[0];
  }
  return out;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double standard_error(const std::vector<double>& v) {
  const double mu = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace detail

struct CriticSettings {
  std::size_t negatives = 64;  // N
  std::size_t train_steps = 400;
  std::size_t eval_batches = 16;
  double learning_rate = 0.05;
};

/// Trained bilinear critic weights for one aggregation mode.
inline Matrix train_critic(const GaussianChannelSpec& spec, Aggregation agg, bool same_channel, const CriticSettings& cs,
                           Rng& rng) {
  validate(spec);
  if (cs.negatives < 2) throw std::invalid_argument("critic: N must be >= 2");
  ag::Var w = ag::parameter(Matrix(agg == Aggregation::self_only ? 2 : 3, 2));
  Adam opt;
  opt.add_group({w}, AdamSettings{cs.learning_rate, 0.0});
  const std::size_t n = spec.n_channels, m = spec.samples_per_batch;
  for (std::size_t step = 0; step < cs.train_steps; ++step) {
    // linear decay to a tenth of the base rate
    opt.set_learning_rate(cs.learning_rate * (1.0 - 0.9 * static_cast<double>(step) / static_cast<double>(cs.train_steps)));
    const GaussianBatch b = sample_gaussian(spec, m, rng);
    auto idx = detail::candidates(m, n, cs.negatives, same_channel, rng);
    ag::Var p = ag::matmul(ag::constant(detail::context_features(b, agg)), w);
    ag::Var loss = ag::cross_entropy(ag::gather_dot(p, ag::constant(detail::future_features(b)), std::move(idx), cs.negatives),
                                     std::vector<std::size_t>(m * n, 0));
    opt.zero_grad();
    ag::backward(loss);
    opt.step();
  }
  return w->value;
}

struct BoundReport {
  std::vector<double> per_channel_true_mi;
  double estimated_loss = 0.0;  // mean over samples of the loss summed over channels
  double bound_rhs = 0.0;       // sum_i (-MI_i + ln N)
  bool satisfied = false;       // estimated_loss >= bound_rhs - 3 * stderr
  double monte_carlo_stderr = 0.0;
  double mi_estimate = 0.0;  // n ln N - estimated_loss
  std::size_t negatives = 0;
  bool diverged = false;  // loss above n (ln N + 1)
};

inline nlohmann::json to_json(const BoundReport& r) {
  return {{"per_channel_true_mi", r.per_channel_true_mi}, {"estimated_loss", r.estimated_loss}, {"bound_rhs", r.bound_rhs},
          {"satisfied", r.satisfied}, {"monte_carlo_stderr", r.monte_carlo_stderr}, {"mi_estimate", r.mi_estimate},
          {"negatives", r.negatives}, {"diverged", r.diverged}};
}

namespace detail {

struct EvalSet {
  std::vector<Matrix> u_self, u_with, v;
  std::vector<std::vector<std::size_t>> idx;
};

inline EvalSet eval_set(const GaussianChannelSpec& spec, bool same_channel, const CriticSettings& cs, Rng& rng) {
  EvalSet e;
  for (std::size_t k = 0; k < cs.eval_batches; ++k) {
    const GaussianBatch b = sample_gaussian(spec, spec.samples_per_batch, rng);
    e.u_self.push_back(context_features(b, Aggregation::self_only));
    e.u_with.push_back(context_features(b, Aggregation::with_neighbors));
    e.v.push_back(future_features(b));
    e.idx.push_back(candidates(spec.samples_per_batch, spec.n_channels, cs.negatives, same_channel, rng));
  }
  return e;
}

inline std::vector<double> eval_losses(const EvalSet& e, const Matrix& w, Aggregation agg, std::size_t n, std::size_t big_n) {
  std::vector<double> all;
  for (std::size_t k = 0; k < e.v.size(); ++k) {
    const Matrix& u = agg == Aggregation::self_only ? e.u_self[k] : e.u_with[k];
    auto l = per_sample_losses(w, u, e.v[k], e.idx[k], n, big_n);
    all.insert(all.end(), l.begin(), l.end());
  }
  return all;
}

inline BoundReport make_report(const GaussianChannelSpec& spec, Aggregation agg, const std::vector<double>& losses,
                               std::size_t big_n) {
  BoundReport r;
  const double ln_n = std::log(static_cast<double>(big_n));
  const double n = static_cast<double>(spec.n_channels);
  for (std::size_t i = 0; i < spec.n_channels; ++i) {
    r.per_channel_true_mi.push_back(true_mi(spec, i, agg));
    r.bound_rhs += -r.per_channel_true_mi.back() + ln_n;
  }
  r.estimated_loss = mean(losses);
  r.monte_carlo_stderr = standard_error(losses);
  r.satisfied = r.estimated_loss >= r.bound_rhs - 3.0 * r.monte_carlo_stderr;
  r.mi_estimate = n * ln_n - r.estimated_loss;
  r.negatives = big_n;
  r.diverged = r.estimated_loss > n * (ln_n + 1.0);
  return r;
}

}  // namespace detail

/// Per-channel CPC with self context and same-channel negatives, one shared
/// critic. Losses are summed over channels.
inline BoundReport single_channel_cpc_bound(const GaussianChannelSpec& spec, std::size_t big_n, std::size_t train_steps, Rng& rng,
                                            CriticSettings cs = {}) {
  cs.negatives = big_n;
  cs.train_steps = train_steps;
  const Matrix w = train_critic(spec, Aggregation::self_only, true, cs, rng);
  const auto e = detail::eval_set(spec, true, cs, rng);
  return detail::make_report(spec, Aggregation::self_only,
                             detail::eval_losses(e, w, Aggregation::self_only, spec.n_channels, big_n), big_n);
}

/// One aggregation mode with negatives drawn from every channel's futures.
inline BoundReport cpc_bound(const GaussianChannelSpec& spec, Aggregation agg, std::size_t big_n, std::size_t train_steps,
                             Rng& rng, CriticSettings cs = {}) {
  cs.negatives = big_n;
  cs.train_steps = train_steps;
  const Matrix w = train_critic(spec, agg, false, cs, rng);
  const auto e = detail::eval_set(spec, false, cs, rng);
  return detail::make_report(spec, agg, detail::eval_losses(e, w, agg, spec.n_channels, big_n), big_n);
}

struct AggregationComparison {
  BoundReport self_only;
  BoundReport with_neighbors;
  double mi_gain = 0.0;         // estimate(with) - estimate(self)
  double mi_gain_stderr = 0.0;  // paired over the shared evaluation samples
  bool not_worse = false;       // estimate(with) >= estimate(self) - 3 * stderr
};

inline nlohmann::json to_json(const AggregationComparison& c) {
  return {{"self_only", to_json(c.self_only)}, {"with_neighbors", to_json(c.with_neighbors)}, {"mi_gain", c.mi_gain},
          {"mi_gain_stderr", c.mi_gain_stderr}, {"not_worse", c.not_worse}};
}

/// Trains both aggregation modes on the same data stream and scores them on
/// one shared evaluation set with negatives from every channel.
inline AggregationComparison multi_channel_cpc_bound(const GaussianChannelSpec& spec, std::size_t big_n, std::size_t train_steps,
                                                     Rng& rng, CriticSettings cs = {}) {
  cs.negatives = big_n;
  cs.train_steps = train_steps;
  const std::uint64_t train_seed = rng.next_u64();
  Rng r_self(train_seed), r_with(train_seed);
  const Matrix w_self = train_critic(spec, Aggregation::self_only, false, cs, r_self);
  const Matrix w_with = train_critic(spec, Aggregation::with_neighbors, false, cs, r_with);
  const auto e = detail::eval_set(spec, false, cs, rng);
  const auto l_self = detail::eval_losses(e, w_self, Aggregation::self_only, spec.n_channels, big_n);
  const auto l_with = detail::eval_losses(e, w_with, Aggregation::with_neighbors, spec.n_channels, big_n);
  AggregationComparison out;
  out.self_only = detail::make_report(spec, Aggregation::self_only, l_self, big_n);
  out.with_neighbors = detail::make_report(spec, Aggregation::with_neighbors, l_with, big_n);
  std::vector<double> diff(l_self.size());
  for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = l_self[k] - l_with[k];
  out.mi_gain = detail::mean(diff);
  out.mi_gain_stderr = detail::standard_error(diff);
  out.not_worse = out.mi_gain >= -3.0 * out.mi_gain_stderr;
  return out;
}

struct JensenGap {
  double lhs = 0.0;  // product
  double rhs = 0.0;  // arithmetic mean to the n-th power
  double gap = 0.0;  // rhs - lhs
};

inline JensenGap jensen_gap(const std::vector<double>& p) {
  if (p.empty()) throw std::invalid_argument("jensen_gap: empty input");
  double prod = 1.0, sum = 0.0;
  for (double v : p) {
    if (!(v > 0.0)) throw std::invalid_argument("jensen_gap: inputs must be positive");
    prod *= v;
    sum += v;
  }
  const double mean = sum / static_cast<double>(p.size());
  double power = 1.0;
  for (std::size_t k = 0; k < p.size(); ++k) power *= mean;
  return {prod, power, power - prod};
}

// ---- verification suite ---------------------------------------------------

struct TheorySuiteSettings {
  CriticSettings critic;
  std::size_t samples_per_batch = 128;
  std::size_t seeds = 20;
  std::vector<std::size_t> channel_counts{2, 4};
  std::vector<double> rhos{0.0, 0.5, 0.9};
  double rho_cross = 0.3;         // cross-channel term of the bound specs
  double strong_cross = 0.8;      // spec where neighbors must help
  double min_gain = 0.05;         // nats, after the 3-stderr guard
};

struct BoundCase {
  std::size_t n_channels = 0;
  double rho = 0.0;
  std::size_t runs = 0, satisfied = 0;
  double worst_margin = 0.0;  // min over runs of L - rhs + 3 stderr
};

struct TheorySuite {
  std::vector<BoundCase> bound_cases;
  AggregationComparison strong;  // rho_cross = strong_cross
  AggregationComparison none;    // rho_cross = 0
  bool bound_ok = false, gain_ok = false, agree_ok = false;
};

/// Bound check over every (n, rho) spec and seed, then the two aggregation
/// comparisons. Each run has its own stream mix_seed(seed, case id).
inline TheorySuite verify_theory(const TheorySuiteSettings& st, std::uint64_t seed) {
  TheorySuite out;
  out.bound_ok = true;
  for (std::size_t n : st.channel_counts)
    for (std::size_t r = 0; r < st.rhos.size(); ++r) {
      BoundCase c{n, st.rhos[r], st.seeds, 0, std::numeric_limits<double>::infinity()};
      const auto spec = uniform_spec(n, st.rhos[r], st.rho_cross, st.samples_per_batch);
      for (std::size_t k = 0; k < st.seeds; ++k) {
        Rng rng(mix_seed(seed, n * 1'000'000 + r * 1'000 + k));
        const auto rep = cpc_bound(spec, Aggregation::with_neighbors, st.critic.negatives, st.critic.train_steps, rng, st.critic);
        c.satisfied += rep.satisfied ? 1 : 0;
        c.worst_margin = std::min(c.worst_margin, rep.estimated_loss - rep.bound_rhs + 3.0 * rep.monte_carlo_stderr);
      }
      out.bound_ok = out.bound_ok && c.satisfied == c.runs;
      out.bound_cases.push_back(c);
    }
  Rng strong_rng(mix_seed(seed, 0xC0FFEE));
  out.strong = multi_channel_cpc_bound(uniform_spec(2, 0.5, st.strong_cross, st.samples_per_batch), st.critic.negatives,
                                       st.critic.train_steps, strong_rng, st.critic);
  Rng none_rng(mix_seed(seed, 0xC0FFEF));
  out.none = multi_channel_cpc_bound(uniform_spec(2, 0.5, 0.0, st.samples_per_batch), st.critic.negatives,
                                     st.critic.train_steps, none_rng, st.critic);
  out.gain_ok = out.strong.mi_gain - 3.0 * out.strong.mi_gain_stderr > st.min_gain;
  out.agree_ok = std::abs(out.none.mi_gain) <= 3.0 * out.none.mi_gain_stderr;
  return out;
}

inline nlohmann::json to_json(const TheorySuite& t) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : t.bound_cases)
    cases.push_back({{"n_channels", c.n_channels}, {"rho", c.rho}, {"runs", c.runs}, {"satisfied", c.satisfied},
                     {"worst_margin", c.worst_margin}});
  return {{"bound_cases", cases}, {"bound_ok", t.bound_ok}, {"strong_cross", to_json(t.strong)},
          {"no_cross", to_json(t.none)}, {"gain_ok", t.gain_ok}, {"agree_ok", t.agree_ok}};
}

}  // namespace mbrain
