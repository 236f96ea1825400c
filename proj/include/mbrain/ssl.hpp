#pragma once

// Self-supervised pretraining: instantaneous time shift (multi-channel
// InfoNCE), delayed time shift (pairwise correlation classification) and
// replace discrimination, plus the joint training loop.

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbrain/autograd.hpp"
#include "mbrain/graph.hpp"
#include "mbrain/neural.hpp"
#include "mbrain/optim.hpp"
#include "mbrain/rng.hpp"
#include "mbrain/signal.hpp"
#include "mbrain/synthetic.hpp"

namespace mbrain {

struct SslConfig {
  double theta1 = 0.5;
  double theta2 = 0.5;
  std::size_t k2 = 7;
  std::size_t k1_max = 8;
  std::size_t negatives = 64;  // N: one positive plus N-1 negatives
  double replace_percent = 15.0;
  double lambda1 = 0.5;
  double lambda2 = 0.3;
  bool reweight_classes = false;
};

inline void validate_lambdas(double lambda1, double lambda2) {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0))
    throw ConfigError("lambda1 and lambda2 must be >= 0 (got " + format_number(lambda1) + ", " + format_number(lambda2) + ")");
  // The sum may reach 1 (L1 weight 0): the 0.1..0.5 search grid includes (0.5, 0.5).
  if (!(lambda1 + lambda2 <= 1.0))
    throw ConfigError("lambda1=" + format_number(lambda1) + ", lambda2=" + format_number(lambda2) + " violate λ1+λ2<1 (sum may be at most 1)");
}

/// `steps` is the encoded length T.
inline void validate(const SslConfig& c, std::size_t steps) {
  validate_lambdas(c.lambda1, c.lambda2);
  if (!(c.theta1 >= 0.0 && c.theta1 <= 1.0)) throw ConfigError("theta1 must lie in [0, 1]");
  if (!(c.theta2 >= -1.0 && c.theta2 <= 1.0)) throw ConfigError("theta2 must lie in [-1, 1]");
  if (c.k2 == 0) throw ConfigError("K2 must be >= 1");
  if (c.k1_max == 0) throw ConfigError("k1_max must be >= 1");
  if (c.negatives < 2) throw ConfigError("negatives (N) must be >= 2 for training");
  if (!(c.replace_percent > 0.0 && c.replace_percent < 100.0)) throw ConfigError("replace_percent must lie in (0, 100)");
  if (c.k2 + c.k1_max + 1 > steps)
    throw ConfigError("K2 + k1_max + 1 <= T violated: " + std::to_string(c.k2) + " + " + std::to_string(c.k1_max) +
                      " + 1 > " + std::to_string(steps));
}

// ---- loss bookkeeping ------------------------------------------------------

struct LossReport {
  std::size_t step = 0;
  std::uint64_t seed = 0;
  std::optional<double> l1, l2, l3;
  double joint = 0.0;
  double lambda1 = 0.5;
  double lambda2 = 0.3;
};

inline LossReport joint_loss(double l1, double l2, double l3, double lambda1, double lambda2) {
  validate_lambdas(lambda1, lambda2);
  LossReport r;
  r.l1 = l1;
  r.l2 = l2;
  r.l3 = l3;
  r.lambda1 = lambda1;
  r.lambda2 = lambda2;
  r.joint = (1.0 - lambda1 - lambda2) * l1 + lambda1 * l2 + lambda2 * l3;
  return r;
}

inline nlohmann::json to_json(const LossReport& r) {
  nlohmann::json j;
  j["step"] = r.step;
  if (r.l1) j["L1"] = *r.l1;
  if (r.l2) j["L2"] = *r.l2;
  if (r.l3) j["L3"] = *r.l3;
  j["L_joint"] = r.joint;
  j["lambda1"] = r.lambda1;
  j["lambda2"] = r.lambda2;
  j["seed"] = r.seed;
  return j;
}

/// Which tasks contribute. Weights follow the joint objective with the
/// disabled terms dropped; a single surviving task gets weight 1.
struct TaskSwitches {
  bool instant = true;
  bool delayed = true;
  bool replace = true;

  std::size_t count() const { return std::size_t{instant} + delayed + replace; }
};

struct LossWeights {
  double instant = 0.0, delayed = 0.0, replace = 0.0;
};

inline LossWeights loss_weights(const SslConfig& c, const TaskSwitches& t) {
  if (t.count() == 0) throw ConfigError("at least one self-supervised task must be enabled");
  if (t.count() == 1) return {t.instant ? 1.0 : 0.0, t.delayed ? 1.0 : 0.0, t.replace ? 1.0 : 0.0};
  return {t.instant ? 1.0 - c.lambda1 - c.lambda2 : 0.0, t.delayed ? c.lambda1 : 0.0, t.replace ? c.lambda2 : 0.0};
}

// ---- negatives -------------------------------------------------------------

struct NegativeSampleSpec {
  std::size_t n = 64;  // total candidates per contrast, positive included
};

/// Every (segment, time, channel) code slot of a batch; slot ids match the
/// row layout of z: (b*C + i)*T + t.
struct SlotPool {
  std::size_t segments = 0, channels = 0, steps = 0;

  std::size_t size() const { return segments * channels * steps; }
  std::size_t slot(std::size_t b, std::size_t t, std::size_t i) const { return (b * channels + i) * steps + t; }
  std::size_t channel_of(std::size_t slot) const { return (slot / steps) % channels; }
};

/// Positive first, then N-1 distinct slots drawn uniformly from the rest of
/// the pool (Floyd's subset sampling).
inline std::vector<std::size_t> sample_negatives(const SlotPool& pool, std::size_t positive, const NegativeSampleSpec& spec,
                                                 Rng& rng) {
  if (spec.n == 0) throw std::invalid_argument("sample_negatives: N must be >= 1");
  if (positive >= pool.size()) throw std::out_of_range("sample_negatives: positive slot outside the pool");
  const std::size_t others = pool.size() - 1, k = spec.n - 1;
  if (k > others)
    throw std::invalid_argument("sample_negatives: pool has " + std::to_string(others) + " candidates but N-1 = " +
                                std::to_string(k) + "; use a larger batch or a smaller N");
  std::vector<std::size_t> out;
  out.reserve(spec.n);
  out.push_back(positive);
  for (std::size_t j = others - k; j < others; ++j) {
    const std::size_t t = rng.index(j + 1);
    const bool seen = std::find(out.begin() + 1, out.end(), t) != out.end();
    out.push_back(seen ? j : t);
  }
  for (std::size_t m = 1; m < out.size(); ++m)
    if (out[m] >= positive) ++out[m];
  return out;
}

// ---- instantaneous time shift ----------------------------------------------

/// Mean InfoNCE over segments, channels and k1 = 1..K for context position
/// `tau` (1-based). `c_other` has the layout of c_self[tau-1].
inline ag::Var instantaneous_loss(const MBrainModel& model, const ag::Var& z, const std::vector<ag::Var>& c_self,
                                  std::size_t n_segments, std::size_t tau, const ag::Var& c_other,
                                  const NegativeSampleSpec& spec, Rng& rng) {
  const std::size_t ch = model.config().channels, t_len = model.steps(), k_max = model.config().k1_max;
  if (tau == 0 || tau + k_max > t_len)
    throw std::out_of_range("instantaneous_loss: tau + k1_max must be <= T (tau=" + std::to_string(tau) + ")");
  const SlotPool pool{n_segments, ch, t_len};
  const ag::Var context = ag::concat_cols({c_self[tau - 1], c_other});
  const std::size_t rows = n_segments * ch;
  std::vector<ag::Var> terms;
  for (std::size_t k = 1; k <= k_max; ++k) {
    std::vector<std::size_t> idx;
    idx.reserve(rows * spec.n);
    for (std::size_t b = 0; b < n_segments; ++b)
      for (std::size_t i = 0; i < ch; ++i) {
        auto cand = sample_negatives(pool, pool.slot(b, tau - 1 + k, i), spec, rng);
        idx.insert(idx.end(), cand.begin(), cand.end());
      }
    ag::Var logits = ag::gather_dot(ag::matmul(context, model.bilinear(k)), z, std::move(idx), spec.n);
    for (std::size_t r = 0; r < logits->rows(); ++r)
      for (std::size_t c = 0; c < logits->cols(); ++c)
        if (!std::isfinite(logits->value(r, c)))
          throw std::runtime_error("instantaneous_loss: non-finite logit at k1=" + std::to_string(k) + ", segment " +
                                   std::to_string(r / ch) + ", channel " + std::to_string(r % ch) + ", candidate " +
                                   std::to_string(c));
    terms.push_back(ag::cross_entropy(logits, std::vector<std::size_t>(rows, 0)));
  }
  return ag::scale(ag::add_n(terms), 1.0 / static_cast<double>(k_max));
}

// ---- delayed time shift ----------------------------------------------------

struct DelayedAnchor {
  std::size_t segment = 0;  // t, index into the batch
  std::size_t channel = 0;  // i
  Matrix b;                 // K2 x C delayed correlations
  BinaryMatrix labels;      // K2 x C
  BinaryMatrix kept;        // K2 x C, exactly floor(0.5*K2*C) ones
};

struct DelayedLabels {
  std::size_t k2 = 0;
  std::vector<DelayedAnchor> anchors;

  std::size_t kept_count() const {
    std::size_t n = 0;
    for (const auto& a : anchors) n += a.kept.count();
    return n;
  }
};

/// Labels for every anchor t whose next K2 segments belong to the same run.
/// `run_ids` marks contiguous runs of consecutive segments; empty means one run.
inline DelayedLabels delayed_pseudo_labels(const std::vector<Matrix>& segments, const std::vector<std::size_t>& run_ids,
                                           double theta2, std::size_t k2_max, Rng& rng) {
  if (!run_ids.empty() && run_ids.size() != segments.size())
    throw ShapeError("delayed_pseudo_labels: one run id per segment required");
  DelayedLabels out;
  out.k2 = k2_max;
  if (segments.empty()) return out;
  const std::size_t ch = segments.front().cols;
  const std::size_t keep = (k2_max * ch) / 2;
  for (std::size_t t = 0; t + k2_max < segments.size(); ++t) {
    if (!run_ids.empty() && run_ids[t] != run_ids[t + k2_max]) continue;
    for (std::size_t i = 0; i < ch; ++i) {
      DelayedAnchor a{t, i, delayed_correlation_matrix(segments, t, i, k2_max), BinaryMatrix(k2_max, ch),
                      BinaryMatrix(k2_max, ch)};
      for (std::size_t e = 0; e < a.b.size(); ++e) a.labels.data[e] = a.b.data[e] >= theta2 ? 1 : 0;
      for (std::size_t e : rng.sample_without_replacement(k2_max * ch, keep)) a.kept.data[e] = 1;
      out.anchors.push_back(std::move(a));
    }
  }
  return out;
}

inline DelayedLabels delayed_pseudo_labels(const SegmentSeries& s, double theta2, std::size_t k2_max, Rng& rng) {
  return delayed_pseudo_labels(s.segments, {}, theta2, k2_max, rng);
}

/// Two-class cross-entropy over kept pairs of pooled representations
/// h [(B*C) x d_ar]; class 1 is "highly correlated".
inline ag::Var delayed_loss(const Mlp2& head, const ag::Var& h, std::size_t channels, const DelayedLabels& labels,
                            bool reweight = false) {
  std::vector<std::size_t> left, right, targets;
  for (const auto& a : labels.anchors)
    for (std::size_t k = 1; k <= labels.k2; ++k)
      for (std::size_t j = 0; j < channels; ++j) {
        if (!a.kept(k - 1, j)) continue;
        left.push_back(a.segment * channels + a.channel);
        right.push_back((a.segment + k) * channels + j);
        targets.push_back(a.labels(k - 1, j));
      }
  if (targets.empty()) throw std::invalid_argument("delayed_loss: no kept pairs (need K2+1 consecutive segments)");
  for (std::size_t r : right)
    if (r >= h->rows()) throw ShapeError("delayed_loss: label refers to a segment outside h");
  std::vector<double> weights;
  if (reweight) {
    const double pos = static_cast<double>(std::count(targets.begin(), targets.end(), std::size_t{1}));
    const double neg = static_cast<double>(targets.size()) - pos;
    for (std::size_t y : targets) weights.push_back(y ? (pos > 0 ? neg / pos : 1.0) : 1.0);
  }
  ag::Var pairs = ag::concat_cols({ag::gather_rows(h, std::move(left)), ag::gather_rows(h, std::move(right))});
  return ag::cross_entropy(head(pairs), std::move(targets), std::move(weights));
}

// ---- replace discrimination ------------------------------------------------

/// Positions and sources are flattened as tau*C + i.
struct ReplacePlan {
  std::size_t steps = 0, channels = 0;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> sources;
  BinaryMatrix labels;  // T x C
};

inline std::size_t replace_count(std::size_t steps, std::size_t channels, double r_percent) {
  return static_cast<std::size_t>(std::floor(r_percent * static_cast<double>(steps * channels) / 100.0 + 1e-9));
}

/// r_percent = 0 is accepted for tests and yields an empty plan.
inline ReplacePlan plan_replace(std::size_t steps, std::size_t channels, double r_percent, Rng& rng) {
  if (!(r_percent >= 0.0 && r_percent < 100.0)) throw std::invalid_argument("plan_replace: r_percent must lie in [0, 100)");
  ReplacePlan p{steps, channels, {}, {}, BinaryMatrix(steps, channels)};
  const std::size_t slots = steps * channels;
  p.positions = rng.sample_without_replacement(slots, replace_count(steps, channels, r_percent));
  for (std::size_t pos : p.positions) {
    const std::size_t src = rng.index(slots);
    p.sources.push_back(src);
    p.labels.data[pos] = (src % channels) != (pos % channels) ? 1 : 0;
  }
  return p;
}

/// z has rows tau*C + i. Returns the corrupted copy and the plan.
inline std::pair<Matrix, ReplacePlan> corrupt_replace(const Matrix& z, std::size_t steps, std::size_t channels,
                                                       double r_percent, Rng& rng) {
  if (z.rows != steps * channels) throw ShapeError("corrupt_replace: z must have T*C rows");
  ReplacePlan plan = plan_replace(steps, channels, r_percent, rng);
  Matrix out = z;
  for (std::size_t m = 0; m < plan.positions.size(); ++m) {
    auto dst = out.row(plan.positions[m]);
    auto src = z.row(plan.sources[m]);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return {std::move(out), std::move(plan)};
}

/// Binary cross-entropy of the discriminator over every (tau, i) of the
/// re-contextualized corrupted codes. One plan per segment.
inline ag::Var replace_loss(const MBrainModel& model, const ag::Var& z, const std::vector<ReplacePlan>& plans,
                            bool reweight = false) {
  const std::size_t ch = model.config().channels, t_len = model.steps(), n_seg = plans.size();
  if (z->rows() != n_seg * ch * t_len) throw ShapeError("replace_loss: one plan per segment required");
  std::vector<std::size_t> idx(z->rows());
  for (std::size_t r = 0; r < idx.size(); ++r) idx[r] = r;
  for (std::size_t b = 0; b < n_seg; ++b) {
    const auto& p = plans[b];
    for (std::size_t m = 0; m < p.positions.size(); ++m) {
      const std::size_t pt = p.positions[m] / ch, pi = p.positions[m] % ch;
      const std::size_t st = p.sources[m] / ch, si = p.sources[m] % ch;
      idx[(b * ch + pi) * t_len + pt] = (b * ch + si) * t_len + st;
    }
  }
  const ag::Var z_hat = ag::gather_rows(z, std::move(idx));
  const std::vector<ag::Var> c_hat = model.contextualize(z_hat, n_seg * ch);
  std::vector<double> labels;
  labels.reserve(n_seg * ch * t_len);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t b = 0; b < n_seg; ++b)
      for (std::size_t i = 0; i < ch; ++i) labels.push_back(plans[b].labels(t, i));
  std::vector<double> weights;
  if (reweight) {
    double pos = 0.0;
    for (double y : labels) pos += y;
    const double neg = static_cast<double>(labels.size()) - pos;
    for (double y : labels) weights.push_back(y > 0.5 && pos > 0 ? neg / pos : 1.0);
  }
  return ag::bce_with_logits(model.replace_head()(ag::concat_rows(c_hat)), std::move(labels), std::move(weights));
}

// ---- batches and the joint step --------------------------------------------

/// Consecutive segments grouped into runs; each segment carries the coarse
/// prior of its subject.
struct SegmentBatch {
  std::vector<Matrix> segments;
  std::vector<std::size_t> run_ids;
  Matrix prior_rows;  // [(B*C) x C]

  std::size_t size() const { return segments.size(); }

  void push_run(const std::vector<Matrix>& run, std::size_t run_id, const Matrix& prior) {
    for (const auto& s : run) {
      if (s.cols != prior.rows) throw ShapeError("SegmentBatch: prior does not match channel count");
      segments.push_back(s);
      run_ids.push_back(run_id);
      Matrix grown(prior_rows.rows + prior.rows, prior.cols);
      std::copy(prior_rows.data.begin(), prior_rows.data.end(), grown.data.begin());
      std::copy(prior.data.begin(), prior.data.end(), grown.data.begin() + static_cast<std::ptrdiff_t>(prior_rows.data.size()));
      prior_rows = std::move(grown);
    }
  }
};

struct SslStep {
  ag::Var joint;
  std::optional<ag::Var> l1, l2, l3;
  LossReport report;
  std::size_t tau = 0;
  std::optional<FineGraphBatch> graph;
};

/// Sub-stream ids so every task draws from its own generator; switching a
/// task off leaves the other tasks' draws untouched.
enum class SslStream : std::uint64_t { tau = 1, graph = 2, negatives = 3, delayed = 4, replace = 5 };

inline Rng stream_rng(std::uint64_t step_seed, SslStream s) { return Rng(mix_seed(step_seed, static_cast<std::uint64_t>(s))); }

/// Uniform in [K2 + 1, T - k1_max], 1-based.
inline std::size_t draw_tau(const SslConfig& cfg, std::size_t steps, Rng& rng) {
  const std::size_t lo = cfg.k2 + 1, hi = steps - cfg.k1_max;
  if (hi < lo) throw ConfigError("K2 + k1_max + 1 <= T violated");
  return lo + rng.index(hi - lo + 1);
}

/// Neighbor context for the instantaneous task; fills `graph` when a fine
/// graph is sampled.
inline ag::Var other_context(const MBrainModel& model, const ag::Var& c_tau, const Matrix& prior_rows, const SslConfig& cfg,
                             GraphMode mode, Rng& rng, std::optional<FineGraphBatch>& graph) {
  const std::size_t ch = model.config().channels;
  switch (model.config().aggregator) {
    case Aggregator::graph: {
      graph = sample_fine_graph_batch(c_tau, ch, prior_rows, cfg.theta1, mode, rng, model.sigma_network());
      return aggregate_neighbors(c_tau, graph->a_t, model.theta(), ch);
    }
    case Aggregator::mlp:
      return aggregate_mlp(c_tau, model.mlp_aggregator(), ch);
    case Aggregator::none:
      break;
  }
  return ag::constant(Matrix(c_tau->rows(), c_tau->cols()));
}

inline SslStep ssl_forward(const MBrainModel& model, const SegmentBatch& batch, const SslConfig& cfg,
                           const TaskSwitches& tasks, std::uint64_t step_seed, GraphMode mode = GraphMode::train) {
  const std::size_t ch = model.config().channels, t_len = model.steps(), n_seg = batch.size();
  if (batch.prior_rows.rows != n_seg * ch) throw ShapeError("ssl_forward: prior rows do not match the batch");
  const LossWeights w = loss_weights(cfg, tasks);
  SslStep out;
  const ag::Var z = model.encode(batch.segments);
  const std::vector<ag::Var> c_self = model.contextualize(z, n_seg * ch);
  Rng tau_rng = stream_rng(step_seed, SslStream::tau);
  out.tau = draw_tau(cfg, t_len, tau_rng);
  std::vector<ag::Var> weighted;
  if (tasks.instant) {
    Rng graph_rng = stream_rng(step_seed, SslStream::graph);
    Rng neg_rng = stream_rng(step_seed, SslStream::negatives);
    const ag::Var c_other = other_context(model, c_self[out.tau - 1], batch.prior_rows, cfg, mode, graph_rng, out.graph);
    out.l1 = instantaneous_loss(model, z, c_self, n_seg, out.tau, c_other, NegativeSampleSpec{cfg.negatives}, neg_rng);
    weighted.push_back(ag::scale(*out.l1, w.instant));
  }
  if (tasks.delayed) {
    Rng rng = stream_rng(step_seed, SslStream::delayed);
    const DelayedLabels labels = delayed_pseudo_labels(batch.segments, batch.run_ids, cfg.theta2, cfg.k2, rng);
    out.l2 = delayed_loss(model.delayed_head(), model.pool(c_self), ch, labels, cfg.reweight_classes);
    weighted.push_back(ag::scale(*out.l2, w.delayed));
  }
  if (tasks.replace) {
    Rng rng = stream_rng(step_seed, SslStream::replace);
    std::vector<ReplacePlan> plans;
    for (std::size_t b = 0; b < n_seg; ++b) plans.push_back(plan_replace(t_len, ch, cfg.replace_percent, rng));
    out.l3 = replace_loss(model, z, plans, cfg.reweight_classes);
    weighted.push_back(ag::scale(*out.l3, w.replace));
  }
  out.joint = ag::add_n(weighted);
  auto& r = out.report;
  if (out.l1) r.l1 = (*out.l1)->value.data[0];
  if (out.l2) r.l2 = (*out.l2)->value.data[0];
  if (out.l3) r.l3 = (*out.l3)->value.data[0];
  r.lambda1 = cfg.lambda1;
  r.lambda2 = cfg.lambda2;
  r.joint = w.instant * r.l1.value_or(0.0) + w.delayed * r.l2.value_or(0.0) + w.replace * r.l3.value_or(0.0);
  return out;
}

/// Parameters that receive gradient under the given switches. Disabled
/// heads stay frozen.
inline ParamList active_params(const MBrainModel& model, const TaskSwitches& tasks) {
  ParamList p = model.trunk_params();
  if (tasks.instant) {
    if (model.config().aggregator != Aggregator::none) p.append(model.graph_params());
    p.append(model.instant_params());
  }
  if (tasks.delayed) p.append(model.delayed_params());
  if (tasks.replace) p.append(model.replace_params());
  return p;
}

// ---- corpus ----------------------------------------------------------------

/// A clip after per-channel normalization and segmentation.
struct SegmentedClip {
  std::string id;
  std::string subject_id;
  bool positive = false;
  std::vector<Matrix> segments;
  BinaryMatrix labels;  // |S| x C
};

inline SegmentedClip segment_clip(const Clip& clip, const std::string& subject_id, std::size_t window) {
  auto [norm, stats] = normalize_channels(clip.recording);
  SegmentSeries series = segment_recording(norm, window, clip.id);
  return {clip.id, subject_id, clip.positive, std::move(series.segments), std::move(series.segment_labels)};
}

inline std::vector<SegmentedClip> segment_split(const Dataset& ds, Split split, std::size_t window) {
  std::vector<SegmentedClip> out;
  for (const Clip* c : ds.split(split)) out.push_back(segment_clip(*c, ds.subject_id, window));
  return out;
}

/// Self-supervised training material: segmented clips plus one coarse prior
/// per subject.
struct SslCorpus {
  std::vector<SegmentedClip> clips;
  std::vector<std::size_t> prior_of;  // per clip
  std::vector<Matrix> priors;
  std::vector<std::string> subjects;

  void add_subject(const Dataset& ds, Split split, std::size_t window) {
    auto segmented = segment_split(ds, split, window);
    if (segmented.empty()) throw std::invalid_argument("SslCorpus: subject " + ds.subject_id + " has no clips in split");
    std::vector<const Matrix*> all;
    for (const auto& c : segmented)
      for (const auto& s : c.segments) all.push_back(&s);
    priors.push_back(coarse_prior(all).a_coarse);
    subjects.push_back(ds.subject_id);
    for (auto& c : segmented) {
      clips.push_back(std::move(c));
      prior_of.push_back(priors.size() - 1);
    }
  }
};

// ---- training loop ---------------------------------------------------------

struct PretrainConfig {
  SslConfig ssl;
  TaskSwitches tasks;
  AdamSettings adam{2e-4, 1e-6};
  std::size_t clips_per_batch = 2;
  std::size_t run_length = 0;  // consecutive segments taken per clip; 0 = whole clip
  std::size_t max_steps = 0;   // 0 = no cap
  std::uint64_t seed = 0;
};

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Pretrainer {
 public:
  Pretrainer(MBrainModel& model, PretrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    validate(cfg_.ssl, model.steps());
    if (cfg_.ssl.k1_max != model.config().k1_max) throw ConfigError("k1_max differs between model and SSL settings");
    optimizer_.add_group(active_params(model_, cfg_.tasks).vars(), cfg_.adam);
  }

  /// Path reported when a step diverges.
  void set_last_good_checkpoint(std::string path) { last_good_ = std::move(path); }
  std::size_t step_count() const { return step_; }
  std::size_t graphs_sampled() const { return graphs_sampled_; }

  LossReport step(const SegmentBatch& batch) {
    const std::uint64_t step_seed = mix_seed(cfg_.seed, 0x5000'0000ULL + step_);
    const std::string last_good = "; last good checkpoint: " + (last_good_.empty() ? std::string("none") : last_good_);
    std::optional<SslStep> forward;
    try {
      forward = ssl_forward(model_, batch, cfg_.ssl, cfg_.tasks, step_seed, GraphMode::train);
    } catch (const std::runtime_error& e) {
      // Non-finite logits or sigma surface here before the loss exists.
      throw TrainingDivergedError("step " + std::to_string(step_) + ": " + e.what() + last_good);
    }
    SslStep& s = *forward;
    if (s.graph) ++graphs_sampled_;
    s.report.step = step_;
    s.report.seed = cfg_.seed;
    if (!std::isfinite(s.report.joint)) throw TrainingDivergedError("non-finite loss at step " + std::to_string(step_) + last_good);
    optimizer_.zero_grad();
    ag::backward(s.joint);
    optimizer_.step();
    ++step_;
    return s.report;
  }

  /// One pass over the corpus in a seeded order. Stops early at max_steps.
  std::vector<LossReport> epoch(const SslCorpus& corpus, std::ostream* log = nullptr) {
    if (corpus.clips.empty()) throw std::invalid_argument("pretrain_epoch: empty corpus");
    Rng order_rng(mix_seed(cfg_.seed, 0x6000'0000ULL + epoch_++));
    std::vector<std::size_t> order(corpus.clips.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    std::vector<LossReport> reports;
    const std::size_t per = std::max<std::size_t>(cfg_.clips_per_batch, 1);
    for (std::size_t start = 0; start < order.size(); start += per) {
      if (cfg_.max_steps && step_ >= cfg_.max_steps) break;
      SegmentBatch batch;
      for (std::size_t m = start; m < std::min(order.size(), start + per); ++m) {
        const auto& clip = corpus.clips[order[m]];
        const std::size_t len = clip.segments.size();
        const std::size_t run = cfg_.run_length ? std::min(cfg_.run_length, len) : len;
        const std::size_t offset = len > run ? order_rng.index(len - run + 1) : 0;
        std::vector<Matrix> segs(clip.segments.begin() + static_cast<std::ptrdiff_t>(offset),
                                 clip.segments.begin() + static_cast<std::ptrdiff_t>(offset + run));
        batch.push_run(segs, m, corpus.priors[corpus.prior_of[order[m]]]);
      }
      reports.push_back(step(batch));
      if (log) *log << to_json(reports.back()).dump() << "\n";
    }
    return reports;
  }

 private:
  MBrainModel& model_;
  PretrainConfig cfg_;
  Adam optimizer_;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
  std::size_t graphs_sampled_ = 0;
  std::string last_good_;
};

inline std::vector<LossReport> pretrain_epoch(const SslCorpus& corpus, Pretrainer& trainer, std::ostream* log = nullptr) {
  return trainer.epoch(corpus, log);
}

/// Thresholded fine graph of each segment of one clip in eval mode (no
/// noise), with the context taken at position `tau` (1-based).
inline std::vector<FineGraph> learned_graphs(const MBrainModel& model, const std::vector<Matrix>& segments, const Matrix& prior,
                                             double theta1, std::size_t tau) {
  const std::size_t ch = model.config().channels;
  if (tau == 0 || tau > model.steps()) throw std::out_of_range("learned_graphs: tau outside 1..T");
  SegmentBatch batch;
  batch.push_run(segments, 0, prior);
  const std::vector<ag::Var> c_self = model.contextualize(model.encode(batch.segments), segments.size() * ch);
  Rng unused(0);
  auto g = sample_fine_graph_batch(c_self[tau - 1], ch, batch.prior_rows, theta1, GraphMode::eval, unused,
                                   model.sigma_network());
  auto block = [&](const Matrix& m, std::size_t b) {
    Matrix out(ch, ch);
    std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(b * ch * ch), ch * ch, out.data.begin());
    return out;
  };
  std::vector<FineGraph> out;
  for (std::size_t b = 0; b < segments.size(); ++b)
    out.push_back({block(g.sigma->value, b), block(g.noise, b), block(g.a_fine->value, b), block(g.a_t->value, b), theta1});
  return out;
}

}  // namespace mbrain
