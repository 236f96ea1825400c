#pragma once

// Channel-wise seizure detection on top of a pretrained trunk: the
// detection head, clip-level pooling, metrics, the three evaluation
// protocols, the ablation matrix and hyperparameter sweeps.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbrain/autograd.hpp"
#include "mbrain/layers.hpp"
#include "mbrain/neural.hpp"
#include "mbrain/optim.hpp"
#include "mbrain/ssl.hpp"
#include "mbrain/synthetic.hpp"

namespace mbrain {

// ---- heads -----------------------------------------------------------------

/// Per-channel LSTM over segment representations, single-head attention
/// across the channels of each time step (residual), then a two-layer
/// classifier giving one logit per (segment, channel).
struct DetectionHead {
  Lstm temporal;
  ag::Var wq, wk, wv;  // hidden x hidden, no bias
  Mlp2 classifier;
  std::size_t hidden = 0;

  DetectionHead() = default;
  DetectionHead(std::size_t in_width, std::size_t hidden_width, Rng& rng)
      : temporal(in_width, hidden_width, rng),
        wq(ag::parameter(fan_in_uniform(hidden_width, hidden_width, hidden_width, rng))),
        wk(ag::parameter(fan_in_uniform(hidden_width, hidden_width, hidden_width, rng))),
        wv(ag::parameter(fan_in_uniform(hidden_width, hidden_width, hidden_width, rng))),
        classifier(hidden_width, hidden_width, 1, rng),
        hidden(hidden_width) {}

  /// `h` rows are (clip*S + s)*C + i. Logit rows come out as (s*n_clips + clip)*C + i.
  ag::Var logits(const ag::Var& h, std::size_t n_clips, std::size_t segments, std::size_t channels) const {
    if (h->rows() != n_clips * segments * channels) throw ShapeError("DetectionHead: rows != clips * segments * channels");
    std::vector<std::size_t> order(h->rows());
    for (std::size_t k = 0; k < n_clips; ++k)
      for (std::size_t i = 0; i < channels; ++i)
        for (std::size_t s = 0; s < segments; ++s) order[(k * channels + i) * segments + s] = (k * segments + s) * channels + i;
    const auto u_steps = temporal.run(ag::gather_rows(h, std::move(order)), n_clips * channels, segments);
    const ag::Var u = ag::concat_rows(u_steps);
    const ag::Var att = ag::block_attention(ag::matmul(u, wq), ag::matmul(u, wk), ag::matmul(u, wv), channels,
                                            1.0 / std::sqrt(static_cast<double>(hidden)));
    return classifier(ag::add(u, att));
  }

  void collect(ParamList& p, const std::string& prefix) const {
    temporal.collect(p, prefix + ".temporal");
    p.add(prefix + ".attention.wq", wq);
    p.add(prefix + ".attention.wk", wk);
    p.add(prefix + ".attention.wv", wv);
    classifier.collect(p, prefix + ".classifier");
  }

  ParamList params() const {
    ParamList p;
    collect(p, "head");
    return p;
  }
};

/// Probabilities [S x C] for one clip's representations (rows s*C + i).
inline Matrix detection_forward(const Matrix& h_sequence, const DetectionHead& head, std::size_t channels) {
  if (h_sequence.rows % channels != 0) throw ShapeError("detection_forward: rows must be segments * channels");
  const std::size_t segments = h_sequence.rows / channels;
  ag::Var logits = head.logits(ag::constant(h_sequence), 1, segments, channels);
  Matrix out(segments, channels);
  for (std::size_t r = 0; r < out.size(); ++r) out.data[r] = ag::detail::sigmoid(logits->value.data[r]);
  return out;
}

/// Clip-level pathway: mean over channels and segments, then a two-layer
/// classifier with `classes` outputs (1 = binary logit).
struct ClipHead {
  Mlp2 classifier;

  ClipHead() = default;
  ClipHead(std::size_t in_width, std::size_t hidden_width, Rng& rng, std::size_t classes = 1)
      : classifier(in_width, hidden_width, classes, rng) {}

  /// `h` rows are (clip*S*C + ...) grouped per clip; returns [n_clips x classes].
  ag::Var logits(const ag::Var& h, std::size_t n_clips) const {
    if (n_clips == 0 || h->rows() % n_clips != 0) throw ShapeError("ClipHead: rows not divisible by clip count");
    const std::size_t per = h->rows() / n_clips;
    Matrix pool(n_clips, h->rows(), 0.0);
    for (std::size_t k = 0; k < n_clips; ++k)
      for (std::size_t r = 0; r < per; ++r) pool(k, k * per + r) = 1.0 / static_cast<double>(per);
    return classifier(ag::matmul(ag::constant(std::move(pool)), h));
  }

  void collect(ParamList& p, const std::string& prefix) const { classifier.collect(p, prefix + ".classifier"); }
};

inline double clip_pool(const Matrix& h_sequence, const ClipHead& head) {
  return ag::detail::sigmoid(head.logits(ag::constant(h_sequence), 1)->value.data[0]);
}

// ---- metrics ---------------------------------------------------------------

struct MetricsReport {
  double precision = 0.0, recall = 0.0, f1 = 0.0, f2 = 0.0;
  std::optional<double> auroc;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::size_t positives = 0, negatives = 0;
};

inline double f_beta(double precision, double recall, double beta) {
  const double b2 = beta * beta;
  const double denom = b2 * precision + recall;
  return denom > 0.0 ? (1.0 + b2) * precision * recall / denom : 0.0;
}

/// Mann-Whitney statistic with average ranks for ties; absent when only one
/// class is present.
inline std::optional<double> auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("auroc: scores and labels differ in length");
  const std::size_t n = scores.size();
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
  if (pos == 0 || pos == n) return std::nullopt;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t lo = 0; lo < n;) {
    std::size_t hi = lo;
    while (hi + 1 < n && scores[order[hi + 1]] == scores[order[lo]]) ++hi;
    const double avg = 0.5 * static_cast<double>(lo + hi) + 1.0;
    for (std::size_t k = lo; k <= hi; ++k)
      if (labels[order[k]]) rank_sum += avg;
    lo = hi + 1;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(n - pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

inline MetricsReport compute_metrics(const std::vector<double>& predictions, const std::vector<std::uint8_t>& labels,
                                     double threshold = 0.5) {
  if (predictions.size() != labels.size()) throw ShapeError("compute_metrics: predictions and labels differ in length");
  MetricsReport m;
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    const bool pred = predictions[k] >= threshold;
    const bool truth = labels[k] != 0;
    m.tp += pred && truth;
    m.fp += pred && !truth;
    m.fn += !pred && truth;
    m.tn += !pred && !truth;
  }
  m.positives = m.tp + m.fn;
  m.negatives = m.fp + m.tn;
  m.precision = m.tp + m.fp ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  m.recall = m.positives ? static_cast<double>(m.tp) / static_cast<double>(m.positives) : 0.0;
  m.f1 = f_beta(m.precision, m.recall, 1.0);
  m.f2 = f_beta(m.precision, m.recall, 2.0);
  m.auroc = auroc(predictions, labels);
  return m;
}

/// Mean of per-subject metrics; AUROC averages over the subjects where it is defined.
inline MetricsReport average_metrics(const std::vector<MetricsReport>& per_subject) {
  if (per_subject.empty()) throw std::invalid_argument("average_metrics: no reports");
  MetricsReport out;
  double auc = 0.0;
  std::size_t auc_n = 0;
  for (const auto& m : per_subject) {
    out.precision += m.precision;
    out.recall += m.recall;
    out.f1 += m.f1;
    out.f2 += m.f2;
    out.tp += m.tp, out.fp += m.fp, out.fn += m.fn, out.tn += m.tn;
    out.positives += m.positives, out.negatives += m.negatives;
    if (m.auroc) auc += *m.auroc, ++auc_n;
  }
  const double n = static_cast<double>(per_subject.size());
  out.precision /= n, out.recall /= n, out.f1 /= n, out.f2 /= n;
  if (auc_n) out.auroc = auc / static_cast<double>(auc_n);
  return out;
}

inline nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json j{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"f2", m.f2},
                   {"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}, {"tn", m.tn},
                   {"positives", m.positives}, {"negatives", m.negatives}};
  if (m.auroc) j["auroc"] = *m.auroc;
  return j;
}

// ---- parameter snapshots ---------------------------------------------------

inline std::vector<Matrix> snapshot(const ParamList& p) {
  std::vector<Matrix> out;
  for (const auto& [_, v] : p.items) out.push_back(v->value);
  return out;
}

inline void restore(const ParamList& p, const std::vector<Matrix>& values) {
  if (values.size() != p.items.size()) throw ShapeError("restore: tensor count mismatch");
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (!values[k].same_shape(p.items[k].second->value))
      throw ShapeError("restore: shape mismatch for " + p.items[k].first);
    p.items[k].second->value = values[k];
  }
}

/// L2 norm of the change between two snapshots of the same list.
inline double drift(const std::vector<Matrix>& before, const std::vector<Matrix>& after) {
  double s = 0.0;
  for (std::size_t k = 0; k < before.size(); ++k)
    for (std::size_t e = 0; e < before[k].size(); ++e) {
      const double d = after[k].data[e] - before[k].data[e];
      s += d * d;
    }
  return std::sqrt(s);
}

// ---- fine-tuning and evaluation --------------------------------------------

struct FinetuneConfig {
  AdamSettings trunk{1e-6, 1e-6};
  AdamSettings head{5e-4, 1e-6};
  std::size_t epochs = 10;
  std::size_t clips_per_batch = 4;
  std::size_t head_hidden = 0;  // 0 = d_ar
  double positive_weight = 1.0;  // BCE weight on label-1 cells
  std::uint64_t seed = 0;
};

/// Segment representations of a group of clips, rows (clip*S + s)*C + i.
inline ag::Var clip_representations(const MBrainModel& trunk, const std::vector<const SegmentedClip*>& clips) {
  if (clips.empty()) throw std::invalid_argument("clip_representations: no clips");
  const std::size_t segments = clips.front()->segments.size();
  std::vector<Matrix> all;
  for (const auto* c : clips) {
    if (c->segments.size() != segments) throw ShapeError("clip_representations: clips differ in segment count");
    all.insert(all.end(), c->segments.begin(), c->segments.end());
  }
  const ag::Var z = trunk.encode(all);
  return trunk.pool(trunk.contextualize(z, all.size() * trunk.config().channels));
}

inline std::vector<double> detection_labels(const std::vector<const SegmentedClip*>& clips, std::size_t segments,
                                            std::size_t channels) {
  std::vector<double> y(clips.size() * segments * channels);
  for (std::size_t s = 0; s < segments; ++s)
    for (std::size_t k = 0; k < clips.size(); ++k)
      for (std::size_t i = 0; i < channels; ++i) y[(s * clips.size() + k) * channels + i] = clips[k]->labels(s, i);
  return y;
}

struct FinetuneResult {
  std::vector<double> epoch_losses;
  double trunk_drift = 0.0;
  double head_drift = 0.0;
};

inline FinetuneResult finetune_detection(MBrainModel& trunk, DetectionHead& head, const std::vector<SegmentedClip>& train,
                                         const FinetuneConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("finetune: no training clips");
  const ParamList trunk_p = trunk.trunk_params(), head_p = head.params();
  const auto trunk0 = snapshot(trunk_p), head0 = snapshot(head_p);
  Adam opt;
  if (cfg.trunk.learning_rate > 0.0) opt.add_group(trunk_p.vars(), cfg.trunk);
  opt.add_group(head_p.vars(), cfg.head);
  const std::size_t ch = trunk.config().channels;
  Rng rng(mix_seed(cfg.seed, 0xF1E7));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  FinetuneResult out;
  const std::size_t per = std::max<std::size_t>(cfg.clips_per_batch, 1);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += per) {
      std::vector<const SegmentedClip*> group;
      for (std::size_t m = start; m < std::min(order.size(), start + per); ++m) group.push_back(&train[order[m]]);
      const std::size_t segments = group.front()->segments.size();
      const ag::Var h = clip_representations(trunk, group);
      const ag::Var logits = head.logits(h, group.size(), segments, ch);
      std::vector<double> y = detection_labels(group, segments, ch);
      std::vector<double> w;
      if (cfg.positive_weight != 1.0)
        for (double v : y) w.push_back(v > 0.5 ? cfg.positive_weight : 1.0);
      const ag::Var loss = ag::bce_with_logits(logits, std::move(y), std::move(w));
      if (!std::isfinite(loss->value.data[0]))
        throw TrainingDivergedError("fine-tuning produced a non-finite loss in epoch " + std::to_string(epoch));
      opt.zero_grad();
      ag::backward(loss);
      opt.step();
      total += loss->value.data[0];
      ++batches;
    }
    out.epoch_losses.push_back(total / static_cast<double>(batches));
  }
  out.trunk_drift = drift(trunk0, snapshot(trunk_p));
  out.head_drift = drift(head0, snapshot(head_p));
  return out;
}

/// Channel-wise probabilities [S x C] per clip.
inline std::vector<Matrix> predict_detection(const MBrainModel& trunk, const DetectionHead& head,
                                             const std::vector<SegmentedClip>& clips, std::size_t chunk = 16) {
  const std::size_t ch = trunk.config().channels;
  std::vector<Matrix> out;
  for (std::size_t start = 0; start < clips.size(); start += chunk) {
    std::vector<const SegmentedClip*> group;
    for (std::size_t m = start; m < std::min(clips.size(), start + chunk); ++m) group.push_back(&clips[m]);
    const std::size_t segments = group.front()->segments.size();
    const ag::Var logits = head.logits(clip_representations(trunk, group), group.size(), segments, ch);
    for (std::size_t k = 0; k < group.size(); ++k) {
      Matrix p(segments, ch);
      for (std::size_t s = 0; s < segments; ++s)
        for (std::size_t i = 0; i < ch; ++i)
          p(s, i) = ag::detail::sigmoid(logits->value.data[(s * group.size() + k) * ch + i]);
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline MetricsReport evaluate_detection(const MBrainModel& trunk, const DetectionHead& head,
                                        const std::vector<SegmentedClip>& clips, double threshold = 0.5) {
  const auto probs = predict_detection(trunk, head, clips);
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (std::size_t k = 0; k < clips.size(); ++k) {
    scores.insert(scores.end(), probs[k].data.begin(), probs[k].data.end());
    labels.insert(labels.end(), clips[k].labels.data.begin(), clips[k].labels.data.end());
  }
  return compute_metrics(scores, labels, threshold);
}

// ---- experiments -----------------------------------------------------------

struct ExperimentConfig {
  ModelConfig model;
  PretrainConfig pretrain;
  std::size_t ssl_epochs = 1;
  FinetuneConfig finetune;
  std::uint64_t seed = 0;
  std::string config_hash;
};

struct EpochLoss {
  std::size_t epoch = 0;
  std::optional<double> l1, l2, l3;
  double joint = 0.0;
};

inline EpochLoss mean_epoch(std::size_t epoch, const std::vector<LossReport>& reports) {
  EpochLoss e;
  e.epoch = epoch;
  double s1 = 0, s2 = 0, s3 = 0, sj = 0;
  for (const auto& r : reports) {
    s1 += r.l1.value_or(0.0), s2 += r.l2.value_or(0.0), s3 += r.l3.value_or(0.0), sj += r.joint;
  }
  const double n = static_cast<double>(std::max<std::size_t>(reports.size(), 1));
  if (!reports.empty() && reports.front().l1) e.l1 = s1 / n;
  if (!reports.empty() && reports.front().l2) e.l2 = s2 / n;
  if (!reports.empty() && reports.front().l3) e.l3 = s3 / n;
  e.joint = sj / n;
  return e;
}

inline nlohmann::json to_json(const EpochLoss& e) {
  nlohmann::json j{{"epoch", e.epoch}, {"L_joint", e.joint}};
  if (e.l1) j["L1"] = *e.l1;
  if (e.l2) j["L2"] = *e.l2;
  if (e.l3) j["L3"] = *e.l3;
  return j;
}

struct TrainingManifest {
  std::vector<std::string> ssl_clip_ids;
  std::vector<std::string> finetune_clip_ids;

  std::set<std::string> all() const {
    std::set<std::string> s(ssl_clip_ids.begin(), ssl_clip_ids.end());
    s.insert(finetune_clip_ids.begin(), finetune_clip_ids.end());
    return s;
  }
};

struct ExperimentReport {
  std::string name;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<EpochLoss> ssl_losses;
  std::vector<LossReport> ssl_stream;
  std::vector<double> finetune_losses;
  std::optional<MetricsReport> metrics;
  std::map<std::string, std::string> manifest_digests;
  TrainingManifest manifest;
  std::size_t fine_graphs_sampled = 0;
  double trunk_drift = 0.0;
  double head_drift = 0.0;
};

inline nlohmann::json to_json(const ExperimentReport& r) {
  nlohmann::json j;
  j["name"] = r.name;
  j["config_hash"] = r.config_hash;
  j["seeds"] = r.seeds;
  j["ssl_epoch_losses"] = nlohmann::json::array();
  for (const auto& e : r.ssl_losses) j["ssl_epoch_losses"].push_back(to_json(e));
  j["finetune_epoch_losses"] = r.finetune_losses;
  if (r.metrics) j["metrics"] = to_json(*r.metrics);
  j["manifest_digests"] = r.manifest_digests;
  j["training_clip_count"] = r.manifest.all().size();
  j["fine_graphs_sampled"] = r.fine_graphs_sampled;
  j["trunk_drift"] = r.trunk_drift;
  j["head_drift"] = r.head_drift;
  return j;
}

/// Pretrains `model` in place for cfg.ssl_epochs epochs. `on_epoch` runs
/// after every epoch (the CLI writes checkpoints there).
inline std::vector<EpochLoss> pretrain_model(MBrainModel& model, const SslCorpus& corpus, const ExperimentConfig& cfg,
                                             ExperimentReport& report, std::ostream* log = nullptr,
                                             const std::function<void(const EpochLoss&, Pretrainer&)>& on_epoch = {}) {
  PretrainConfig pc = cfg.pretrain;
  pc.seed = mix_seed(cfg.seed, 0x5511);
  Pretrainer trainer(model, pc);
  std::vector<EpochLoss> epochs;
  for (std::size_t e = 0; e < cfg.ssl_epochs; ++e) {
    auto reports = trainer.epoch(corpus, log);
    if (reports.empty()) break;
    epochs.push_back(mean_epoch(e, reports));
    if (on_epoch) on_epoch(epochs.back(), trainer);
    report.ssl_stream.insert(report.ssl_stream.end(), reports.begin(), reports.end());
  }
  report.fine_graphs_sampled += trainer.graphs_sampled();
  for (const auto& c : corpus.clips) report.manifest.ssl_clip_ids.push_back(c.id);
  report.ssl_losses = epochs;
  return epochs;
}

/// Fresh detection head, seeded from the experiment seed.
inline DetectionHead make_detection_head(const MBrainModel& trunk, const ExperimentConfig& cfg) {
  Rng head_rng(mix_seed(cfg.seed, 0x4EAD));
  const std::size_t hidden = cfg.finetune.head_hidden ? cfg.finetune.head_hidden : trunk.config().d_ar;
  return DetectionHead(trunk.config().d_ar, hidden, head_rng);
}

/// Fine-tunes `head` on `train`, recording losses, drift and clip ids.
inline void finetune_stage(MBrainModel& trunk, DetectionHead& head, const std::vector<SegmentedClip>& train,
                           const ExperimentConfig& cfg, ExperimentReport& report) {
  FinetuneConfig fc = cfg.finetune;
  fc.seed = mix_seed(cfg.seed, 0xF17E);
  const FinetuneResult ft = finetune_detection(trunk, head, train, fc);
  report.finetune_losses = ft.epoch_losses;
  report.trunk_drift = ft.trunk_drift;
  report.head_drift = ft.head_drift;
  for (const auto& c : train) report.manifest.finetune_clip_ids.push_back(c.id);
}

/// Fine-tunes a fresh head on `train` and scores it on `test`.
inline MetricsReport finetune_and_evaluate(MBrainModel& trunk, const std::vector<SegmentedClip>& train,
                                           const std::vector<SegmentedClip>& test, const ExperimentConfig& cfg,
                                           ExperimentReport& report) {
  DetectionHead head = make_detection_head(trunk, cfg);
  finetune_stage(trunk, head, train, cfg, report);
  report.metrics = evaluate_detection(trunk, head, test);
  return *report.metrics;
}

enum class ProtocolKind { subject_dependent, domain_generalization, domain_adaptation };

inline const char* protocol_name(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::subject_dependent: return "subject_dependent";
    case ProtocolKind::domain_generalization: return "domain_generalization";
    case ProtocolKind::domain_adaptation: return "domain_adaptation";
  }
  return "?";
}

inline ProtocolKind parse_protocol(const std::string& s) {
  for (auto k : {ProtocolKind::subject_dependent, ProtocolKind::domain_generalization, ProtocolKind::domain_adaptation})
    if (s == protocol_name(k)) return k;
  throw ConfigError("unknown protocol '" + s + "' (subject_dependent, domain_generalization, domain_adaptation)");
}

struct ProtocolSpec {
  ProtocolKind kind = ProtocolKind::subject_dependent;
  std::vector<std::string> source_subjects;
  std::string target_subject;
  double trunk_lr = 1e-6;
  double head_lr = 5e-4;
};

class IsolationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training clip ids that belong to the target subject's evaluation data.
/// Domain generalization forbids every target clip; the other protocols
/// forbid the target's test clips.
inline std::vector<std::string> isolation_violations(ProtocolKind kind, const TrainingManifest& m, const Dataset& target) {
  std::set<std::string> forbidden;
  for (const auto& c : target.clips)
    if (kind == ProtocolKind::domain_generalization || c.split == Split::test) forbidden.insert(c.id);
  std::vector<std::string> hits;
  for (const auto& id : m.all())
    if (forbidden.count(id)) hits.push_back(id);
  return hits;
}

inline void audit_isolation(ProtocolKind kind, const TrainingManifest& m, const Dataset& target) {
  const auto hits = isolation_violations(kind, m, target);
  if (!hits.empty())
    throw IsolationError(std::string(protocol_name(kind)) + ": " + std::to_string(hits.size()) +
                         " target clip id(s) found in training inputs, first: " + hits.front());
}

inline const Dataset& find_subject(const std::map<std::string, Dataset>& data, const std::string& id) {
  auto it = data.find(id);
  if (it == data.end()) throw std::invalid_argument("no dataset bundle for subject '" + id + "'");
  return it->second;
}

/// Which subjects feed each stage.
struct ProtocolPlan {
  std::vector<std::string> ssl_subjects;
  std::vector<std::string> finetune_subjects;
  std::string test_subject;
};

inline ProtocolPlan plan_protocol(const ProtocolSpec& spec) {
  if (spec.target_subject.empty()) throw ConfigError("protocol: target subject required");
  switch (spec.kind) {
    case ProtocolKind::subject_dependent:
      return {{spec.target_subject}, {spec.target_subject}, spec.target_subject};
    case ProtocolKind::domain_generalization: {
      if (spec.source_subjects.empty()) throw ConfigError("domain_generalization: at least one source subject required");
      for (const auto& s : spec.source_subjects)
        if (s == spec.target_subject) throw ConfigError("domain_generalization: target subject listed as a source");
      return {spec.source_subjects, spec.source_subjects, spec.target_subject};
    }
    case ProtocolKind::domain_adaptation: {
      if (spec.source_subjects.empty()) throw ConfigError("domain_adaptation: at least one source subject required");
      return {spec.source_subjects, {spec.target_subject}, spec.target_subject};
    }
  }
  throw ConfigError("protocol: unknown kind");
}

/// Segmented inputs of every stage of a protocol. Building them runs the
/// isolation audit, so a leaking plan never reaches compute.
struct ProtocolInputs {
  ProtocolPlan plan;
  SslCorpus corpus;
  std::vector<SegmentedClip> train;
  std::vector<SegmentedClip> test;
};

inline ProtocolInputs protocol_inputs(const ProtocolSpec& spec, std::size_t window, const std::map<std::string, Dataset>& data) {
  ProtocolInputs in;
  in.plan = plan_protocol(spec);
  const Dataset& target = find_subject(data, in.plan.test_subject);
  for (const auto& id : in.plan.ssl_subjects) in.corpus.add_subject(find_subject(data, id), Split::ssl_train, window);
  for (const auto& id : in.plan.finetune_subjects) {
    auto part = segment_split(find_subject(data, id), Split::train, window);
    in.train.insert(in.train.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  in.test = segment_split(target, Split::test, window);
  TrainingManifest planned;
  for (const auto& c : in.corpus.clips) planned.ssl_clip_ids.push_back(c.id);
  for (const auto& c : in.train) planned.finetune_clip_ids.push_back(c.id);
  audit_isolation(spec.kind, planned, target);
  return in;
}

/// Pretrain on the plan's SSL subjects, fine-tune on its fine-tuning
/// subjects' train splits, test on the target's test split.
inline ExperimentReport run_protocol(const ProtocolSpec& spec, const ExperimentConfig& base,
                                     const std::map<std::string, Dataset>& data, std::ostream* log = nullptr) {
  ExperimentConfig cfg = base;
  cfg.finetune.trunk.learning_rate = spec.trunk_lr;
  cfg.finetune.head.learning_rate = spec.head_lr;
  const ProtocolInputs in = protocol_inputs(spec, cfg.model.window, data);
  ExperimentReport report;
  report.name = protocol_name(spec.kind);
  report.config_hash = cfg.config_hash;
  report.seeds = {cfg.seed};
  for (const auto& id : in.plan.ssl_subjects) report.manifest_digests[id] = dataset_digest(find_subject(data, id));

  MBrainModel model(cfg.model, cfg.seed);
  pretrain_model(model, in.corpus, cfg, report, log);
  finetune_and_evaluate(model, in.train, in.test, cfg, report);
  audit_isolation(spec.kind, report.manifest, find_subject(data, in.plan.test_subject));
  return report;
}

// ---- ablations -------------------------------------------------------------

enum class Variant {
  full, minus_graph, minus_instant, minus_delay, minus_replace, only_instant, only_delay, only_replace,
  cpc_conv, cpc_mlp, shared_cpc
};

inline const std::vector<std::pair<Variant, const char*>>& variant_names() {
  static const std::vector<std::pair<Variant, const char*>> names{
      {Variant::full, "full"}, {Variant::minus_graph, "minus_graph"}, {Variant::minus_instant, "minus_instant"},
      {Variant::minus_delay, "minus_delay"}, {Variant::minus_replace, "minus_replace"},
      {Variant::only_instant, "only_instant"}, {Variant::only_delay, "only_delay"}, {Variant::only_replace, "only_replace"},
      {Variant::cpc_conv, "cpc_conv"}, {Variant::cpc_mlp, "cpc_mlp"}, {Variant::shared_cpc, "shared_cpc"}};
  return names;
}

inline const char* variant_name(Variant v) {
  for (const auto& [k, n] : variant_names())
    if (k == v) return n;
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  std::string all;
  for (const auto& [k, n] : variant_names()) {
    if (s == n) return k;
    all += (all.empty() ? "" : ", ") + std::string(n);
  }
  throw ConfigError("unknown variant '" + s + "' (expected one of: " + all + ")");
}

/// Model and task toggles for a variant, starting from the base config.
inline std::pair<ModelConfig, TaskSwitches> variant_setup(Variant v, ModelConfig m) {
  TaskSwitches t;
  m.encoder = EncoderKind::per_channel;
  m.aggregator = Aggregator::graph;
  switch (v) {
    case Variant::full: break;
    case Variant::minus_graph: m.aggregator = Aggregator::none; break;
    case Variant::minus_instant: t.instant = false; break;
    case Variant::minus_delay: t.delayed = false; break;
    case Variant::minus_replace: t.replace = false; break;
    case Variant::only_instant: t = {true, false, false}; break;
    case Variant::only_delay: t = {false, true, false}; break;
    case Variant::only_replace: t = {false, false, true}; break;
    case Variant::cpc_conv:
      m.encoder = EncoderKind::multi_channel;
      m.aggregator = Aggregator::none;
      t = {true, false, false};
      break;
    case Variant::cpc_mlp:
      m.aggregator = Aggregator::mlp;
      t = {true, false, false};
      break;
    case Variant::shared_cpc:
      m.aggregator = Aggregator::none;
      t = {true, false, false};
      break;
  }
  return {m, t};
}

/// Subject-dependent run of one variant on a single subject.
inline ExperimentReport run_ablation(Variant v, const ExperimentConfig& base, const Dataset& data, std::ostream* log = nullptr,
                                     bool evaluate = true) {
  ExperimentConfig cfg = base;
  std::tie(cfg.model, cfg.pretrain.tasks) = variant_setup(v, base.model);
  ExperimentReport report;
  report.name = variant_name(v);
  report.config_hash = cfg.config_hash;
  report.seeds = {cfg.seed};
  report.manifest_digests[data.subject_id] = dataset_digest(data);
  SslCorpus corpus;
  corpus.add_subject(data, Split::ssl_train, cfg.model.window);
  MBrainModel model(cfg.model, cfg.seed);
  pretrain_model(model, corpus, cfg, report, log);
  if (evaluate)
    finetune_and_evaluate(model, segment_split(data, Split::train, cfg.model.window),
                          segment_split(data, Split::test, cfg.model.window), cfg, report);
  return report;
}

// ---- sweeps ----------------------------------------------------------------

struct SweepCell {
  double lambda1 = 0.0, lambda2 = 0.0, replace_percent = 0.0;
  std::vector<double> f2;
  double mean = 0.0, stddev = 0.0;
};

struct SweepGrid {
  std::vector<std::pair<double, double>> lambdas;
  std::vector<double> replace_percents;
  std::vector<std::uint64_t> seeds;
};

/// Cartesian product of `values` with itself, keeping λ1 + λ2 <= 1.
inline std::vector<std::pair<double, double>> lambda_grid(const std::vector<double>& values) {
  std::vector<std::pair<double, double>> out;
  for (double a : values)
    for (double b : values)
      if (a >= 0.0 && b >= 0.0 && a + b <= 1.0) out.emplace_back(a, b);
  return out;
}

inline void summarize(SweepCell& c) {
  c.mean = 0.0;
  for (double v : c.f2) c.mean += v;
  c.mean /= static_cast<double>(c.f2.size());
  double ss = 0.0;
  for (double v : c.f2) ss += (v - c.mean) * (v - c.mean);
  c.stddev = c.f2.size() > 1 ? std::sqrt(ss / static_cast<double>(c.f2.size() - 1)) : 0.0;
}

inline nlohmann::json to_json(const SweepCell& c) {
  return {{"lambda1", c.lambda1}, {"lambda2", c.lambda2}, {"replace_percent", c.replace_percent},
          {"f2", c.f2}, {"mean", c.mean}, {"std", c.stddev}};
}

/// Every (λ1, λ2) x r cell is run once per seed under the subject-dependent
/// protocol; empty lambda or r lists keep the base value.
inline std::vector<SweepCell> sweep_hyperparams(const SweepGrid& grid, const ExperimentConfig& base, const Dataset& data) {
  auto lambdas = grid.lambdas;
  auto rs = grid.replace_percents;
  if (lambdas.empty()) lambdas.emplace_back(base.pretrain.ssl.lambda1, base.pretrain.ssl.lambda2);
  if (rs.empty()) rs.push_back(base.pretrain.ssl.replace_percent);
  if (grid.seeds.empty()) throw ConfigError("sweep: at least one seed required");
  std::vector<SweepCell> cells;
  for (const auto& [l1, l2] : lambdas)
    for (double r : rs) {
      SweepCell cell{l1, l2, r, {}, 0.0, 0.0};
      for (std::uint64_t seed : grid.seeds) {
        ExperimentConfig cfg = base;
        cfg.pretrain.ssl.lambda1 = l1;
        cfg.pretrain.ssl.lambda2 = l2;
        cfg.pretrain.ssl.replace_percent = r;
        cfg.seed = seed;
        validate(cfg.pretrain.ssl, encoded_length(cfg.model));
        cell.f2.push_back(run_ablation(Variant::full, cfg, data).metrics->f2);
      }
      summarize(cell);
      cells.push_back(std::move(cell));
    }
  return cells;
}

}  // namespace mbrain
