#pragma once

// Labeled synthetic recordings: channel-specific oscillations with
// graph-coupled background, plus Hann-windowed bursts that travel along a
// directed propagation graph. Dataset bundles are written as mbrn clips
// with a JSON manifest.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <queue>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbrain/rng.hpp"
#include "mbrain/signal.hpp"

namespace mbrain {

struct PropagationEdge {
  std::size_t from = 0;
  std::size_t to = 0;
  double weight = 1.0;
};

struct SynthConfig {
  std::string subject_id = "s0";
  std::size_t channels = 8;
  std::size_t length = 2500;
  double sample_rate_hz = 250.0;
  std::size_t event_count = 1;
  std::size_t event_len_min = 500;
  std::size_t event_len_max = 1000;
  std::size_t propagation_delay_per_hop = 250;
  std::vector<PropagationEdge> propagation_graph;
  double amplitude_boost = 3.0;
  double frequency_shift_hz = 5.0;
  double noise_std = 0.3;
  /// Background coupling: a channel with an incoming edge carries
  /// coupling * weight of its upstream neighbor's base oscillation.
  double coupling = 0.8;
  /// Channels allowed to originate an event; empty means any channel.
  std::vector<std::size_t> event_seed_channels;
  std::uint64_t seed = 0;
};

inline void validate(const SynthConfig& cfg) {
  if (cfg.channels < 2) throw std::invalid_argument("SynthConfig: channels must be >= 2");
  if (cfg.length < 1) throw std::invalid_argument("SynthConfig: length must be >= 1");
  if (!(cfg.sample_rate_hz > 0)) throw std::invalid_argument("SynthConfig: sample_rate_hz must be positive");
  if (cfg.event_len_min < 1 || cfg.event_len_max < cfg.event_len_min)
    throw std::invalid_argument("SynthConfig: event_len_range must satisfy 1 <= min <= max");
  if (!(cfg.amplitude_boost > 1.0)) throw std::invalid_argument("SynthConfig: amplitude_boost must be > 1");
  for (const auto& e : cfg.propagation_graph)
    if (e.from >= cfg.channels || e.to >= cfg.channels || e.from == e.to)
      throw std::invalid_argument("SynthConfig: propagation edge references an invalid channel");
  for (auto c : cfg.event_seed_channels)
    if (c >= cfg.channels) throw std::invalid_argument("SynthConfig: event seed channel out of range");
}

/// Default propagation graph: disjoint chains 0->1->2, 3->4->5, ...
inline std::vector<PropagationEdge> chain_graph(std::size_t channels, std::size_t chain_len = 3) {
  std::vector<PropagationEdge> edges;
  for (std::size_t c = 0; c + 1 < channels; ++c)
    if ((c + 1) % chain_len != 0) edges.push_back({c, c + 1, 1.0});
  return edges;
}

/// Frequency grid the per-channel base frequencies are drawn from.
inline std::vector<double> frequency_grid(double sample_rate_hz) {
  std::vector<double> grid;
  const double top = std::min(30.0, 0.2 * sample_rate_hz);
  for (double f = 2.0; f <= top + 1e-9; f += 1.0) grid.push_back(f);
  return grid;
}

struct ChannelSpectrum {
  std::vector<double> base_hz;
  std::vector<double> secondary_hz;
};

/// Subject-level spectral signature: a function of cfg.seed only, so every
/// clip of a subject shares it. Base and secondary frequencies are drawn
/// without replacement from the grid.
inline ChannelSpectrum channel_spectrum(const SynthConfig& cfg) {
  const auto grid = frequency_grid(cfg.sample_rate_hz);
  Rng rng(mix_seed(cfg.seed, 0xF5EC));
  ChannelSpectrum s;
  if (grid.size() >= 2 * cfg.channels) {
    const auto pick = rng.sample_without_replacement(grid.size(), 2 * cfg.channels);
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      s.base_hz.push_back(grid[pick[c]]);
      s.secondary_hz.push_back(grid[pick[cfg.channels + c]]);
    }
  } else {
    // More channels than grid slots: spread evenly instead.
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      s.base_hz.push_back(grid.front() + (grid.back() - grid.front()) * static_cast<double>(c) / static_cast<double>(cfg.channels));
      s.secondary_hz.push_back(s.base_hz.back() * 1.37);
    }
  }
  return s;
}

inline Recording generate_background(const SynthConfig& cfg, Rng& rng) {
  validate(cfg);
  const auto spec = channel_spectrum(cfg);
  const std::size_t len = cfg.length, ch = cfg.channels;
  std::vector<double> phase(ch), phase2(ch);
  for (std::size_t c = 0; c < ch; ++c) {
    phase[c] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    phase2[c] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  Matrix samples(len, ch);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t l = 0; l < len; ++l) {
    const double t = static_cast<double>(l) / cfg.sample_rate_hz;
    for (std::size_t c = 0; c < ch; ++c)
      samples(l, c) = std::sin(two_pi * spec.base_hz[c] * t + phase[c]) +
                      0.4 * std::sin(two_pi * spec.secondary_hz[c] * t + phase2[c]) + cfg.noise_std * rng.normal();
    for (const auto& e : cfg.propagation_graph)
      samples(l, e.to) += cfg.coupling * e.weight * std::sin(two_pi * spec.base_hz[e.from] * t + phase[e.from]);
  }
  Recording rec = make_recording(std::move(samples), cfg.sample_rate_hz);
  return rec;
}

inline Recording generate_background(const SynthConfig& cfg) {
  Rng rng(cfg.seed);
  return generate_background(cfg, rng);
}

/// Hop distance from `source` along directed edges; nullopt when unreachable.
inline std::vector<std::optional<std::size_t>> hop_distances(const SynthConfig& cfg, std::size_t source) {
  std::vector<std::optional<std::size_t>> dist(cfg.channels);
  dist[source] = 0;
  std::queue<std::size_t> q;
  q.push(source);
  while (!q.empty()) {
    const auto u = q.front();
    q.pop();
    for (const auto& e : cfg.propagation_graph)
      if (e.from == u && !dist[e.to]) {
        dist[e.to] = *dist[u] + 1;
        q.push(e.to);
      }
  }
  return dist;
}

struct InjectionResult {
  Recording recording;
  std::size_t injected = 0;
  std::vector<std::string> warnings;
};

inline InjectionResult inject_events(const Recording& background, const SynthConfig& cfg, Rng& rng) {
  validate(cfg);
  InjectionResult res{background, 0, {}};
  Recording& rec = res.recording;
  const std::size_t len = rec.length(), ch = rec.channels();
  std::vector<double> rms(ch, 0.0);
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t l = 0; l < len; ++l) rms[c] += background.samples(l, c) * background.samples(l, c);
    rms[c] = std::sqrt(rms[c] / static_cast<double>(len));
  }
  const auto spec = channel_spectrum(cfg);
  for (std::size_t ev = 0; ev < cfg.event_count; ++ev) {
    const std::size_t seed_ch = cfg.event_seed_channels.empty()
                                    ? rng.index(ch)
                                    : cfg.event_seed_channels[rng.index(cfg.event_seed_channels.size())];
    const std::size_t burst_len = cfg.event_len_min + rng.index(cfg.event_len_max - cfg.event_len_min + 1);
    const double burst_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const auto dist = hop_distances(cfg, seed_ch);
    std::size_t max_hop = 0;
    for (const auto& d : dist)
      if (d) max_hop = std::max(max_hop, *d);
    const std::size_t span = burst_len + max_hop * cfg.propagation_delay_per_hop;
    if (span > len) {
      res.warnings.push_back("event " + std::to_string(ev) + " skipped: span " + std::to_string(span) +
                             " exceeds recording length " + std::to_string(len));
      continue;
    }
    const std::size_t onset = rng.index(len - span + 1);
    const double freq = spec.base_hz[seed_ch] + cfg.frequency_shift_hz;
    for (std::size_t c = 0; c < ch; ++c) {
      if (!dist[c]) continue;
      const std::size_t start = onset + *dist[c] * cfg.propagation_delay_per_hop;
      const double peak = 2.0 * cfg.amplitude_boost * rms[c];
      for (std::size_t k = 0; k < burst_len; ++k) {
        const double env = burst_len > 1 ? 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) /
                                                                  static_cast<double>(burst_len - 1))
                                         : 1.0;
        const double t = static_cast<double>(k) / cfg.sample_rate_hz;
        rec.samples(start + k, c) += peak * env * std::sin(2.0 * std::numbers::pi * freq * t + burst_phase);
        rec.point_labels(start + k, c) = 1;
      }
    }
    ++res.injected;
  }
  return res;
}

inline InjectionResult inject_events(const Recording& background, const SynthConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, 0xE7E7));
  return inject_events(background, cfg, rng);
}

// ---- dataset bundles ------------------------------------------------------

enum class Split { ssl_train, ssl_val, train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::ssl_train: return "ssl_train";
    case Split::ssl_val: return "ssl_val";
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  for (Split v : {Split::ssl_train, Split::ssl_val, Split::train, Split::val, Split::test})
    if (s == split_name(v)) return v;
  throw ParseError("unknown split '" + s + "'");
}

struct SplitSpec {
  std::size_t ssl_clips = 1000;
  double ssl_val_fraction = 0.2;
  std::size_t train_clips = 800;
  std::size_t val_clips = 200;
  std::size_t test_clips = 510;
  std::size_t test_pos = 1;   // test positive:negative ratio
  std::size_t test_neg = 50;
  double ssl_event_fraction = 0.3;
  double train_positive_fraction = 0.5;
};

struct Clip {
  std::string id;
  Split split = Split::train;
  bool positive = false;
  std::uint64_t seed = 0;
  Recording recording;
};

struct Dataset {
  std::string subject_id;
  std::uint64_t seed = 0;
  std::vector<Clip> clips;

  std::vector<const Clip*> split(Split s) const {
    std::vector<const Clip*> out;
    for (const auto& c : clips)
      if (c.split == s) out.push_back(&c);
    return out;
  }
};

class InfeasibleDatasetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SplitCounts {
  std::size_t ssl_train, ssl_val, train, val, test, test_positive;
};

inline SplitCounts plan_splits(const SplitSpec& s) {
  if (s.test_pos + s.test_neg == 0) throw InfeasibleDatasetError("test ratio must have a nonzero term");
  const std::size_t unit = s.test_pos + s.test_neg;
  if (s.test_clips % unit != 0) {
    throw InfeasibleDatasetError("test ratio " + std::to_string(s.test_pos) + ":" + std::to_string(s.test_neg) +
                                 " is infeasible for " + std::to_string(s.test_clips) +
                                 " clips; achievable maximum is " + std::to_string((s.test_clips / unit) * unit) +
                                 " clips (" + std::to_string(s.test_clips / unit * s.test_pos) + " positive)");
  }
  SplitCounts c{};
  c.ssl_val = static_cast<std::size_t>(std::llround(static_cast<double>(s.ssl_clips) * s.ssl_val_fraction));
  c.ssl_train = s.ssl_clips - c.ssl_val;
  c.train = s.train_clips;
  c.val = s.val_clips;
  c.test = s.test_clips;
  c.test_positive = s.test_clips / unit * s.test_pos;
  return c;
}

namespace detail {

struct ClipPlan {
  std::string id;
  Split split;
  bool positive;
};

inline std::vector<ClipPlan> plan_clips(const SynthConfig& cfg, const SplitSpec& spec) {
  const auto counts = plan_splits(spec);
  std::vector<ClipPlan> plan;
  Rng rng(mix_seed(cfg.seed, 0x5917));
  auto emit = [&](Split s, std::size_t n, std::size_t n_pos) {
    std::vector<bool> pos(n, false);
    for (std::size_t i = 0; i < n_pos && i < n; ++i) pos[i] = true;
    rng.shuffle(pos);
    for (std::size_t i = 0; i < n; ++i) {
      char buf[24];
      std::snprintf(buf, sizeof buf, "%05zu", i);
      plan.push_back({cfg.subject_id + "-" + split_name(s) + "-" + buf, s, pos[i]});
    }
  };
  auto frac = [](std::size_t n, double f) { return static_cast<std::size_t>(std::llround(static_cast<double>(n) * f)); };
  emit(Split::ssl_train, counts.ssl_train, frac(counts.ssl_train, spec.ssl_event_fraction));
  emit(Split::ssl_val, counts.ssl_val, frac(counts.ssl_val, spec.ssl_event_fraction));
  emit(Split::train, counts.train, frac(counts.train, spec.train_positive_fraction));
  emit(Split::val, counts.val, frac(counts.val, spec.train_positive_fraction));
  emit(Split::test, counts.test, counts.test_positive);
  return plan;
}

// Samples are rounded to float32 so an in-memory dataset is identical to
// one reloaded from its mbrn files.
inline void round_to_float(Recording& rec) {
  for (double& v : rec.samples.data) v = static_cast<double>(static_cast<float>(v));
}

inline Clip generate_clip(const SynthConfig& cfg, const ClipPlan& p, std::size_t index) {
  Clip clip;
  clip.id = p.id;
  clip.split = p.split;
  clip.positive = p.positive;
  clip.seed = mix_seed(cfg.seed, 1000 + index);
  Rng rng(clip.seed);
  Recording bg = generate_background(cfg, rng);
  if (!p.positive) {
    clip.recording = std::move(bg);
    round_to_float(clip.recording);
    return clip;
  }
  SynthConfig ev = cfg;
  ev.event_count = std::max<std::size_t>(cfg.event_count, 1);
  auto injected = inject_events(bg, ev, rng);
  if (injected.injected == 0)
    throw InfeasibleDatasetError("clip " + p.id + " needs an event but none fits (event span exceeds clip length " +
                                 std::to_string(cfg.length) + "); achievable maximum positive clips is 0");
  clip.recording = std::move(injected.recording);
  round_to_float(clip.recording);
  return clip;
}

}  // namespace detail

/// Generates every clip of a subject in memory. Each clip draws from its own
/// stream mix_seed(seed, clip_index), so `workers` does not affect output.
inline Dataset generate_dataset(const SynthConfig& cfg, const SplitSpec& spec, std::size_t workers = 1) {
  validate(cfg);
  const auto plan = detail::plan_clips(cfg, spec);
  Dataset ds;
  ds.subject_id = cfg.subject_id;
  ds.seed = cfg.seed;
  ds.clips.resize(plan.size());
  workers = std::max<std::size_t>(1, std::min(workers, plan.size()));
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < plan.size(); i += workers) ds.clips[i] = detail::generate_clip(cfg, plan[i], i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return ds;
}

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline nlohmann::json manifest_json(const Dataset& ds, const SynthConfig& cfg, const SplitSpec& spec) {
  nlohmann::json clips = nlohmann::json::array();
  for (const auto& c : ds.clips) {
    const auto seg = derive_segment_labels(c.recording.point_labels, static_cast<std::size_t>(cfg.sample_rate_hz));
    std::vector<std::size_t> channels;
    for (std::size_t ch = 0; ch < c.recording.channels(); ++ch)
      for (std::size_t l = 0; l < c.recording.length(); ++l)
        if (c.recording.point_labels(l, ch)) {
          channels.push_back(ch);
          break;
        }
    clips.push_back({{"id", c.id},
                     {"file", c.id + ".mbrn"},
                     {"split", split_name(c.split)},
                     {"positive", c.positive},
                     {"seed", c.seed},
                     {"labels", {{"positive_points", c.recording.point_labels.count()},
                                 {"positive_segments", seg.count()},
                                 {"channels", channels}}}});
  }
  const auto counts = plan_splits(spec);
  return {{"subject_id", ds.subject_id},
          {"seed", ds.seed},
          {"channels", cfg.channels},
          {"length", cfg.length},
          {"sample_rate_hz", cfg.sample_rate_hz},
          {"counts",
           {{"ssl_train", counts.ssl_train},
            {"ssl_val", counts.ssl_val},
            {"train", counts.train},
            {"val", counts.val},
            {"test", counts.test},
            {"test_positive", counts.test_positive}}},
          {"clips", clips}};
}

/// Writes <dir>/<clip id>.mbrn for every clip plus <dir>/manifest.json.
inline Dataset build_dataset(const SynthConfig& cfg, const SplitSpec& spec, const std::filesystem::path& dir,
                             std::size_t workers = 1) {
  Dataset ds = generate_dataset(cfg, spec, workers);
  std::filesystem::create_directories(dir);
  for (const auto& c : ds.clips) save_recording(c.recording, dir / (c.id + ".mbrn"), RecordingFormat::mbrn);
  std::ofstream(dir / "manifest.json") << manifest_json(ds, cfg, spec).dump(2) << "\n";
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  Dataset ds;
  ds.subject_id = manifest.at("subject_id").get<std::string>();
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  for (const auto& c : manifest.at("clips")) {
    Clip clip;
    clip.id = c.at("id").get<std::string>();
    clip.split = parse_split(c.at("split").get<std::string>());
    clip.positive = c.at("positive").get<bool>();
    clip.seed = c.at("seed").get<std::uint64_t>();
    clip.recording = load_recording(dir / c.at("file").get<std::string>(), RecordingFormat::mbrn);
    ds.clips.push_back(std::move(clip));
  }
  return ds;
}

/// Content digest of an in-memory dataset: ids, splits and encoded samples.
inline std::string dataset_digest(const Dataset& ds) {
  std::string bytes = ds.subject_id;
  for (const auto& c : ds.clips) bytes += c.id + split_name(c.split) + encode_mbrn(c.recording);
  return hex64(fnv1a(bytes));
}

inline std::string manifest_digest(const std::filesystem::path& dir) { return hex64(fnv1a(detail::read_file(dir / "manifest.json"))); }

}  // namespace mbrain
