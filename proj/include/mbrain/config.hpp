#pragma once

// Run configuration: INI-style text with [sections] of key = value lines.
// Every key lives in a table with its parser and canonical printer, so
// parsing, unknown-key detection and the config hash share one source.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mbrain/downstream.hpp"
#include "mbrain/synthetic.hpp"

namespace mbrain {

struct DataSettings {
  SynthConfig synth;
  SplitSpec split;
  std::vector<std::string> subjects{"s0"};
  std::size_t chain_len = 3;  // 0 = no propagation edges
  std::size_t workers = 1;
  std::uint64_t seed = 7;
};

struct SweepSettings {
  std::vector<double> lambda_values{0.1, 0.2, 0.3, 0.4, 0.5};
  std::vector<double> replace_percents;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
};

struct TheorySettings {
  std::size_t negatives = 64;
  std::size_t train_steps = 400;
  std::size_t samples_per_batch = 128;
  std::size_t eval_batches = 16;
  std::size_t seeds = 20;
  double rho_cross = 0.3;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string data_dir = "data";
  ProtocolSpec protocol{ProtocolKind::subject_dependent, {}, "s0", 1e-6, 5e-4};
  DataSettings data;
  ExperimentConfig experiment;
  SweepSettings sweep;
  TheorySettings theory;
};

/// Synthesis settings for one subject. Each subject gets its own seed, and
/// with it its own spectral signature.
inline SynthConfig subject_synth(const RunConfig& cfg, const std::string& subject) {
  SynthConfig s = cfg.data.synth;
  s.subject_id = subject;
  s.seed = mix_seed(cfg.data.seed, fnv1a(subject));
  s.propagation_graph = cfg.data.chain_len ? chain_graph(s.channels, cfg.data.chain_len) : std::vector<PropagationEdge>{};
  return s;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string unquote(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
    s = s.substr(1, s.size() - 2);
  return s;
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + " = '" + v + "': expected a number");
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] != '-') {
      const auto n = std::stoull(v, &used);
      if (used == v.size()) return n;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError(key + " = '" + v + "': expected a non-negative integer");
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + " = '" + v + "': expected true or false");
}

inline std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (const auto& x : xs) {
    if (!out.empty()) out += ",";
    if constexpr (std::is_same_v<T, std::string>)
      out += x;
    else if constexpr (std::is_floating_point_v<T>)
      out += format_number(x);
    else
      out += std::to_string(x);
  }
  return out;
}

inline std::size_t levenshtein(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

struct KeyDef {
  std::string section;  // empty = top level
  std::string name;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;  // (cfg, full key, value)
  std::function<std::string(const RunConfig&)> get;

  std::string full() const { return section.empty() ? name : section + "." + name; }
};

#define MBRAIN_NUM(SEC, NAME, FIELD)                                                              \
  KeyDef{SEC, NAME, [](RunConfig& c, const std::string& k, const std::string& v) {               \
           c.FIELD = static_cast<std::decay_t<decltype(c.FIELD)>>(to_double(k, v));              \
         },                                                                                       \
         [](const RunConfig& c) { return format_number(static_cast<double>(c.FIELD)); }}
#define MBRAIN_INT(SEC, NAME, FIELD)                                                              \
  KeyDef{SEC, NAME, [](RunConfig& c, const std::string& k, const std::string& v) {               \
           c.FIELD = static_cast<std::decay_t<decltype(c.FIELD)>>(to_u64(k, v));                 \
         },                                                                                       \
         [](const RunConfig& c) { return std::to_string(c.FIELD); }}
#define MBRAIN_BOOL(SEC, NAME, FIELD)                                                                                  \
  KeyDef{SEC, NAME, [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_bool(k, v); }, \
         [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }}

inline const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> keys = [] {
    std::vector<KeyDef> k;
    // top level
    k.push_back(MBRAIN_INT("", "seed", seed));
    k.push_back({"", "data_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.data_dir = v; },
                 [](const RunConfig& c) { return c.data_dir; }});
    // [protocol]
    k.push_back({"protocol", "kind",
                 [](RunConfig& c, const std::string&, const std::string& v) { c.protocol.kind = parse_protocol(v); },
                 [](const RunConfig& c) { return std::string(protocol_name(c.protocol.kind)); }});
    k.push_back({"protocol", "source_subjects",
                 [](RunConfig& c, const std::string&, const std::string& v) { c.protocol.source_subjects = to_list(v); },
                 [](const RunConfig& c) { return join(c.protocol.source_subjects); }});
    k.push_back({"protocol", "target_subject",
                 [](RunConfig& c, const std::string&, const std::string& v) { c.protocol.target_subject = v; },
                 [](const RunConfig& c) { return c.protocol.target_subject; }});
    // [data]
    k.push_back({"data", "subjects", [](RunConfig& c, const std::string&, const std::string& v) { c.data.subjects = to_list(v); },
                 [](const RunConfig& c) { return join(c.data.subjects); }});
    k.push_back(MBRAIN_INT("data", "seed", data.seed));
    k.push_back(MBRAIN_INT("data", "channels", data.synth.channels));
    k.push_back(MBRAIN_INT("data", "length", data.synth.length));
    k.push_back(MBRAIN_NUM("data", "sample_rate_hz", data.synth.sample_rate_hz));
    k.push_back(MBRAIN_INT("data", "event_count", data.synth.event_count));
    k.push_back(MBRAIN_INT("data", "event_len_min", data.synth.event_len_min));
    k.push_back(MBRAIN_INT("data", "event_len_max", data.synth.event_len_max));
    k.push_back(MBRAIN_INT("data", "propagation_delay_per_hop", data.synth.propagation_delay_per_hop));
    k.push_back(MBRAIN_INT("data", "chain_len", data.chain_len));
    k.push_back(MBRAIN_NUM("data", "amplitude_boost", data.synth.amplitude_boost));
    k.push_back(MBRAIN_NUM("data", "frequency_shift_hz", data.synth.frequency_shift_hz));
    k.push_back(MBRAIN_NUM("data", "noise_std", data.synth.noise_std));
    k.push_back(MBRAIN_NUM("data", "coupling", data.synth.coupling));
    k.push_back(MBRAIN_INT("data", "ssl_clips", data.split.ssl_clips));
    k.push_back(MBRAIN_NUM("data", "ssl_val_fraction", data.split.ssl_val_fraction));
    k.push_back(MBRAIN_NUM("data", "ssl_event_fraction", data.split.ssl_event_fraction));
    k.push_back(MBRAIN_INT("data", "train_clips", data.split.train_clips));
    k.push_back(MBRAIN_NUM("data", "train_positive_fraction", data.split.train_positive_fraction));
    k.push_back(MBRAIN_INT("data", "val_clips", data.split.val_clips));
    k.push_back(MBRAIN_INT("data", "test_clips", data.split.test_clips));
    k.push_back(MBRAIN_INT("data", "test_pos", data.split.test_pos));
    k.push_back(MBRAIN_INT("data", "test_neg", data.split.test_neg));
    k.push_back(MBRAIN_INT("data", "workers", data.workers));
    // [model]
    k.push_back(MBRAIN_INT("model", "window", experiment.model.window));
    k.push_back(MBRAIN_INT("model", "d", experiment.model.d));
    k.push_back(MBRAIN_INT("model", "d_ar", experiment.model.d_ar));
    k.push_back({"model", "kernels",
                 [](RunConfig& c, const std::string& key, const std::string& v) {
                   auto xs = to_list(v);
                   if (xs.size() != 3) throw ConfigError(key + " = '" + v + "': expected three comma-separated sizes");
                   for (std::size_t i = 0; i < 3; ++i) c.experiment.model.kernels[i] = to_u64(key, xs[i]);
                 },
                 [](const RunConfig& c) {
                   const auto& a = c.experiment.model.kernels;
                   return join(std::vector<std::size_t>(a.begin(), a.end()));
                 }});
    k.push_back({"model", "strides",
                 [](RunConfig& c, const std::string& key, const std::string& v) {
                   auto xs = to_list(v);
                   if (xs.size() != 3) throw ConfigError(key + " = '" + v + "': expected three comma-separated sizes");
                   for (std::size_t i = 0; i < 3; ++i) c.experiment.model.strides[i] = to_u64(key, xs[i]);
                 },
                 [](const RunConfig& c) {
                   const auto& a = c.experiment.model.strides;
                   return join(std::vector<std::size_t>(a.begin(), a.end()));
                 }});
    k.push_back(MBRAIN_INT("model", "head_hidden", experiment.model.head_hidden));
    k.push_back({"model", "pooling",
                 [](RunConfig& c, const std::string& key, const std::string& v) {
                   if (v == "mean")
                     c.experiment.model.pooling = Pooling::mean;
                   else if (v == "last")
                     c.experiment.model.pooling = Pooling::last;
                   else
                     throw ConfigError(key + " = '" + v + "': expected mean or last");
                 },
                 [](const RunConfig& c) { return std::string(c.experiment.model.pooling == Pooling::mean ? "mean" : "last"); }});
    // [ssl]
    k.push_back(MBRAIN_NUM("ssl", "theta1", experiment.pretrain.ssl.theta1));
    k.push_back(MBRAIN_NUM("ssl", "theta2", experiment.pretrain.ssl.theta2));
    k.push_back(MBRAIN_INT("ssl", "k2", experiment.pretrain.ssl.k2));
    k.push_back(MBRAIN_INT("ssl", "k1_max", experiment.pretrain.ssl.k1_max));
    k.push_back(MBRAIN_INT("ssl", "negatives", experiment.pretrain.ssl.negatives));
    k.push_back(MBRAIN_NUM("ssl", "replace_percent", experiment.pretrain.ssl.replace_percent));
    k.push_back(MBRAIN_NUM("ssl", "lambda1", experiment.pretrain.ssl.lambda1));
    k.push_back(MBRAIN_NUM("ssl", "lambda2", experiment.pretrain.ssl.lambda2));
    k.push_back(MBRAIN_BOOL("ssl", "reweight_classes", experiment.pretrain.ssl.reweight_classes));
    k.push_back(MBRAIN_INT("ssl", "epochs", experiment.ssl_epochs));
    k.push_back(MBRAIN_INT("ssl", "clips_per_batch", experiment.pretrain.clips_per_batch));
    k.push_back(MBRAIN_INT("ssl", "run_length", experiment.pretrain.run_length));
    k.push_back(MBRAIN_INT("ssl", "max_steps", experiment.pretrain.max_steps));
    k.push_back(MBRAIN_NUM("ssl", "learning_rate", experiment.pretrain.adam.learning_rate));
    k.push_back(MBRAIN_NUM("ssl", "weight_decay", experiment.pretrain.adam.weight_decay));
    // [finetune]
    k.push_back(MBRAIN_INT("finetune", "epochs", experiment.finetune.epochs));
    k.push_back(MBRAIN_INT("finetune", "clips_per_batch", experiment.finetune.clips_per_batch));
    k.push_back(MBRAIN_NUM("finetune", "trunk_lr", protocol.trunk_lr));
    k.push_back(MBRAIN_NUM("finetune", "head_lr", protocol.head_lr));
    k.push_back({"finetune", "weight_decay",
                 [](RunConfig& c, const std::string& key, const std::string& v) {
                   c.experiment.finetune.trunk.weight_decay = c.experiment.finetune.head.weight_decay = to_double(key, v);
                 },
                 [](const RunConfig& c) { return format_number(c.experiment.finetune.head.weight_decay); }});
    k.push_back(MBRAIN_INT("finetune", "head_hidden", experiment.finetune.head_hidden));
    k.push_back(MBRAIN_NUM("finetune", "positive_weight", experiment.finetune.positive_weight));
    // [sweep]
    k.push_back({"sweep", "lambda_values",
                 [](RunConfig& c, const std::string& key, const std::string& v) {
                   c.sweep.lambda_values.clear();
                   for (const auto& x : to_list(v)) c.sweep.lambda_values.push_back(to_double(key, x));
                 },
                 [](const RunConfig& c) { return join(c.sweep.lambda_values); }});
    k.push_back({"sweep", "replace_percents",
                 [](RunConfig& c, const std::string& key, const std::string& v) {
                   c.sweep.replace_percents.clear();
                   for (const auto& x : to_list(v)) c.sweep.replace_percents.push_back(to_double(key, x));
                 },
                 [](const RunConfig& c) { return join(c.sweep.replace_percents); }});
    k.push_back({"sweep", "seeds",
                 [](RunConfig& c, const std::string& key, const std::string& v) {
                   c.sweep.seeds.clear();
                   for (const auto& x : to_list(v)) c.sweep.seeds.push_back(to_u64(key, x));
                 },
                 [](const RunConfig& c) { return join(c.sweep.seeds); }});
    // [theory]
    k.push_back(MBRAIN_INT("theory", "negatives", theory.negatives));
    k.push_back(MBRAIN_INT("theory", "train_steps", theory.train_steps));
    k.push_back(MBRAIN_INT("theory", "samples_per_batch", theory.samples_per_batch));
    k.push_back(MBRAIN_INT("theory", "eval_batches", theory.eval_batches));
    k.push_back(MBRAIN_INT("theory", "seeds", theory.seeds));
    k.push_back(MBRAIN_NUM("theory", "rho_cross", theory.rho_cross));
    return k;
  }();
  return keys;
}

#undef MBRAIN_NUM
#undef MBRAIN_INT
#undef MBRAIN_BOOL

/// Closest known key by edit distance, or empty when nothing is close.
inline std::string suggest_key(const std::string& section, const std::string& name) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& k : key_table()) {
    std::size_t d = levenshtein(name, k.name);
    if (k.section != section) ++d;  // prefer keys from the same section
    if (d < best_d) {
      best_d = d;
      best = k.section == section ? k.name : k.full();
    }
  }
  return best_d <= std::max<std::size_t>(3, name.size() / 2 + 1) ? best : std::string{};
}

}  // namespace detail

/// Cross-module constraints; throws ConfigError naming the key.
inline void validate(const RunConfig& c) {
  const auto& m = c.experiment.model;
  auto fail = [](const std::string& key, const std::string& value, const std::string& rule) {
    throw ConfigError(key + " = " + value + " violates " + rule);
  };
  if (m.channels != c.data.synth.channels) fail("model channels", std::to_string(m.channels), "equal to data.channels");
  validate(m);
  const std::size_t t = encoded_length(m);
  const auto& s = c.experiment.pretrain.ssl;
  if (s.k1_max != m.k1_max) fail("ssl.k1_max", std::to_string(s.k1_max), "agreement with the model");
  validate_lambdas(s.lambda1, s.lambda2);
  if (s.k2 + s.k1_max + 1 > t)
    fail("ssl.k2", std::to_string(s.k2), "K2+k1_max+1 <= T (k1_max=" + std::to_string(s.k1_max) + ", T=" + std::to_string(t) + ")");
  validate(s, t);
  if (c.data.synth.length < m.window)
    fail("data.length", std::to_string(c.data.synth.length), "length >= model.window (" + std::to_string(m.window) + ")");
  SynthConfig probe = c.data.synth;
  probe.propagation_graph = c.data.chain_len ? chain_graph(probe.channels, c.data.chain_len) : std::vector<PropagationEdge>{};
  try {
    validate(probe);
    plan_splits(c.data.split);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("[data] ") + e.what());
  }
  if (c.data.subjects.empty()) fail("data.subjects", "''", "at least one subject");
  if (c.data.workers == 0) fail("data.workers", "0", "workers >= 1");
  plan_protocol(c.protocol);
  if (!(c.protocol.trunk_lr >= 0.0)) fail("finetune.trunk_lr", format_number(c.protocol.trunk_lr), "trunk_lr >= 0");
  if (!(c.protocol.head_lr > 0.0)) fail("finetune.head_lr", format_number(c.protocol.head_lr), "head_lr > 0");
  if (c.experiment.ssl_epochs == 0 && c.experiment.pretrain.max_steps == 0)
    fail("ssl.epochs", "0", "epochs >= 1");
  if (c.sweep.seeds.empty()) fail("sweep.seeds", "''", "at least one seed");
  if (c.theory.negatives < 2) fail("theory.negatives", std::to_string(c.theory.negatives), "N >= 2");
  if (c.theory.samples_per_batch < c.theory.negatives)
    fail("theory.samples_per_batch", std::to_string(c.theory.samples_per_batch), "samples_per_batch >= negatives");
  if (!(std::abs(c.theory.rho_cross) < 1.0)) fail("theory.rho_cross", format_number(c.theory.rho_cross), "|rho_cross| < 1");
}

/// Sorted "key=value" lines over every key that can change results. The
/// seed is reported next to the hash; data_dir and workers do not matter.
inline std::string canonical_config(const RunConfig& c) {
  std::vector<std::string> lines;
  for (const auto& k : detail::key_table())
    if (k.full() != "seed" && k.full() != "data_dir" && k.full() != "data.workers") lines.push_back(k.full() + "=" + k.get(c));
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a(canonical_config(c))); }

/// Parses config text; unknown keys are rejected with a suggestion.
inline RunConfig parse_config_text(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  RunConfig cfg;
  auto apply = [&](const std::string& section, const std::string& name, const std::string& raw) {
    for (const auto& k : detail::key_table())
      if (k.section == section && k.name == name) {
        k.set(cfg, k.full(), detail::unquote(raw));
        return;
      }
    const std::string full = section.empty() ? name : section + "." + name;
    const std::string hint = detail::suggest_key(section, name);
    throw ConfigError("unknown key '" + full + "'" + (hint.empty() ? std::string{} : "; did you mean '" + hint + "'?"));
  };
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      apply("", name, node.data());
      continue;
    }
    for (const auto& [key, leaf] : node) apply(name, key, leaf.data());
  }
  cfg.experiment.model.channels = cfg.data.synth.channels;
  cfg.experiment.model.k1_max = cfg.experiment.pretrain.ssl.k1_max;
  cfg.experiment.finetune.trunk.learning_rate = cfg.protocol.trunk_lr;
  cfg.experiment.finetune.head.learning_rate = cfg.protocol.head_lr;
  cfg.experiment.seed = cfg.seed;
  validate(cfg);
  cfg.experiment.config_hash = config_hash(cfg);
  return cfg;
}

inline RunConfig parse_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config_text(detail::read_file(path));
}

/// Applies a seed override after parsing (the hash does not change).
inline void set_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.experiment.seed = seed;
}

}  // namespace mbrain
