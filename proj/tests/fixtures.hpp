#pragma once

// Small end-to-end fixtures: a 3-channel subject with 60-sample windows.

#include "mbrain/downstream.hpp"

namespace mbrain::testing {

inline SynthConfig tiny_synth(std::uint64_t seed = 1, const std::string& subject = "s0") {
  SynthConfig c;
  c.subject_id = subject;
  c.channels = 3;
  c.length = 600;  // 10 windows of 60
  c.sample_rate_hz = 60;
  c.event_len_min = 120;
  c.event_len_max = 180;
  c.propagation_delay_per_hop = 30;
  c.propagation_graph = chain_graph(3, 3);
  c.seed = seed;
  return c;
}

inline SplitSpec tiny_splits() {
  SplitSpec s;
  s.ssl_clips = 4;
  s.ssl_val_fraction = 0.0;
  s.train_clips = 4;
  s.val_clips = 0;
  s.test_clips = 3;
  s.test_pos = 1;
  s.test_neg = 2;
  return s;
}

inline ExperimentConfig tiny_experiment(std::uint64_t seed = 0) {
  ExperimentConfig e;
  e.model.channels = 3;
  e.model.window = 60;
  e.model.d = 4;
  e.model.d_ar = 5;
  e.model.k1_max = 2;
  e.model.head_hidden = 6;
  e.pretrain.ssl.k2 = 2;
  e.pretrain.ssl.k1_max = 2;
  e.pretrain.ssl.negatives = 8;
  e.pretrain.clips_per_batch = 2;
  e.finetune.epochs = 2;
  e.finetune.clips_per_batch = 2;
  e.seed = seed;
  e.config_hash = "tiny";
  return e;
}

inline Dataset tiny_dataset(std::uint64_t seed = 1, const std::string& subject = "s0") {
  return generate_dataset(tiny_synth(seed, subject), tiny_splits());
}

}  // namespace mbrain::testing
