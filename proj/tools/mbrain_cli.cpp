// mbrain command-line driver. One verb per lifecycle stage; every verb
// reads the same config file and writes into the run directory (--out).
//
// Exit codes: 0 success, 2 validation error, 3 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "mbrain/mbrain.hpp"

namespace fs = std::filesystem;
using namespace mbrain;
using nlohmann::json;

namespace {

struct Options {
  std::string verb;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::string variant;
  std::string export_what;
  bool allow_hash_mismatch = false;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kExports{"coarse", "fine", "delayed", "shift_report", "learned_graph_edges"};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Hash of the data-generation keys only; a bundle on disk is reused when
/// this matches.
std::string data_fingerprint(const RunConfig& cfg) {
  std::string lines;
  std::istringstream in(canonical_config(cfg));
  for (std::string l; std::getline(in, l);)
    if (l.rfind("data.", 0) == 0) lines += l + "\n";
  return hex64(fnv1a(lines));
}

Dataset synth_subject(const RunConfig& cfg, const std::string& subject) {
  const fs::path dir = fs::path(cfg.data_dir) / subject;
  Dataset ds = build_dataset(subject_synth(cfg, subject), cfg.data.split, dir, cfg.data.workers);
  write_json(dir / "synth.json", {{"data_fingerprint", data_fingerprint(cfg)}, {"digest", dataset_digest(ds)}});
  return ds;
}

/// Loads a subject bundle, generating it first when absent.
Dataset ensure_subject(const RunConfig& cfg, const std::string& subject) {
  const fs::path dir = fs::path(cfg.data_dir) / subject;
  if (!fs::exists(dir / "manifest.json")) {
    std::cerr << "no bundle at " << dir.string() << "; generating\n";
    return synth_subject(cfg, subject);
  }
  const std::string want = data_fingerprint(cfg);
  std::string have = "none";
  if (fs::exists(dir / "synth.json")) have = json::parse(detail::read_file(dir / "synth.json")).value("data_fingerprint", "none");
  if (have != want)
    throw ValidationError("bundle " + dir.string() + " was generated with data fingerprint " + have +
                          " but the config gives " + want + "; rerun `synth`");
  return load_dataset(dir);
}

std::map<std::string, Dataset> load_protocol_data(const RunConfig& cfg) {
  const ProtocolPlan plan = plan_protocol(cfg.protocol);
  std::set<std::string> names(plan.ssl_subjects.begin(), plan.ssl_subjects.end());
  names.insert(plan.finetune_subjects.begin(), plan.finetune_subjects.end());
  names.insert(plan.test_subject);
  std::map<std::string, Dataset> data;
  for (const auto& n : names) data.emplace(n, ensure_subject(cfg, n));
  return data;
}

ExperimentConfig experiment_for(const RunConfig& cfg, const Options& opt) {
  ExperimentConfig e = cfg.experiment;
  if (!opt.variant.empty()) std::tie(e.model, e.pretrain.tasks) = variant_setup(parse_variant(opt.variant), e.model);
  return e;
}

ParamList detection_params(const MBrainModel& model, const DetectionHead& head) {
  ParamList p = model.all_params();
  for (auto& item : head.params().items) p.items.push_back(item);
  return p;
}

CheckpointHeader header_for(const RunConfig& cfg, std::size_t step, const std::string& stage, const Options& opt) {
  CheckpointHeader h;
  h.step = step;
  h.seed = cfg.seed;
  h.config_hash = cfg.experiment.config_hash;
  h.extra = {{"stage", stage}, {"variant", opt.variant.empty() ? "full" : opt.variant}};
  return h;
}

CheckpointHeader load_stage(const fs::path& path, const ParamList& params, const RunConfig& cfg, const Options& opt,
                            const std::string& producer) {
  if (!fs::exists(path)) throw ValidationError("missing " + path.string() + "; run `" + producer + "` first");
  return load_checkpoint(path, params, {cfg.experiment.config_hash, opt.allow_hash_mismatch});
}

json matrix_json(const Matrix& m, const std::vector<std::string>& names) {
  return {{"names", names}, {"rows", m.rows}, {"cols", m.cols}, {"data", m.data}};
}

Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  m.data = j.at("data").get<std::vector<double>>();
  return m;
}

SegmentSeries pooled_series(const std::vector<SegmentedClip>& clips) {
  SegmentSeries s;
  for (const auto& c : clips) s.segments.insert(s.segments.end(), c.segments.begin(), c.segments.end());
  return s;
}

/// Graph matrices of the first SSL clip, kept for `export`.
void save_artifacts(const fs::path& out, const MBrainModel& model, const ProtocolInputs& in, const RunConfig& cfg,
                    const std::vector<std::string>& names) {
  const fs::path dir = out / "artifacts";
  const SegmentedClip& clip = in.corpus.clips.front();
  const Matrix& prior = in.corpus.priors[in.corpus.prior_of.front()];
  write_json(dir / "coarse.json", matrix_json(prior, names));
  const double theta1 = cfg.experiment.pretrain.ssl.theta1;
  const auto graphs = learned_graphs(model, clip.segments, prior, theta1, model.steps());
  json fine = matrix_json(graphs.front().a_fine, names);
  fine["a_t"] = matrix_json(graphs.front().a_t, names);
  fine["theta1"] = theta1;
  write_json(dir / "fine.json", fine);
  const std::size_t k2 = cfg.experiment.pretrain.ssl.k2;
  if (clip.segments.size() > k2) write_json(dir / "delayed.json", matrix_json(delayed_correlation_matrix(clip.segments, 0, 0, k2), names));
  if (!in.test.empty()) {
    const auto shift = correlation_shift_report(pooled_series(in.corpus.clips), pooled_series(in.test));
    write_json(dir / "shift_report.json", matrix_json(shift.difference, names));
  }
}

int cmd_synth(const RunConfig& cfg, const Options& opt) {
  std::set<std::string> subjects(cfg.data.subjects.begin(), cfg.data.subjects.end());
  const ProtocolPlan plan = plan_protocol(cfg.protocol);
  subjects.insert(plan.ssl_subjects.begin(), plan.ssl_subjects.end());
  subjects.insert(plan.test_subject);
  json report{{"config_hash", cfg.experiment.config_hash}, {"seed", cfg.seed}, {"subjects", json::object()}};
  for (const auto& s : subjects) {
    const Dataset ds = synth_subject(cfg, s);
    report["subjects"][s] = {{"dir", (fs::path(cfg.data_dir) / s).string()}, {"clips", ds.clips.size()},
                             {"digest", dataset_digest(ds)}};
    std::cout << s << ": " << ds.clips.size() << " clips -> " << (fs::path(cfg.data_dir) / s).string() << "\n";
  }
  write_json(fs::path(opt.out) / "synth_report.json", report);
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, const Options& opt) {
  const ExperimentConfig ec = experiment_for(cfg, opt);
  const auto data = load_protocol_data(cfg);
  const ProtocolInputs in = protocol_inputs(cfg.protocol, ec.model.window, data);
  const fs::path out(opt.out);
  fs::create_directories(out);
  std::ofstream log(out / "pretrain_log.jsonl");
  MBrainModel model(ec.model, ec.seed);
  ExperimentReport report;
  report.name = "pretrain";
  report.config_hash = ec.config_hash;
  report.seeds = {ec.seed};
  for (const auto& id : in.plan.ssl_subjects) report.manifest_digests[id] = dataset_digest(data.at(id));
  const fs::path ckpt = out / "pretrain.ckpt";
  pretrain_model(model, in.corpus, ec, report, &log, [&](const EpochLoss& e, Pretrainer& trainer) {
    save_checkpoint(ckpt, model.all_params(), header_for(cfg, trainer.step_count(), "pretrain", opt));
    trainer.set_last_good_checkpoint(ckpt.string());
    std::cout << to_json(e).dump() << "\n";
  });
  save_checkpoint(ckpt, model.all_params(), header_for(cfg, report.ssl_stream.size(), "pretrain", opt));
  save_artifacts(out, model, in, cfg, data.at(in.plan.test_subject).clips.front().recording.channel_names);
  write_json(out / "pretrain_report.json", to_json(report));
  return 0;
}

int cmd_finetune(const RunConfig& cfg, const Options& opt) {
  const ExperimentConfig ec = experiment_for(cfg, opt);
  const auto data = load_protocol_data(cfg);
  const ProtocolInputs in = protocol_inputs(cfg.protocol, ec.model.window, data);
  const fs::path out(opt.out);
  MBrainModel model(ec.model, ec.seed);
  load_stage(out / "pretrain.ckpt", model.all_params(), cfg, opt, "pretrain");
  DetectionHead head = make_detection_head(model, ec);
  ExperimentReport report;
  report.name = "finetune";
  report.config_hash = ec.config_hash;
  report.seeds = {ec.seed};
  finetune_stage(model, head, in.train, ec, report);
  audit_isolation(cfg.protocol.kind, report.manifest, data.at(in.plan.test_subject));
  {
    std::ofstream log(out / "finetune_log.jsonl");
    for (std::size_t e = 0; e < report.finetune_losses.size(); ++e)
      log << json{{"epoch", e}, {"loss", report.finetune_losses[e]}, {"seed", ec.seed}}.dump() << "\n";
  }
  save_checkpoint(out / "finetune.ckpt", detection_params(model, head),
                  header_for(cfg, report.finetune_losses.size(), "finetune", opt));
  write_json(out / "finetune_report.json", to_json(report));
  std::cout << "trunk drift " << report.trunk_drift << ", head drift " << report.head_drift << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const Options& opt) {
  const ExperimentConfig ec = experiment_for(cfg, opt);
  const auto data = load_protocol_data(cfg);
  const ProtocolInputs in = protocol_inputs(cfg.protocol, ec.model.window, data);
  const fs::path out(opt.out);
  MBrainModel model(ec.model, ec.seed);
  DetectionHead head = make_detection_head(model, ec);
  load_stage(out / "finetune.ckpt", detection_params(model, head), cfg, opt, "finetune");
  const MetricsReport m = evaluate_detection(model, head, in.test);
  json j = to_json(m);
  j["config_hash"] = ec.config_hash;
  j["seed"] = ec.seed;
  j["test_subject"] = in.plan.test_subject;
  write_json(out / "metrics.json", j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const Options& opt) {
  std::vector<Variant> variants;
  if (opt.variant.empty())
    for (const auto& [v, n] : variant_names()) variants.push_back(v);
  else
    variants.push_back(parse_variant(opt.variant));
  const Dataset data = ensure_subject(cfg, cfg.protocol.target_subject);
  const fs::path dir = fs::path(opt.out) / "ablation";
  fs::create_directories(dir);
  json summary = json::object();
  for (Variant v : variants) {
    std::ofstream log(dir / (std::string(variant_name(v)) + "_log.jsonl"));
    const ExperimentReport r = run_ablation(v, cfg.experiment, data, &log);
    write_json(dir / (std::string(variant_name(v)) + ".json"), to_json(r));
    summary[variant_name(v)] = r.metrics ? to_json(*r.metrics) : json(nullptr);
    std::printf("%-14s F1 %.4f  F2 %.4f\n", variant_name(v), r.metrics ? r.metrics->f1 : 0.0, r.metrics ? r.metrics->f2 : 0.0);
  }
  write_json(dir / "summary.json", {{"config_hash", cfg.experiment.config_hash}, {"seed", cfg.seed}, {"variants", summary}});
  return 0;
}

int cmd_sweep(const RunConfig& cfg, const Options& opt) {
  const Dataset data = ensure_subject(cfg, cfg.protocol.target_subject);
  const SweepGrid grid{cfg.sweep.lambda_values.empty() ? std::vector<std::pair<double, double>>{} : lambda_grid(cfg.sweep.lambda_values),
                       cfg.sweep.replace_percents, cfg.sweep.seeds};
  const auto cells = sweep_hyperparams(grid, experiment_for(cfg, opt), data);
  json j = json::array();
  for (const auto& c : cells) {
    j.push_back(to_json(c));
    std::printf("lambda1 %.2f lambda2 %.2f r %5.1f  F2 %.4f +- %.4f\n", c.lambda1, c.lambda2, c.replace_percent, c.mean, c.stddev);
  }
  write_json(fs::path(opt.out) / "sweep.json", {{"config_hash", cfg.experiment.config_hash}, {"cells", j}});
  return 0;
}

int cmd_verify_theory(const RunConfig& cfg, const Options& opt) {
  TheorySuiteSettings st;
  st.critic.negatives = cfg.theory.negatives;
  st.critic.train_steps = cfg.theory.train_steps;
  st.critic.eval_batches = cfg.theory.eval_batches;
  st.samples_per_batch = cfg.theory.samples_per_batch;
  st.seeds = cfg.theory.seeds;
  st.rho_cross = cfg.theory.rho_cross;
  const TheorySuite t = verify_theory(st, cfg.seed);
  std::printf("%-34s %-8s %s\n", "check", "result", "detail");
  for (const auto& c : t.bound_cases) {
    char name[64], detail[64];
    std::snprintf(name, sizeof name, "bound n=%zu rho=%.1f", c.n_channels, c.rho);
    std::snprintf(detail, sizeof detail, "%zu/%zu runs, worst margin %.4f", c.satisfied, c.runs, c.worst_margin);
    std::printf("%-34s %-8s %s\n", name, c.satisfied == c.runs ? "PASS" : "FAIL", detail);
  }
  std::printf("%-34s %-8s gain %.4f +- %.4f\n", "neighbors help (rho_cross=0.8)", t.gain_ok ? "PASS" : "FAIL", t.strong.mi_gain,
              t.strong.mi_gain_stderr);
  std::printf("%-34s %-8s gain %.4f +- %.4f\n", "neighbors neutral (rho_cross=0)", t.agree_ok ? "PASS" : "FAIL", t.none.mi_gain,
              t.none.mi_gain_stderr);
  json j = to_json(t);
  j["config_hash"] = cfg.experiment.config_hash;
  j["seed"] = cfg.seed;
  write_json(fs::path(opt.out) / "theory.json", j);
  return t.bound_ok && t.gain_ok && t.agree_ok ? 0 : 3;
}

int cmd_export(const RunConfig&, const Options& opt) {
  const fs::path dir = fs::path(opt.out) / "artifacts";
  auto source = [](const std::string& what) { return what == "learned_graph_edges" ? std::string("fine") : what; };
  std::vector<std::string> available;
  for (const auto& w : kExports)
    if (fs::exists(dir / (source(w) + ".json"))) available.push_back(w);
  auto listing = [&] {
    std::string s;
    for (const auto& a : available) s += (s.empty() ? "" : ", ") + a;
    return s.empty() ? std::string("none (run `pretrain` first)") : s;
  };
  if (std::find(kExports.begin(), kExports.end(), opt.export_what) == kExports.end())
    throw ValidationError("unknown export '" + opt.export_what + "'; available: " + listing());
  if (std::find(available.begin(), available.end(), opt.export_what) == available.end())
    throw std::runtime_error("no " + opt.export_what + " artifact in " + dir.string() + "; available: " + listing());
  const json j = json::parse(detail::read_file(dir / (source(opt.export_what) + ".json")));
  const auto names = j.at("names").get<std::vector<std::string>>();
  const fs::path target = fs::path(opt.out) / "export" / (opt.export_what + ".csv");
  if (opt.export_what == "learned_graph_edges")
    write_text(target, edge_list_csv(matrix_from_json(j.at("a_t")), names));
  else
    write_text(target, matrix_csv(matrix_from_json(j), names));
  std::cout << target.string() << "\n";
  return 0;
}

int dispatch(const Options& opt) {
  RunConfig cfg = opt.config.empty() ? parse_config_text("") : parse_config(opt.config);
  if (opt.seed) set_seed(cfg, *opt.seed);
  if (opt.verb == "synth") return cmd_synth(cfg, opt);
  if (opt.verb == "pretrain") return cmd_pretrain(cfg, opt);
  if (opt.verb == "finetune") return cmd_finetune(cfg, opt);
  if (opt.verb == "evaluate") return cmd_evaluate(cfg, opt);
  if (opt.verb == "ablate") return cmd_ablate(cfg, opt);
  if (opt.verb == "sweep") return cmd_sweep(cfg, opt);
  if (opt.verb == "verify-theory") return cmd_verify_theory(cfg, opt);
  if (opt.verb == "export") return cmd_export(cfg, opt);
  throw ValidationError("unknown verb " + opt.verb);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mbrain: multi-channel self-supervised seizure detection on synthetic SEEG"};
  app.require_subcommand(1);
  app.fallthrough();
  Options opt;
  app.add_option("--config", opt.config, "config file (INI sections; empty = defaults)");
  app.add_option("--seed", opt.seed, "seed override (not part of the config hash)");
  app.add_option("--out", opt.out, "run directory")->capture_default_str();
  app.add_option("--variant", opt.variant, "ablation variant");
  app.add_option("--export", opt.export_what, "artifact to export as CSV");
  app.add_flag("--allow-hash-mismatch", opt.allow_hash_mismatch, "load checkpoints written under another config hash");
  const std::pair<const char*, const char*> verbs[] = {
      {"synth", "generate subject recordings and split manifests"},
      {"pretrain", "self-supervised pretraining, writes the trunk checkpoint"},
      {"finetune", "train the detection head on labeled clips"},
      {"evaluate", "score the test split, writes metrics.json"},
      {"ablate", "pretrain, fine-tune and evaluate one --variant"},
      {"sweep", "lambda grid search over seeds"},
      {"verify-theory", "check the multi-channel bound on the Gaussian lab"},
      {"export", "write an --export artifact as CSV (coarse, fine, delayed, shift_report, learned_graph_edges)"}};
  for (const auto& [verb, help] : verbs) app.add_subcommand(verb, help)->callback([&opt, v = verb] { opt.verb = v; });
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (opt.verb == "export" && opt.export_what.empty()) {
    std::cerr << "error: export needs --export WHAT (coarse, fine, delayed, shift_report, learned_graph_edges)\n";
    return 2;
  }
  try {
    return dispatch(opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigHashMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IsolationError& e) {
    std::cerr << "isolation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
