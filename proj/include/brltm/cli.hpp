#pragma once

// Command-line front end. Exit codes: 0 success, 2 usage error, 3 data error
// (bad input, config, format or incompatible files), 4 numeric failure.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "brltm/cohort.hpp"
#include "brltm/error.hpp"
#include "brltm/hash.hpp"
#include "brltm/interpret.hpp"
#include "brltm/metrics.hpp"
#include "brltm/model.hpp"
#include "brltm/optim.hpp"
#include "brltm/sequencer.hpp"
#include "brltm/trainer.hpp"
#include "brltm/vocab.hpp"

namespace brltm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

inline constexpr std::string_view kVersion = "1.0.0";

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// Options shared by every subcommand.
struct Common {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::string preset = "desk";
};

// Run configuration file for the model-facing subcommands:
//   {"model": {...}, "train": {...}, "sentinels": [{"m": "DIAG", "c": "296.20"}, ...]}
// Every key is optional; unknown keys are rejected.
inline std::vector<EventCode> default_sentinels() {
  const auto s = CohortConfig{}.sentinel_depression_codes;
  return {s.begin(), s.end()};
}

struct RunConfig {
  nlohmann::json model = nlohmann::json::object();
  TrainConfig train;
  std::vector<EventCode> sentinels = default_sentinels();
};

inline nlohmann::json read_json_file(const std::string& path) {
  const auto text = read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path, TrainConfig train_base) {
  RunConfig rc;
  rc.train = train_base;
  if (path.empty()) return rc;
  const auto j = read_json_file(path);
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  detail::check_keys(j, {"model", "train", "sentinels"}, "run config");
  if (j.contains("model")) rc.model = j.at("model");
  if (j.contains("train")) rc.train = train_config_from_json(j.at("train"), train_base);
  if (j.contains("sentinels")) {
    rc.sentinels.clear();
    try {
      for (const auto& e : j.at("sentinels")) rc.sentinels.push_back(event_from_json(e));
    } catch (const ParseError& e) {
      throw ConfigError(e.what());
    }
  }
  return rc;
}

inline ojson model_dims(const ModelConfig& c) {
  return {{"preset", c.preset},       {"vocab_size", c.vocab_size},
          {"hidden_size", c.hidden_size}, {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},     {"intermediate_size", c.intermediate_size},
          {"max_len", c.max_len}};
}

// Reproduction record written next to every output. Paths are stored by file
// name only so that reruns in another directory give identical manifests.
class Manifest {
 public:
  explicit Manifest(std::string command) { j_["command"] = std::move(command); j_["version"] = std::string(kVersion); }

  void seed(std::uint64_t s) { j_["seed"] = s; }
  void config(const ojson& resolved) {
    j_["config"] = resolved;
    j_["config_hash"] = sha256_hex(resolved.dump());
  }
  void input(const std::string& role, const std::string& path) {
    j_["inputs"][role] = {{"file", fs::path(path).filename().string()}, {"sha256", sha256_file(path)}};
  }
  void output(const std::string& role, const std::string& path) {
    j_["outputs"][role] = {{"file", fs::path(path).filename().string()}, {"sha256", sha256_file(path)}};
  }
  void set(const std::string& key, ojson value) { j_[key] = std::move(value); }
  void save(const std::string& path) const { write_file(path, j_.dump(2) + "\n"); }

 private:
  ojson j_;
};

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

inline std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

inline const PatientRecord& find_patient(const std::vector<PatientRecord>& records, const std::string& id) {
  for (const auto& r : records)
    if (r.id == id) return r;
  throw ValidationError("no patient with id '" + id + "'");
}

inline std::string presets_help() {
  std::string s = "Model presets (hidden/layers/heads/intermediate):\n";
  for (const auto& p : kPresets) {
    s += "  " + std::string(p.name) + ": " + std::to_string(p.hidden) + "/" + std::to_string(p.layers) + "/" +
         std::to_string(p.heads) + "/" + std::to_string(p.intermediate) + "\n";
  }
  s += "Prediction windows: 14d, 91d, 182d, 365d\n";
  return s;
}

inline ModelConfig resolve_model(const Common& c, const RunConfig& rc, std::size_t vocab_size) {
  auto cfg = model_config_from_json(rc.model, preset_config(c.preset, vocab_size));
  cfg.vocab_size = vocab_size;
  cfg.validate();
  return cfg;
}

// Training overrides given on the command line.
struct TrainFlags {
  std::optional<std::size_t> epochs, batch_size, splits;
  std::optional<double> lr;

  void add_to(CLI::App* app, bool with_splits) {
    app->add_option("--epochs", epochs, "Override the number of epochs");
    app->add_option("--batch-size", batch_size, "Override the minibatch size");
    app->add_option("--lr", lr, "Override the peak learning rate");
    if (with_splits) app->add_option("--splits", splits, "Override the number of random splits");
  }
  void apply(TrainConfig& t, const Common& c) const {
    if (epochs) t.epochs = *epochs;
    if (batch_size) t.batch_size = *batch_size;
    if (lr) t.peak_lr = *lr;
    if (splits) t.n_splits = *splits;
    if (c.seed) t.seed = *c.seed;
    t.validate();
  }
};

inline ojson resolved_run_config(const ModelConfig& m, const TrainConfig& t, const std::vector<EventCode>& sentinels) {
  ojson s = ojson::array();
  for (const auto& e : sentinels) s.push_back(to_json(e));
  return {{"model", to_json(m)}, {"train", to_json(t)}, {"sentinels", s}};
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_gen_data(const Common& c, const std::string& out, std::ostream& log) {
  CohortConfig cfg;
  if (!c.config_path.empty()) cfg = cohort_config_from_json(read_json_file(c.config_path));
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  const auto records = generate_cohort(cfg);
  write_records(records, out);
  Manifest m("gen-data");
  m.seed(cfg.seed);
  m.config(to_json(cfg));
  if (!c.config_path.empty()) m.input("config", c.config_path);
  m.output("records", out);
  m.set("n_records", records.size());
  m.save(out + ".manifest.json");
  log << "wrote " << records.size() << " records to " << out << "\n";
  return kExitOk;
}

inline int cmd_build_vocab(const Common& c, const std::string& records_path, const std::string& out,
                           std::ostream& log) {
  const auto records = load_records(records_path);
  const auto vocab = Vocabulary::build(records);
  vocab.save(out);
  const auto report = vocab.report().to_json();
  Manifest m("build-vocab");
  m.seed(c.seed.value_or(0));
  m.config(ojson::object());
  m.input("records", records_path);
  m.output("vocab", out);
  m.set("vocab_hash", vocab.content_hash());
  m.set("report", report);
  m.save(out + ".manifest.json");
  log << report.dump(2) << "\n";
  return kExitOk;
}

struct ModelIo {
  std::string records, vocab, checkpoint, out_dir;
};

inline int cmd_pretrain(const Common& c, const ModelIo& io, const TrainFlags& flags, std::ostream& log) {
  auto rc = load_run_config(c.config_path, TrainConfig::pretraining());
  flags.apply(rc.train, c);
  const auto records = load_records(io.records);
  const auto vocab = Vocabulary::load(io.vocab);
  const auto model_cfg = resolve_model(c, rc, vocab.size());
  ensure_dir(io.out_dir);
  const auto res = pretrain<float>(records, vocab, model_cfg, rc.train);
  const auto best = join(io.out_dir, "best.ckpt"), last = join(io.out_dir, "last.ckpt");
  const auto metrics = join(io.out_dir, "metrics.csv");
  save_checkpoint(res.best, vocab.content_hash(), best);
  save_checkpoint(res.last, vocab.content_hash(), last);
  res.log.save(metrics);

  Manifest m("pretrain");
  m.seed(rc.train.seed);
  m.config(resolved_run_config(model_cfg, rc.train, rc.sentinels));
  if (!c.config_path.empty()) m.input("config", c.config_path);
  m.input("records", io.records);
  m.input("vocab", io.vocab);
  m.output("best_checkpoint", best);
  m.output("last_checkpoint", last);
  m.output("metrics", metrics);
  m.set("vocab_hash", vocab.content_hash());
  m.set("model", model_dims(model_cfg));
  m.set("best_step", res.best_step);
  m.set("best_held_out_precision", res.best_precision ? ojson(*res.best_precision) : ojson(nullptr));
  m.set("total_steps", res.total_steps);
  m.save(join(io.out_dir, "manifest.json"));
  log << "pretrained " << res.total_steps << " steps; best step " << res.best_step << "\n";
  return kExitOk;
}

// Records eligible under every standard window, so that all four windows see
// the same patients; `--window-only` restricts eligibility to the one window.
inline std::vector<PatientRecord> finetune_cohort(const std::vector<PatientRecord>& records, const WindowSpec& w,
                                                  const std::vector<EventCode>& sentinels, bool window_only) {
  return window_only ? eligibility_filter(records, {w}, sentinels)
                     : eligibility_filter(records, standard_windows(), sentinels);
}

inline int cmd_finetune(const Common& c, const ModelIo& io, const TrainFlags& flags, const std::string& window,
                        bool window_only, std::ostream& log) {
  auto rc = load_run_config(c.config_path, TrainConfig::finetuning());
  flags.apply(rc.train, c);
  const auto spec = WindowSpec::parse(window);
  if (!is_standard_window(spec)) throw ConfigError("window must be one of 14d, 91d, 182d, 365d");
  const auto vocab = Vocabulary::load(io.vocab);
  const auto records = finetune_cohort(load_records(io.records), spec, rc.sentinels, window_only);

  ModelParams<float> init;
  if (!io.checkpoint.empty()) {
    init = load_checkpoint<float>(io.checkpoint, vocab.content_hash()).params;
    if (!rc.model.empty()) throw ConfigError("model settings come from the checkpoint; drop \"model\" from the config");
  } else {
    init = init_params<float>(resolve_model(c, rc, vocab.size()), rc.train.seed);
  }
  ensure_dir(io.out_dir);
  const auto res = finetune(init, records, vocab, spec, rc.sentinels, rc.train);
  const auto model = join(io.out_dir, "model.ckpt"), metrics = join(io.out_dir, "metrics.csv");
  const auto report = join(io.out_dir, "report.json");
  save_checkpoint(res.model, vocab.content_hash(), model);
  res.log.save(metrics);
  auto rep = report_json(res);
  rep["window"] = spec.name();
  rep["n_records"] = records.size();
  write_file(report, rep.dump(2) + "\n");

  Manifest m("finetune");
  m.seed(rc.train.seed);
  auto cfg = resolved_run_config(init.config, rc.train, rc.sentinels);
  cfg["window"] = spec.name();
  cfg["window_only"] = window_only;
  m.config(cfg);
  if (!c.config_path.empty()) m.input("config", c.config_path);
  if (!io.checkpoint.empty()) m.input("checkpoint", io.checkpoint);
  m.input("records", io.records);
  m.input("vocab", io.vocab);
  m.output("model", model);
  m.output("metrics", metrics);
  m.output("report", report);
  m.set("vocab_hash", vocab.content_hash());
  m.set("model", model_dims(init.config));
  m.save(join(io.out_dir, "manifest.json"));
  char line[160];
  std::snprintf(line, sizeof line, "window %s: ROC AUC %.4f (%.4f), PR AUC %.4f (%.4f)\n", spec.name().c_str(),
                res.roc_auc.mean, res.roc_auc.sd, res.pr_auc.mean, res.pr_auc.sd);
  log << line;
  return kExitOk;
}

// Scores a fine-tuned checkpoint on the test part of every split; with
// `calibrate`, an isotonic map fit on the split's validation part is applied
// before thresholding.
inline int cmd_evaluate(const Common& c, const ModelIo& io, const TrainFlags& flags, const std::string& window,
                        bool window_only, bool calibrate, const std::string& out, std::ostream& log) {
  auto rc = load_run_config(c.config_path, TrainConfig::finetuning());
  flags.apply(rc.train, c);
  const auto spec = WindowSpec::parse(window);
  if (!is_standard_window(spec)) throw ConfigError("window must be one of 14d, 91d, 182d, 365d");
  const auto vocab = Vocabulary::load(io.vocab);
  const auto params = load_checkpoint<double>(io.checkpoint, vocab.content_hash()).params;
  if (!params.has_classifier()) throw IncompatibleError("checkpoint has no classification head; run finetune first");
  const auto records = finetune_cohort(load_records(io.records), spec, rc.sentinels, window_only);
  const auto seqs = prediction_sequences(records, vocab, spec, rc.sentinels, params.config.max_len);
  const auto scores = predict(seqs, params);

  std::vector<double> rocs, prs;
  Confusion raw, cal;
  for (std::size_t s = 0; s < rc.train.n_splits; ++s) {
    const auto part = split_indices(seqs.size(), s, rc.train);
    auto pick = [&](const std::vector<std::size_t>& idx) {
      ScoredLabels sl;
      for (auto i : idx) {
        sl.scores.push_back(scores[i]);
        sl.labels.push_back(*seqs[i].class_label);
      }
      return sl;
    };
    const auto test = pick(part.test);
    rocs.push_back(roc_auc(test));
    prs.push_back(pr_auc(test));
    raw += confusion(test);
    if (calibrate) cal += confusion(ScoredLabels{isotonic_fit(pick(part.val)).apply(test.scores), test.labels});
  }
  ojson rep;
  rep["window"] = spec.name();
  rep["n_records"] = seqs.size();
  rep["roc_auc"] = summary_json(rocs);
  rep["pr_auc"] = summary_json(prs);
  rep["confusion"]["raw"] = raw.to_json();
  if (calibrate) rep["confusion"]["calibrated"] = cal.to_json();
  write_file(out, rep.dump(2) + "\n");

  Manifest m("evaluate");
  m.seed(rc.train.seed);
  auto cfg = resolved_run_config(params.config, rc.train, rc.sentinels);
  cfg["window"] = spec.name();
  cfg["window_only"] = window_only;
  cfg["calibrate"] = calibrate;
  m.config(cfg);
  if (!c.config_path.empty()) m.input("config", c.config_path);
  m.input("checkpoint", io.checkpoint);
  m.input("records", io.records);
  m.input("vocab", io.vocab);
  m.output("report", out);
  m.set("model", model_dims(params.config));
  m.save(out + ".manifest.json");
  const auto r = mean_sd(rocs), p = mean_sd(prs);
  char line[160];
  std::snprintf(line, sizeof line, "window %s: ROC AUC %.4f (%.4f), PR AUC %.4f (%.4f)\n", spec.name().c_str(),
                r.mean, r.sd, p.mean, p.sd);
  log << line;
  return kExitOk;
}

struct AttendOptions {
  std::string patient;
  std::string window;  // empty: full pre-onset history
  std::size_t top_k = 10;
  std::optional<std::size_t> layer;
  std::string aggregate = "mean";
  std::string query;  // token string; empty: every content position
  std::string out;
};

inline TokenSequence patient_sequence(const PatientRecord& r, const Vocabulary& vocab, const std::string& window,
                                      const std::vector<EventCode>& sentinels, std::size_t max_len) {
  std::optional<WindowedRecord> w;
  if (window.empty()) w = select_window(r, WindowSpec{}, false, sentinels);
  else w = select_window(r, WindowSpec::parse(window), true, sentinels);
  if (!w) throw ValidationError("patient '" + r.id + "' has no visits in the requested view");
  return build_sequence(*w, vocab, max_len);
}

inline int cmd_attend(const Common& c, const ModelIo& io, const AttendOptions& o, std::ostream& log) {
  const auto rc = load_run_config(c.config_path, TrainConfig{});
  const auto vocab = Vocabulary::load(io.vocab);
  const auto params = load_checkpoint<double>(io.checkpoint, vocab.content_hash()).params;
  const auto records = load_records(io.records);
  const auto seq = patient_sequence(find_patient(records, o.patient), vocab, o.window, rc.sentinels,
                                    params.config.max_len);
  const auto map = extract_attention(params, seq, vocab);
  std::vector<std::size_t> queries;
  if (!o.query.empty()) {
    const auto id = vocab.encode_token(o.query);
    queries = positions_of(seq, id);
    if (id == kUnkId || queries.empty())
      throw ValidationError("token '" + o.query + "' does not occur in patient '" + o.patient + "'");
  }
  const auto agg = parse_aggregate(o.aggregate);
  auto rep = association_report(map, queries, o.top_k, o.layer, agg);
  rep["patient"] = o.patient;
  write_file(o.out, rep.dump(2) + "\n");

  Manifest m("attend");
  m.seed(c.seed.value_or(0));
  ojson cfg = {{"patient", o.patient}, {"window", o.window}, {"top_k", o.top_k},
               {"layer", o.layer ? ojson(*o.layer) : ojson(nullptr)}, {"aggregate", o.aggregate},
               {"query", o.query}};
  m.config(cfg);
  m.input("checkpoint", io.checkpoint);
  m.input("records", io.records);
  m.input("vocab", io.vocab);
  m.output("associations", o.out);
  m.set("model", model_dims(params.config));
  m.save(o.out + ".manifest.json");
  log << "wrote associations for " << rep["queries"].size() << " queries to " << o.out << "\n";
  return kExitOk;
}

inline int cmd_inspect(const Common& c, const ModelIo& io, const std::string& patient, const std::string& window,
                       std::size_t max_len, std::ostream& out) {
  const auto rc = load_run_config(c.config_path, TrainConfig{});
  const auto vocab = Vocabulary::load(io.vocab);
  const auto records = load_records(io.records);
  const auto& r = find_patient(records, patient);
  const auto seq = patient_sequence(r, vocab, window, rc.sentinels, max_len);
  out << "patient " << r.id << " label " << (r.onset ? 1 : 0) << " length " << seq.size() << "\n";
  out << format_sequence(seq, vocab);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Bidirectional transformer for multimodal patient records", "brltm"};
  app.footer(presets_help());
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", common.seed, "Random seed (overrides the config file)");
    sub->add_option("--config", common.config_path, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--preset", common.preset, "Model preset")->capture_default_str();
    sub->footer(presets_help());
  };

  std::string out_path, records, vocab, checkpoint, out_dir, window = "14d", patient;
  bool window_only = false, calibrate = false;
  std::size_t max_len = kDefaultMaxLen;
  TrainFlags flags;
  AttendOptions attend;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic cohort");
  add_common(gen);
  gen->add_option("--out", out_path, "Output records file (JSON lines)")->required();

  auto* bv = app.add_subcommand("build-vocab", "Build the token vocabulary of a records file");
  add_common(bv);
  bv->add_option("--records", records, "Records file")->required()->check(CLI::ExistingFile);
  bv->add_option("--out", out_path, "Output vocabulary file")->required();

  auto* pt = app.add_subcommand("pretrain", "Masked-code pretraining");
  add_common(pt);
  pt->add_option("--records", records, "Records file")->required()->check(CLI::ExistingFile);
  pt->add_option("--vocab", vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  pt->add_option("--out-dir", out_dir, "Output directory")->required();
  flags.add_to(pt, false);

  auto* ft = app.add_subcommand("finetune", "Fine-tune for onset prediction over random splits");
  add_common(ft);
  ft->add_option("--records", records, "Records file")->required()->check(CLI::ExistingFile);
  ft->add_option("--vocab", vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  ft->add_option("--checkpoint", checkpoint, "Pretrained checkpoint (omit to train from scratch)")
      ->check(CLI::ExistingFile);
  ft->add_option("--window", window, "Prediction window")
      ->check(CLI::IsMember({"14d", "91d", "182d", "365d"}))
      ->capture_default_str();
  ft->add_flag("--window-only", window_only, "Select patients eligible for this window only");
  ft->add_option("--out-dir", out_dir, "Output directory")->required();
  flags.add_to(ft, true);

  auto* ev = app.add_subcommand("evaluate", "Score a fine-tuned checkpoint on every split's test part");
  add_common(ev);
  ev->add_option("--records", records, "Records file")->required()->check(CLI::ExistingFile);
  ev->add_option("--vocab", vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", checkpoint, "Fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--window", window, "Prediction window")
      ->check(CLI::IsMember({"14d", "91d", "182d", "365d"}))
      ->capture_default_str();
  ev->add_flag("--window-only", window_only, "Select patients eligible for this window only");
  ev->add_flag("--calibrate", calibrate, "Also report isotonic-calibrated confusion matrices");
  ev->add_option("--out", out_path, "Output report (JSON)")->required();
  ev->add_option("--splits", flags.splits, "Override the number of random splits");

  auto* at = app.add_subcommand("attend", "Export attention associations for one patient");
  add_common(at);
  at->add_option("--records", records, "Records file")->required()->check(CLI::ExistingFile);
  at->add_option("--vocab", vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  at->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  at->add_option("--patient", attend.patient, "Patient id")->required();
  at->add_option("--window", attend.window, "Prediction window (omit for the full pre-onset history)")
      ->check(CLI::IsMember({"14d", "91d", "182d", "365d"}));
  at->add_option("--query", attend.query, "Query token, e.g. DIAG:311 (default: every content token)");
  at->add_option("--top-k", attend.top_k, "Associations kept per query")->capture_default_str();
  at->add_option("--layer", attend.layer, "Layer index (default: last)");
  at->add_option("--aggregate", attend.aggregate, "Head aggregation")
      ->check(CLI::IsMember({"mean", "max"}))
      ->capture_default_str();
  at->add_option("--out", attend.out, "Output file (JSON)")->required();

  auto* in = app.add_subcommand("inspect", "Print a patient's token sequence as aligned rows");
  add_common(in);
  in->add_option("--records", records, "Records file")->required()->check(CLI::ExistingFile);
  in->add_option("--vocab", vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  in->add_option("--patient", patient, "Patient id")->required();
  in->add_option("--window", window, "Prediction window (omit for the full pre-onset history)");
  in->add_option("--max-len", max_len, "Maximum sequence length")->capture_default_str();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (std::none_of(kPresets.begin(), kPresets.end(), [&](const auto& p) { return p.name == common.preset; }))
      throw ConfigError("unknown preset '" + common.preset + "'");
    const ModelIo io{records, vocab, checkpoint, out_dir};
    if (gen->parsed()) return cmd_gen_data(common, out_path, err);
    if (bv->parsed()) return cmd_build_vocab(common, records, out_path, out);
    if (pt->parsed()) return cmd_pretrain(common, io, flags, err);
    if (ft->parsed()) return cmd_finetune(common, io, flags, window, window_only, out);
    if (ev->parsed()) return cmd_evaluate(common, io, flags, window, window_only, calibrate, out_path, out);
    if (at->parsed()) return cmd_attend(common, io, attend, err);
    if (in->parsed()) return cmd_inspect(common, io, patient, in->count("--window") ? window : "", max_len, out);
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args), out, err);
}

}  // namespace brltm::cli
