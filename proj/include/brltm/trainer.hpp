#pragma once

// Masked-code pretraining and binary fine-tuning.
//
// Both loops are single-threaded and draw every random decision from a named
// stream derived from TrainConfig::seed, so identical inputs give identical
// metric logs and parameters:
//
//   {kStreamHeldOut}                  pretraining held-out selection
//   {kStreamHeldOutMask, i}           fixed masking of held-out sequence i
//   {kStreamShuffle, epoch}           pretraining batch order
//   {kStreamMask, epoch, i}           masking of training sequence i
//   {kStreamDropout, epoch, i}        dropout for sequence i
//   {kStreamSplit, split}             fine-tuning partition
//   {kStreamShuffle, split, epoch}    fine-tuning batch order
//   {kStreamDropout, split, epoch, i} fine-tuning dropout

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "brltm/cohort.hpp"
#include "brltm/error.hpp"
#include "brltm/hash.hpp"
#include "brltm/metrics.hpp"
#include "brltm/model.hpp"
#include "brltm/optim.hpp"
#include "brltm/rng.hpp"
#include "brltm/sequencer.hpp"
#include "brltm/vocab.hpp"

namespace brltm {

inline constexpr std::uint64_t kStreamHeldOut = 1;
inline constexpr std::uint64_t kStreamHeldOutMask = 2;
inline constexpr std::uint64_t kStreamShuffle = 3;
inline constexpr std::uint64_t kStreamMask = 4;
inline constexpr std::uint64_t kStreamDropout = 5;
inline constexpr std::uint64_t kStreamSplit = 6;
inline constexpr std::uint64_t kStreamClassifier = 7;

// ---------------------------------------------------------------------------
// Metric log

struct MetricRow {
  std::string stage;
  std::size_t split = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  std::string metric_name;
  std::optional<double> value;
};

class MetricLog {
 public:
  void add(MetricRow row) { rows_.push_back(std::move(row)); }
  const std::vector<MetricRow>& rows() const { return rows_; }

  std::vector<const MetricRow*> find(std::string_view metric) const {
    std::vector<const MetricRow*> out;
    for (const auto& r : rows_)
      if (r.metric_name == metric) out.push_back(&r);
    return out;
  }

  // Columns: stage,split,epoch,step,lr,loss,metric_name,value. Missing
  // values are written as "NA".
  std::string to_csv() const {
    std::string out = "stage,split,epoch,step,lr,loss,metric_name,value\n";
    char buf[64];
    auto num = [&](double v) -> std::string {
      if (std::isnan(v)) return "NA";
      std::snprintf(buf, sizeof buf, "%.9g", v);
      return buf;
    };
    for (const auto& r : rows_) {
      out += r.stage + ',' + std::to_string(r.split) + ',' + std::to_string(r.epoch) + ',' +
             std::to_string(r.step) + ',' + num(r.lr) + ',' + num(r.loss) + ',' + r.metric_name + ',' +
             (r.value ? num(*r.value) : std::string("NA")) + '\n';
    }
    return out;
  }

  void save(const std::string& path) const { write_file(path, to_csv()); }

  void append(const MetricLog& other) { rows_.insert(rows_.end(), other.rows_.begin(), other.rows_.end()); }

 private:
  std::vector<MetricRow> rows_;
};

// ---------------------------------------------------------------------------
// Shared helpers

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Pretraining input: the full history before onset, truncated to max_len.
inline std::vector<TokenSequence> pretraining_sequences(const std::vector<PatientRecord>& records,
                                                        const Vocabulary& vocab, std::size_t max_len) {
  std::vector<TokenSequence> out;
  for (const auto& r : records)
    if (auto w = select_window(r, WindowSpec{}, false, {})) out.push_back(build_sequence(*w, vocab, max_len));
  return out;
}

// Fine-tuning input for one window; ineligible records are skipped.
inline std::vector<TokenSequence> prediction_sequences(const std::vector<PatientRecord>& records,
                                                       const Vocabulary& vocab, const WindowSpec& spec,
                                                       const std::vector<EventCode>& sentinels,
                                                       std::size_t max_len) {
  std::vector<TokenSequence> out;
  for (const auto& r : records)
    if (auto w = select_window(r, spec, true, sentinels)) out.push_back(build_sequence(*w, vocab, max_len));
  return out;
}

inline std::vector<std::int32_t> masked_positions(const TokenSequence& s) {
  std::vector<std::int32_t> pos;
  for (std::size_t p = 0; p < s.size(); ++p)
    if ((*s.mlm_targets)[p] != kIgnore) pos.push_back(static_cast<std::int32_t>(p));
  return pos;
}

inline std::vector<std::int32_t> targets_at(const TokenSequence& s, const std::vector<std::int32_t>& pos) {
  std::vector<std::int32_t> t;
  for (auto p : pos) t.push_back((*s.mlm_targets)[static_cast<std::size_t>(p)]);
  return t;
}

// Masked-code loss of one masked sequence (mean over its masked positions).
template <class Real>
Tensor<Real> mlm_loss(const TokenSequence& masked, const ModelParams<Real>& params, const ForwardMode& mode) {
  const auto pos = masked_positions(masked);
  const auto targets = targets_at(masked, pos);
  auto out = forward(masked, params, mode);
  auto logits = mlm_logits_at(out.hidden, params, std::span<const std::int32_t>(pos));
  return cross_entropy(logits, std::span<const std::int32_t>(targets), kIgnore);
}

// Binary log-loss of one labelled sequence.
template <class Real>
Tensor<Real> classification_loss(const TokenSequence& seq, const ModelParams<Real>& params, const ForwardMode& mode) {
  if (!seq.class_label) throw ContractError("sequence has no class label");
  auto out = forward(seq, params, mode);
  const int label = *seq.class_label;
  return bce_with_logits(classify_logit(out.hidden, params), std::span<const int>(&label, 1));
}

struct MlmEvaluation {
  double loss = 0.0;
  PrecisionCounts precision;
  std::size_t positions = 0;
};

// Eval-mode masked-code loss (pooled over positions) and precision.
template <class Real>
MlmEvaluation evaluate_mlm(const std::vector<TokenSequence>& masked, const ModelParams<Real>& params) {
  MlmEvaluation ev;
  double total = 0.0;
  for (const auto& s : masked) {
    const auto pos = masked_positions(s);
    const auto targets = targets_at(s, pos);
    auto out = forward(s, params);
    auto logits = mlm_logits_at(out.hidden, params, std::span<const std::int32_t>(pos));
    total += static_cast<double>(cross_entropy(logits, std::span<const std::int32_t>(targets), kIgnore).item()) *
             static_cast<double>(pos.size());
    ev.positions += pos.size();
    ev.precision += masked_precision_counts(std::span<const Real>(logits.values()), params.config.vocab_size,
                                            std::span<const std::int32_t>(targets));
  }
  ev.loss = ev.positions ? total / static_cast<double>(ev.positions) : 0.0;
  return ev;
}

// Eval-mode probabilities for a list of sequences.
template <class Real>
std::vector<double> predict(const std::vector<TokenSequence>& seqs, const ModelParams<Real>& params) {
  std::vector<double> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(static_cast<double>(classify(forward(s, params).hidden, params)));
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining

template <class Real>
struct PretrainResult {
  ModelParams<Real> best;
  ModelParams<Real> last;
  MetricLog log;
  std::size_t best_step = 0;
  std::optional<double> best_precision;
  double best_held_out_loss = std::numeric_limits<double>::infinity();
  std::vector<double> epoch_losses;
  std::vector<std::size_t> train_indices;     // into pretraining_sequences(...)
  std::vector<std::size_t> held_out_indices;  // into pretraining_sequences(...)
  std::size_t total_steps = 0;
};

template <class Real>
PretrainResult<Real> pretrain(const std::vector<PatientRecord>& records, const Vocabulary& vocab,
                              ModelConfig model_cfg, const TrainConfig& cfg) {
  cfg.validate();
  model_cfg.vocab_size = vocab.size();
  model_cfg.validate();
  const auto seqs = pretraining_sequences(records, vocab, model_cfg.max_len);
  if (seqs.size() < 2) throw ConfigError("pretraining needs at least two usable records");

  PretrainResult<Real> res;
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = Rng::stream(cfg.seed, {kStreamHeldOut});
  split_rng.shuffle(order);
  const auto n_held = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(cfg.held_out_fraction * static_cast<double>(seqs.size()))), 1,
      seqs.size() - 1);
  res.held_out_indices.assign(order.begin(), order.begin() + static_cast<long>(n_held));
  res.train_indices.assign(order.begin() + static_cast<long>(n_held), order.end());
  std::sort(res.held_out_indices.begin(), res.held_out_indices.end());
  std::sort(res.train_indices.begin(), res.train_indices.end());

  std::vector<TokenSequence> held_out;
  for (auto i : res.held_out_indices) {
    Rng r = Rng::stream(cfg.seed, {kStreamHeldOutMask, i});
    held_out.push_back(apply_mlm_mask(seqs[i], vocab.size(), r));
  }

  auto params = init_params<Real>(model_cfg, cfg.seed);
  auto named = params.named();
  Adam<Real> adam(cfg);
  const std::size_t steps_per_epoch = ceil_div(res.train_indices.size(), cfg.batch_size);
  res.total_steps = cfg.epochs * steps_per_epoch;
  std::size_t step = 0;
  std::size_t last_eval_step = std::numeric_limits<std::size_t>::max();
  res.best = params.clone();

  auto evaluate = [&](std::size_t epoch) {
    const auto ev = evaluate_mlm(held_out, params);
    const auto precision = ev.precision.value();
    res.log.add({"pretrain", 0, epoch, step, lr_at(step, std::max<std::size_t>(res.total_steps, 1), cfg), ev.loss,
                 "held_out_masked_precision", precision});
    res.log.add({"pretrain", 0, epoch, step, lr_at(step, std::max<std::size_t>(res.total_steps, 1), cfg), ev.loss,
                 "held_out_mlm_loss", ev.loss});
    const double score = precision.value_or(0.0), best_score = res.best_precision.value_or(0.0);
    const bool better = last_eval_step == std::numeric_limits<std::size_t>::max() || score > best_score ||
                        (score == best_score && ev.loss < res.best_held_out_loss);
    if (better) {
      res.best = params.clone();
      res.best_precision = precision;
      res.best_held_out_loss = ev.loss;
      res.best_step = step;
    }
    last_eval_step = step;
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> epoch_order = res.train_indices;
    Rng shuffle_rng = Rng::stream(cfg.seed, {kStreamShuffle, epoch});
    shuffle_rng.shuffle(epoch_order);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const auto begin = b * cfg.batch_size;
      const auto end = std::min(epoch_order.size(), begin + cfg.batch_size);
      std::vector<TokenSequence> masked;
      std::size_t n_masked = 0;
      for (auto k = begin; k < end; ++k) {
        const auto i = epoch_order[k];
        Rng mask_rng = Rng::stream(cfg.seed, {kStreamMask, epoch, i});
        masked.push_back(apply_mlm_mask(seqs[i], vocab.size(), mask_rng));
        n_masked += masked_positions(masked.back()).size();
      }
      const double lr = lr_at(step, res.total_steps, cfg);
      params.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t k = 0; k < masked.size(); ++k) {
        Rng drop_rng = Rng::stream(cfg.seed, {kStreamDropout, epoch, epoch_order[begin + k]});
        auto loss = mlm_loss(masked[k], params, ForwardMode{true, &drop_rng, false});
        const double weight = static_cast<double>(masked_positions(masked[k]).size()) / static_cast<double>(n_masked);
        batch_loss += static_cast<double>(loss.item()) * weight;
        scale(loss, static_cast<Real>(weight)).backward();
      }
      adam.step(named, lr);
      res.log.add({"pretrain", 0, epoch, step, lr, batch_loss, "mlm_loss", batch_loss});
      epoch_loss += batch_loss;
      ++step;
      if (step % cfg.eval_every == 0) evaluate(epoch);
    }
    res.epoch_losses.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(steps_per_epoch, 1)));
    res.log.add({"pretrain", 0, epoch, step, lr_at(step, std::max<std::size_t>(res.total_steps, 1), cfg),
                 res.epoch_losses.back(), "epoch_mlm_loss", res.epoch_losses.back()});
  }
  if (last_eval_step != step) evaluate(cfg.epochs == 0 ? 0 : cfg.epochs - 1);
  res.last = params;
  return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning

// Test labels are only reachable by pairing them with finished scores; the
// epoch-selection routine never sees this type.
class TestSet {
 public:
  TestSet() = default;
  TestSet(std::vector<TokenSequence> inputs, std::vector<int> labels)
      : inputs_(std::move(inputs)), labels_(std::move(labels)) {}

  const std::vector<TokenSequence>& inputs() const { return inputs_; }
  std::size_t size() const { return inputs_.size(); }
  ScoredLabels score(std::vector<double> scores) const {
    if (scores.size() != labels_.size()) throw ContractError("score count does not match test set");
    return {std::move(scores), labels_};
  }

 private:
  std::vector<TokenSequence> inputs_;
  std::vector<int> labels_;
};

// Index of the epoch with the highest validation PR AUC (earliest on ties).
inline std::size_t select_best_epoch(const std::vector<ScoredLabels>& validation_by_epoch) {
  if (validation_by_epoch.empty()) throw ContractError("no epochs to select from");
  std::size_t best = 0;
  double best_ap = -1.0;
  for (std::size_t e = 0; e < validation_by_epoch.size(); ++e) {
    const double ap = pr_auc(validation_by_epoch[e]);
    if (ap > best_ap) {
      best_ap = ap;
      best = e;
    }
  }
  return best;
}

struct SplitResult {
  std::size_t split = 0;
  std::size_t best_epoch = 0;
  std::vector<double> val_pr_auc_by_epoch;  // index 0 = before training
  std::vector<double> train_loss_by_epoch;  // index 0 unused (NaN)
  double test_roc_auc = 0.0;
  double test_pr_auc = 0.0;
  Confusion confusion_raw;
  Confusion confusion_calibrated;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
};

template <class Real>
struct FinetuneResult {
  std::vector<SplitResult> splits;
  MeanSd roc_auc;
  MeanSd pr_auc;
  Confusion confusion_raw;
  Confusion confusion_calibrated;
  MetricLog log;
  ModelParams<Real> model;  // selected epoch of split 0
};

struct Partition {
  std::vector<std::size_t> train, val, test;
};

// Seeded 70/10/20-style partition of n items for one split.
inline Partition split_indices(std::size_t n, std::size_t split, const TrainConfig& cfg) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = Rng::stream(cfg.seed, {kStreamSplit, split});
  rng.shuffle(idx);
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(n)));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) throw SplitError("too few records to split");
  Partition p;
  p.train.assign(idx.begin(), idx.begin() + static_cast<long>(n_train));
  p.val.assign(idx.begin() + static_cast<long>(n_train), idx.begin() + static_cast<long>(n_train + n_val));
  p.test.assign(idx.begin() + static_cast<long>(n_train + n_val), idx.end());
  return p;
}

inline nlohmann::ordered_json summary_json(const std::vector<double>& per_split) {
  const auto ms = mean_sd(per_split);
  nlohmann::ordered_json j;
  j["mean"] = ms.mean;
  j["sd"] = ms.sd;
  j["per_split"] = per_split;
  return j;
}

template <class Real>
nlohmann::ordered_json report_json(const FinetuneResult<Real>& r) {
  std::vector<double> roc, pr;
  std::vector<std::size_t> best;
  for (const auto& s : r.splits) {
    roc.push_back(s.test_roc_auc);
    pr.push_back(s.test_pr_auc);
    best.push_back(s.best_epoch);
  }
  nlohmann::ordered_json j;
  j["roc_auc"] = summary_json(roc);
  j["pr_auc"] = summary_json(pr);
  j["confusion"] = {{"raw", r.confusion_raw.to_json()}, {"calibrated", r.confusion_calibrated.to_json()}};
  j["best_epochs"] = best;
  return j;
}

// Fine-tunes `init` on the labelled window of each record for every split.
// A missing classification head is initialized per split from the seed.
template <class Real>
FinetuneResult<Real> finetune(const ModelParams<Real>& init, const std::vector<PatientRecord>& records,
                              const Vocabulary& vocab, const WindowSpec& spec,
                              const std::vector<EventCode>& sentinels, const TrainConfig& cfg) {
  cfg.validate();
  spec.validate();
  if (init.config.vocab_size != vocab.size())
    throw IncompatibleError("model vocabulary size " + std::to_string(init.config.vocab_size) +
                            " does not match vocabulary of size " + std::to_string(vocab.size()));
  const auto seqs = prediction_sequences(records, vocab, spec, sentinels, init.config.max_len);
  FinetuneResult<Real> res;
  std::vector<double> rocs, prs;
  for (std::size_t split = 0; split < cfg.n_splits; ++split) {
    const auto part = split_indices(seqs.size(), split, cfg);
    auto gather = [&](const std::vector<std::size_t>& idx) {
      std::vector<TokenSequence> out;
      for (auto i : idx) out.push_back(seqs[i]);
      return out;
    };
    auto labels_of = [&](const std::vector<std::size_t>& idx) {
      std::vector<int> out;
      for (auto i : idx) out.push_back(*seqs[i].class_label);
      return out;
    };
    const auto train = gather(part.train);
    const auto val = gather(part.val);
    const auto val_labels = labels_of(part.val);
    const TestSet test(gather(part.test), labels_of(part.test));
    auto both = [](const std::vector<int>& y) {
      return std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), 0) > 0;
    };
    if (!both(labels_of(part.train)))
      throw SplitError("split " + std::to_string(split) + " has single-class training labels; reseed");
    if (!both(val_labels) || !both(labels_of(part.test)))
      throw SplitError("split " + std::to_string(split) + " has a single-class validation or test set; reseed");

    auto params = init.clone();
    if (!params.has_classifier()) init_classifier(params, splitmix64(cfg.seed ^ kStreamClassifier));
    auto named = params.named();
    Adam<Real> adam(cfg);
    const std::size_t steps_per_epoch = ceil_div(train.size(), cfg.batch_size);
    const std::size_t total_steps = std::max<std::size_t>(cfg.epochs * steps_per_epoch, 1);

    SplitResult sr;
    sr.split = split;
    sr.n_train = train.size();
    sr.n_val = val.size();
    sr.n_test = test.size();
    std::vector<ScoredLabels> val_by_epoch;
    std::vector<std::vector<double>> test_scores_by_epoch;
    std::optional<ModelParams<Real>> best_params;
    double best_ap = -1.0;
    std::size_t step = 0;

    auto evaluate_epoch = [&](std::size_t epoch) {
      val_by_epoch.push_back({predict(val, params), val_labels});
      test_scores_by_epoch.push_back(predict(test.inputs(), params));
      const double ap = pr_auc(val_by_epoch.back());
      sr.val_pr_auc_by_epoch.push_back(ap);
      res.log.add({"finetune", split, epoch, step, lr_at(std::min(step, total_steps), total_steps, cfg),
                   sr.train_loss_by_epoch.back(), "val_pr_auc", ap});
      res.log.add({"finetune", split, epoch, step, lr_at(std::min(step, total_steps), total_steps, cfg),
                   sr.train_loss_by_epoch.back(), "val_roc_auc", roc_auc(val_by_epoch.back())});
      if (split == 0 && ap > best_ap) {
        best_ap = ap;
        best_params = params.clone();
      }
    };

    sr.train_loss_by_epoch.push_back(std::numeric_limits<double>::quiet_NaN());
    evaluate_epoch(0);
    std::vector<std::size_t> order(train.size());
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle_rng = Rng::stream(cfg.seed, {kStreamShuffle, split, epoch});
      shuffle_rng.shuffle(order);
      double epoch_loss = 0.0;
      for (std::size_t b = 0; b < steps_per_epoch; ++b) {
        const auto begin = b * cfg.batch_size;
        const auto end = std::min(order.size(), begin + cfg.batch_size);
        const double lr = lr_at(step, total_steps, cfg);
        params.zero_grad();
        double batch_loss = 0.0;
        const auto inv = static_cast<Real>(1.0 / static_cast<double>(end - begin));
        for (auto k = begin; k < end; ++k) {
          Rng drop_rng = Rng::stream(cfg.seed, {kStreamDropout, split, epoch, order[k]});
          auto loss = classification_loss(train[order[k]], params, ForwardMode{true, &drop_rng, false});
          batch_loss += static_cast<double>(loss.item()) * static_cast<double>(inv);
          scale(loss, inv).backward();
        }
        adam.step(named, lr);
        res.log.add({"finetune", split, epoch, step, lr, batch_loss, "bce_loss", batch_loss});
        epoch_loss += batch_loss;
        ++step;
      }
      sr.train_loss_by_epoch.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(steps_per_epoch, 1)));
      evaluate_epoch(epoch);
    }

    sr.best_epoch = select_best_epoch(val_by_epoch);
    const auto scored = test.score(test_scores_by_epoch[sr.best_epoch]);
    sr.test_roc_auc = roc_auc(scored);
    sr.test_pr_auc = pr_auc(scored);
    sr.confusion_raw = confusion(scored);
    const auto cal = isotonic_fit(val_by_epoch[sr.best_epoch]);
    sr.confusion_calibrated = confusion(ScoredLabels{cal.apply(scored.scores), scored.labels});
    res.log.add({"finetune", split, sr.best_epoch, step, 0.0, std::numeric_limits<double>::quiet_NaN(),
                 "test_roc_auc", sr.test_roc_auc});
    res.log.add({"finetune", split, sr.best_epoch, step, 0.0, std::numeric_limits<double>::quiet_NaN(),
                 "test_pr_auc", sr.test_pr_auc});
    rocs.push_back(sr.test_roc_auc);
    prs.push_back(sr.test_pr_auc);
    res.confusion_raw += sr.confusion_raw;
    res.confusion_calibrated += sr.confusion_calibrated;
    if (split == 0) res.model = best_params ? *best_params : params;
    res.splits.push_back(std::move(sr));
  }
  res.roc_auc = mean_sd(rocs);
  res.pr_auc = mean_sd(prs);
  return res;
}

}  // namespace brltm
