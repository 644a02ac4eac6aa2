#pragma once

// Evaluation metrics: ranking AUCs, masked-code precision, confusion
// matrices, isotonic calibration and the paired t-test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>
#include "json.hpp"

#include "brltm/error.hpp"

namespace brltm {

struct ScoredLabels {
  std::vector<double> scores;
  std::vector<int> labels;

  void validate() const {
    if (scores.size() != labels.size()) throw ContractError("scores and labels differ in length");
    for (int y : labels)
      if (y != 0 && y != 1) throw ContractError("labels must be 0 or 1");
  }
  std::size_t positives() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }
};

// P(score+ > score-) + P(tie) / 2, via midranks.
inline double roc_auc(const ScoredLabels& sl) {
  sl.validate();
  const std::size_t n = sl.scores.size(), pos = sl.positives(), neg = n - pos;
  if (pos == 0 || neg == 0) throw MetricError("ROC AUC needs both classes");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return sl.scores[a] < sl.scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && sl.scores[idx[j]] == sl.scores[idx[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (sl.labels[idx[k]] == 1) rank_sum += midrank;
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

// Average precision: mean over positives of the precision at the positive's
// rank. Ranking is by descending score; equal scores keep input order, so a
// tie group is not averaged.
inline double pr_auc(const ScoredLabels& sl) {
  sl.validate();
  const std::size_t pos = sl.positives();
  if (pos == 0) throw MetricError("PR AUC needs at least one positive");
  std::vector<std::size_t> idx(sl.scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return sl.scores[a] > sl.scores[b]; });
  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < idx.size(); ++r)
    if (sl.labels[idx[r]] == 1) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  return ap / static_cast<double>(pos);
}

// Pooled masked-code precision. A position predicts when its largest softmax
// probability exceeds `threshold`; it is a true positive when that argmax is
// the true code. With `strict`, a position counts only through the
// probability of the true code (> threshold). Returns nullopt when no
// position predicts.
struct PrecisionCounts {
  std::size_t true_positive = 0;
  std::size_t predicted = 0;

  std::optional<double> value() const {
    if (predicted == 0) return std::nullopt;
    return static_cast<double>(true_positive) / static_cast<double>(predicted);
  }
  PrecisionCounts& operator+=(const PrecisionCounts& o) {
    true_positive += o.true_positive;
    predicted += o.predicted;
    return *this;
  }
};

template <class Real>
PrecisionCounts masked_precision_counts(std::span<const Real> logits, std::size_t vocab,
                                        std::span<const std::int32_t> truth, double threshold = 0.5,
                                        bool strict = false) {
  if (vocab == 0 || logits.size() != truth.size() * vocab)
    throw ShapeError("masked_precision: logits do not match " + std::to_string(truth.size()) + " positions");
  PrecisionCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const Real* row = logits.data() + i * vocab;
    const auto argmax = static_cast<std::size_t>(std::max_element(row, row + vocab) - row);
    const double m = static_cast<double>(row[argmax]);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j]) - m);
    const double p_max = 1.0 / z;
    const auto t = static_cast<std::size_t>(truth[i]);
    if (strict) {
      const double p_true = std::exp(static_cast<double>(row[t]) - m) / z;
      if (p_true > threshold) {
        ++c.predicted;
        ++c.true_positive;
      } else if (p_max > threshold) {
        ++c.predicted;
      }
    } else if (p_max > threshold) {
      ++c.predicted;
      if (argmax == t) ++c.true_positive;
    }
  }
  return c;
}

template <class Real>
std::optional<double> masked_precision(std::span<const Real> logits, std::size_t vocab,
                                       std::span<const std::int32_t> truth, double threshold = 0.5,
                                       bool strict = false) {
  return masked_precision_counts(logits, vocab, truth, threshold, strict).value();
}

// 2x2 table with the label-0 row first: [[TN, FP], [FN, TP]].
struct Confusion {
  std::size_t tn = 0, fp = 0, fn = 0, tp = 0;

  std::size_t total() const { return tn + fp + fn + tp; }
  Confusion& operator+=(const Confusion& o) {
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    tp += o.tp;
    return *this;
  }
  bool operator==(const Confusion&) const = default;

  nlohmann::ordered_json to_json() const {
    return nlohmann::ordered_json::array({{tn, fp}, {fn, tp}});
  }
};

// Predicted positive iff score > threshold.
inline Confusion confusion(const ScoredLabels& sl, double threshold = 0.5) {
  sl.validate();
  Confusion c;
  for (std::size_t i = 0; i < sl.scores.size(); ++i) {
    const bool pred = sl.scores[i] > threshold;
    if (sl.labels[i] == 1) (pred ? c.tp : c.fn)++;
    else (pred ? c.fp : c.tn)++;
  }
  return c;
}

// Weighted least-squares fit under a non-decreasing constraint (pool
// adjacent violators).
inline std::vector<double> isotonic_regression(std::span<const double> y, std::span<const double> w = {}) {
  if (!w.empty() && w.size() != y.size()) throw ContractError("isotonic weights do not match values");
  struct Block {
    double sum, weight;
    std::size_t count;
  };
  std::vector<Block> blocks;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double wi = w.empty() ? 1.0 : w[i];
    blocks.push_back({y[i] * wi, wi, 1});
    while (blocks.size() > 1) {
      const auto& b = blocks.back();
      const auto& a = blocks[blocks.size() - 2];
      if (a.sum / a.weight <= b.sum / b.weight) break;
      Block merged{a.sum + b.sum, a.weight + b.weight, a.count + b.count};
      blocks.pop_back();
      blocks.back() = merged;
    }
  }
  std::vector<double> out;
  out.reserve(y.size());
  for (const auto& b : blocks) out.insert(out.end(), b.count, b.sum / b.weight);
  return out;
}

struct Calibrator {
  std::vector<double> breakpoints;  // strictly increasing scores
  std::vector<double> values;       // non-decreasing, in [0,1]

  // Stepwise-constant: the value of the last breakpoint <= score; scores
  // below the first breakpoint take the first value.
  double apply(double score) const {
    if (breakpoints.empty()) throw ContractError("empty calibrator");
    const auto it = std::upper_bound(breakpoints.begin(), breakpoints.end(), score);
    const std::size_t i = it == breakpoints.begin() ? 0 : static_cast<std::size_t>(it - breakpoints.begin()) - 1;
    return std::clamp(values[i], 0.0, 1.0);
  }

  std::vector<double> apply(std::span<const double> scores) const {
    std::vector<double> out;
    out.reserve(scores.size());
    for (double s : scores) out.push_back(apply(s));
    return out;
  }
};

// Tied scores are first pooled into one weighted point.
inline Calibrator isotonic_fit(const ScoredLabels& val) {
  val.validate();
  if (val.scores.empty()) throw ContractError("isotonic_fit on empty input");
  std::vector<std::size_t> idx(val.scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return val.scores[a] < val.scores[b]; });
  Calibrator cal;
  std::vector<double> means, weights;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    double s = 0.0;
    while (j < idx.size() && val.scores[idx[j]] == val.scores[idx[i]]) s += val.labels[idx[j++]];
    cal.breakpoints.push_back(val.scores[idx[i]]);
    means.push_back(s / static_cast<double>(j - i));
    weights.push_back(static_cast<double>(j - i));
    i = j;
  }
  cal.values = isotonic_regression(means, weights);
  return cal;
}

inline std::vector<double> isotonic_apply(const Calibrator& cal, std::span<const double> scores) {
  return cal.apply(scores);
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t df = 0;
};

// Two-tailed paired t-test on a - b.
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("paired_t_test inputs differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw ContractError("paired_t_test needs at least two pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double x : d) ss += (x - mean) * (x - mean);
  const double var = ss / static_cast<double>(n - 1);
  if (!(var > 0.0)) throw MetricError("paired t-test is degenerate: differences have zero variance");
  TTestResult r;
  r.df = n - 1;
  r.t = mean / std::sqrt(var / static_cast<double>(n));
  const double nu = static_cast<double>(r.df);
  // P(|T| > |t|) = I_{nu / (nu + t^2)}(nu / 2, 1 / 2)
  r.p = boost::math::ibeta(nu / 2.0, 0.5, nu / (nu + r.t * r.t));
  return r;
}

// mean and sample standard deviation (n - 1); sd is 0 for a single value.
struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};

inline MeanSd mean_sd(std::span<const double> xs) {
  MeanSd r;
  if (xs.empty()) return r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

}  // namespace brltm
