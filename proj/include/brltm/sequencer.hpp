#pragma once

// Windowing, sequence construction, MLM masking and batching.
//
// A sequence is laid out as
//
//   [CLS, visit-1 codes..., SEP, visit-2 codes..., SEP, ...]
//
// with five parallel index channels (token, position, segment, age, gender)
// that the model embeds and sums.

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "brltm/cohort.hpp"
#include "brltm/error.hpp"
#include "brltm/rng.hpp"
#include "brltm/vocab.hpp"

namespace brltm {

// ---------------------------------------------------------------------------
// Windows

struct WindowSpec {
  int prediction_days = 14;
  int data_days = 182;
  int exclusion_days = 15;

  void validate() const {
    if (prediction_days <= 0 || data_days <= 0 || exclusion_days <= 0)
      throw ConfigError("window durations must be positive");
  }

  // Gap between the last usable day and the reference time.
  int gap_days() const { return std::max(prediction_days, exclusion_days); }

  std::string name() const { return std::to_string(prediction_days) + "d"; }

  // "14d", "91d", ... (prediction window; other durations default).
  static WindowSpec parse(std::string_view s) {
    int days = 0;
    if (s.size() < 2 || s.back() != 'd') throw ConfigError("window must look like '14d'");
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size() - 1, days);
    if (ec != std::errc{} || ptr != s.data() + s.size() - 1 || days <= 0)
      throw ConfigError("bad window '" + std::string(s) + "'");
    WindowSpec w;
    w.prediction_days = days;
    return w;
  }
};

// Two weeks, three months, six months, one year.
inline constexpr std::array<int, 4> kPredictionWindowDays = {14, 91, 182, 365};

inline std::vector<WindowSpec> standard_windows() {
  std::vector<WindowSpec> out;
  for (int d : kPredictionWindowDays) out.push_back(WindowSpec{d, 182, 15});
  return out;
}

inline bool is_standard_window(const WindowSpec& w) {
  return std::find(kPredictionWindowDays.begin(), kPredictionWindowDays.end(), w.prediction_days) !=
         kPredictionWindowDays.end();
}

struct WindowedRecord {
  PatientRecord record;
  int label = 0;
};

// Prediction mode keeps the visits in [ref - gap - data_window, ref - gap],
// where ref is the onset date (or the last visit for non-depressed patients),
// and strips sentinel codes. Pretraining mode keeps the whole history before
// onset. Returns nullopt when nothing remains.
inline std::optional<WindowedRecord> select_window(const PatientRecord& record, const WindowSpec& spec,
                                                   bool for_prediction,
                                                   const std::vector<EventCode>& sentinels) {
  WindowedRecord out;
  out.label = record.onset ? 1 : 0;
  out.record = record;
  out.record.visits.clear();
  if (record.visits.empty()) return std::nullopt;

  if (!for_prediction) {
    for (const auto& v : record.visits)
      if (!record.onset || v.date < *record.onset) out.record.visits.push_back(v);
  } else {
    const Date ref = record.onset ? *record.onset : record.visits.back().date;
    const Date end = ref - Days{spec.gap_days()};
    const Date start = end - Days{spec.data_days};
    for (const auto& v : record.visits) {
      if (v.date < start || v.date > end) continue;
      Visit kept{v.date, {}};
      for (const auto& e : v.events)
        if (!contains(sentinels, e)) kept.events.push_back(e);
      if (!kept.events.empty()) out.record.visits.push_back(std::move(kept));
    }
  }
  if (out.record.visits.empty()) return std::nullopt;
  return out;
}

// Keeps the records that have at least one event under every window.
inline std::vector<PatientRecord> eligibility_filter(const std::vector<PatientRecord>& records,
                                                     const std::vector<WindowSpec>& specs,
                                                     const std::vector<EventCode>& sentinels) {
  std::vector<PatientRecord> out;
  for (const auto& r : records) {
    const bool ok = std::all_of(specs.begin(), specs.end(), [&](const WindowSpec& s) {
      return select_window(r, s, true, sentinels).has_value();
    });
    if (ok) out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequences

inline constexpr std::int32_t kSegmentA = 0;
inline constexpr std::int32_t kSegmentB = 1;
inline constexpr TokenId kIgnore = -100;
inline constexpr std::size_t kDefaultMaxLen = 256;

struct TokenSequence {
  std::vector<TokenId> tokens;
  std::vector<std::int32_t> positions;
  std::vector<std::int32_t> segments;
  std::vector<std::int32_t> ages;
  std::int32_t gender = 0;
  std::vector<std::uint8_t> pad_mask;  // 1 = real token
  std::optional<std::vector<TokenId>> mlm_targets;
  std::optional<int> class_label;

  std::size_t size() const { return tokens.size(); }
  std::size_t real_length() const {
    return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), std::uint8_t{1}));
  }
  bool is_content(std::size_t p) const {
    return pad_mask[p] && tokens[p] != kClsId && tokens[p] != kSepId && tokens[p] != kPadId;
  }

  bool operator==(const TokenSequence&) const = default;
};

// Throws ContractError describing the first violated structural invariant.
inline void validate_sequence(const TokenSequence& s, std::size_t max_len) {
  auto fail = [](const std::string& what) { throw ContractError("token sequence: " + what); };
  const auto n = s.tokens.size();
  if (n == 0) fail("empty");
  if (n > max_len) fail("length " + std::to_string(n) + " exceeds max_len " + std::to_string(max_len));
  if (s.positions.size() != n || s.segments.size() != n || s.ages.size() != n || s.pad_mask.size() != n ||
      (s.mlm_targets && s.mlm_targets->size() != n))
    fail("channel lengths differ");
  if (s.tokens[0] != kClsId) fail("first token is not CLS");
  if (s.gender != 0 && s.gender != 1) fail("gender id outside {0,1}");
  const auto real = s.real_length();
  for (std::size_t p = 0; p < n; ++p) {
    if (s.positions[p] != static_cast<std::int32_t>(p)) fail("positions are not 0..n-1");
    if (s.segments[p] != kSegmentA && s.segments[p] != kSegmentB) fail("segment outside {A,B}");
    const bool is_real = p < real;
    if (static_cast<bool>(s.pad_mask[p]) != is_real) fail("padding is not a suffix");
    if (is_real == (s.tokens[p] == kPadId)) fail("PAD token/mask disagreement at " + std::to_string(p));
    if (s.mlm_targets && (*s.mlm_targets)[p] != kIgnore && !s.is_content(p))
      fail("MLM target on a non-content position");
  }
  if (real < 3 || s.tokens[real - 1] != kSepId) fail("last visit is not terminated by SEP");
  if (s.tokens[1] == kSepId) fail("empty visit");
  for (std::size_t p = 2; p < real; ++p)
    if (s.tokens[p] == kSepId && s.tokens[p - 1] == kSepId) fail("empty visit");
}

namespace detail {

inline std::vector<TokenId> visit_tokens(const Visit& v, const Vocabulary& vocab) {
  std::vector<std::pair<Modality, std::string>> keyed;
  keyed.reserve(v.events.size());
  for (const auto& e : v.events) keyed.emplace_back(e.modality, token_string(e));
  std::sort(keyed.begin(), keyed.end());
  keyed.erase(std::unique(keyed.begin(), keyed.end()), keyed.end());
  std::vector<TokenId> ids;
  ids.reserve(keyed.size());
  for (const auto& [m, t] : keyed) ids.push_back(vocab.encode_token(t));
  return ids;
}

}  // namespace detail

// Whole oldest visits are dropped until the sequence fits; a single visit that
// alone exceeds max_len keeps its first max_len - 2 codes.
inline TokenSequence build_sequence(const WindowedRecord& windowed, const Vocabulary& vocab,
                                    std::size_t max_len = kDefaultMaxLen) {
  const auto& rec = windowed.record;
  if (rec.visits.empty()) throw ContractError("build_sequence on a record without visits");
  if (max_len < 3) throw ContractError("max_len must be at least 3");

  std::vector<std::vector<TokenId>> visits;
  visits.reserve(rec.visits.size());
  for (const auto& v : rec.visits) {
    visits.push_back(detail::visit_tokens(v, vocab));
    if (visits.back().empty()) throw ContractError("visit without events");
  }
  std::size_t first = 0;
  std::size_t length = 1;
  for (const auto& v : visits) length += v.size() + 1;
  while (length > max_len && first + 1 < visits.size()) {
    length -= visits[first].size() + 1;
    ++first;
  }
  if (length > max_len) visits.back().resize(max_len - 2);

  TokenSequence s;
  s.gender = rec.gender == Gender::F ? 0 : 1;
  s.class_label = windowed.label;
  auto push = [&](TokenId tok, std::int32_t seg, std::int32_t age) {
    s.positions.push_back(static_cast<std::int32_t>(s.tokens.size()));
    s.tokens.push_back(tok);
    s.segments.push_back(seg);
    s.ages.push_back(age);
    s.pad_mask.push_back(1);
  };
  auto age_at = [&](std::size_t v) { return year_of(rec.visits[v].date) - rec.birth_year; };
  push(kClsId, kSegmentA, age_at(first));
  for (std::size_t v = first; v < visits.size(); ++v) {
    const std::int32_t seg = (v - first) % 2 == 0 ? kSegmentA : kSegmentB;
    const std::int32_t age = age_at(v);
    for (TokenId t : visits[v]) push(t, seg, age);
    push(kSepId, seg, age);
  }
  return s;
}

// Standard MLM corruption: each content position is selected with p = 0.15;
// a selected token becomes MASK (80%), a uniformly random content token (10%)
// or stays unchanged (10%). At least one position is always selected.
inline TokenSequence apply_mlm_mask(const TokenSequence& seq, std::size_t vocab_size, Rng& rng,
                                    double select_prob = 0.15) {
  if (seq.mlm_targets) throw ContractError("sequence is already masked");
  if (vocab_size <= static_cast<std::size_t>(kFirstContentId))
    throw ContractError("vocabulary has no content tokens");
  std::vector<std::size_t> candidates;
  for (std::size_t p = 0; p < seq.size(); ++p)
    if (seq.is_content(p)) candidates.push_back(p);
  if (candidates.empty()) throw ContractError("sequence has no content tokens to mask");

  TokenSequence out = seq;
  out.mlm_targets = std::vector<TokenId>(seq.size(), kIgnore);
  auto& targets = *out.mlm_targets;
  const auto n_content = vocab_size - static_cast<std::size_t>(kFirstContentId);
  auto corrupt = [&](std::size_t p) {
    targets[p] = seq.tokens[p];
    const double u = rng.uniform();
    if (u < 0.8)
      out.tokens[p] = kMaskId;
    else if (u < 0.9)
      out.tokens[p] = kFirstContentId + static_cast<TokenId>(rng.uniform_int(n_content));
  };
  bool any = false;
  for (auto p : candidates)
    if (rng.bernoulli(select_prob)) {
      corrupt(p);
      any = true;
    }
  if (!any) corrupt(candidates[rng.uniform_int(candidates.size())]);
  return out;
}

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  std::size_t length = 0;
  std::vector<TokenSequence> rows;
};

inline TokenSequence pad_to(const TokenSequence& s, std::size_t length) {
  if (s.size() > length) throw ContractError("pad_to shorter than sequence");
  TokenSequence out = s;
  for (std::size_t p = s.size(); p < length; ++p) {
    out.tokens.push_back(kPadId);
    out.positions.push_back(static_cast<std::int32_t>(p));
    out.segments.push_back(kSegmentA);
    out.ages.push_back(0);
    out.pad_mask.push_back(0);
    if (out.mlm_targets) out.mlm_targets->push_back(kIgnore);
  }
  return out;
}

// Removes trailing padding.
inline TokenSequence unpad(const TokenSequence& s) {
  TokenSequence out = s;
  const auto n = s.real_length();
  out.tokens.resize(n);
  out.positions.resize(n);
  out.segments.resize(n);
  out.ages.resize(n);
  out.pad_mask.resize(n);
  if (out.mlm_targets) out.mlm_targets->resize(n);
  return out;
}

inline std::vector<Batch> batchify(const std::vector<TokenSequence>& seqs, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < seqs.size(); i += batch_size) {
    const auto end = std::min(seqs.size(), i + batch_size);
    Batch b;
    for (std::size_t j = i; j < end; ++j) b.length = std::max(b.length, seqs[j].size());
    for (std::size_t j = i; j < end; ++j) b.rows.push_back(pad_to(seqs[j], b.length));
    out.push_back(std::move(b));
  }
  return out;
}

// Aligned text rows (token / position / segment / age / gender), one column
// per sequence position.
inline std::string format_sequence(const TokenSequence& s, const Vocabulary& vocab) {
  std::vector<std::array<std::string, 5>> cols;
  std::size_t width = 0;
  for (std::size_t p = 0; p < s.size(); ++p) {
    std::array<std::string, 5> c = {vocab.decode(s.tokens[p]), std::to_string(s.positions[p]),
                                    s.segments[p] == kSegmentA ? "A" : "B", std::to_string(s.ages[p]),
                                    s.gender == 0 ? "F" : "M"};
    for (const auto& x : c) width = std::max(width, x.size());
    cols.push_back(std::move(c));
  }
  static constexpr std::array<std::string_view, 5> kRows = {"token", "position", "segment", "age", "gender"};
  std::ostringstream out;
  for (std::size_t r = 0; r < kRows.size(); ++r) {
    out << std::left << std::setw(9) << kRows[r];
    for (const auto& c : cols) out << ' ' << std::setw(static_cast<int>(width)) << c[r];
    out << '\n';
  }
  return out.str();
}

}  // namespace brltm
