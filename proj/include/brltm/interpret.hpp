#pragma once

// Attention read-out: per-query association scores over the other tokens of
// a sequence, and their aggregation across patients.

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "brltm/error.hpp"
#include "brltm/hash.hpp"
#include "brltm/model.hpp"
#include "brltm/sequencer.hpp"
#include "brltm/vocab.hpp"

namespace brltm {

enum class HeadAggregate { Mean, Max };

inline std::string_view aggregate_name(HeadAggregate a) { return a == HeadAggregate::Mean ? "mean" : "max"; }

inline HeadAggregate parse_aggregate(std::string_view s) {
  if (s == "mean") return HeadAggregate::Mean;
  if (s == "max") return HeadAggregate::Max;
  throw ConfigError("unknown head aggregate '" + std::string(s) + "' (expected mean or max)");
}

// Eval-mode attention of every layer and head, with token strings attached.
template <class Real>
AttentionMap extract_attention(const ModelParams<Real>& params, const TokenSequence& seq, const Vocabulary& vocab) {
  auto out = forward(seq, params, ForwardMode{false, nullptr, true});
  auto map = std::move(out.attention);
  map.tokens.reserve(map.token_ids.size());
  for (auto id : map.token_ids) map.tokens.push_back(vocab.decode(id));
  return map;
}

struct Association {
  std::size_t position = 0;
  TokenId token_id = kPadId;
  std::string token;
  double score = 0.0;       // attention weight, aggregated over heads
  double normalized = 0.0;  // score / sum of scores in the list
};

// Attention from `query` to every other content position in `layer` (the
// last layer by default), aggregated over heads. CLS, SEP and padding keys
// are excluded, as is the query itself. Sorted by descending score; equal
// scores keep position order.
inline std::vector<Association> association_scores(const AttentionMap& map, std::size_t query,
                                                   std::optional<std::size_t> layer = {},
                                                   HeadAggregate aggregate = HeadAggregate::Mean) {
  if (map.n_layers == 0 || map.n_heads == 0) throw ContractError("attention map is empty");
  if (query >= map.length) throw RangeError("query position " + std::to_string(query) + " out of range");
  if (map.token_ids.size() != map.length) throw ContractError("attention map lacks token ids");
  const auto qid = map.token_ids[query];
  if (qid == kPadId) throw ContractError("query position is padding");
  const std::size_t l = layer.value_or(map.n_layers - 1);
  if (l >= map.n_layers) throw RangeError("layer " + std::to_string(l) + " out of range");

  std::vector<Association> out;
  for (std::size_t k = 0; k < map.length; ++k) {
    const auto id = map.token_ids[k];
    if (k == query || id == kPadId || id == kClsId || id == kSepId) continue;
    double s = aggregate == HeadAggregate::Mean ? 0.0 : -1.0;
    for (std::size_t h = 0; h < map.n_heads; ++h) {
      const double w = map.at(l, h, query, k);
      s = aggregate == HeadAggregate::Mean ? s + w : std::max(s, w);
    }
    if (aggregate == HeadAggregate::Mean) s /= static_cast<double>(map.n_heads);
    Association a;
    a.position = k;
    a.token_id = id;
    a.token = k < map.tokens.size() ? map.tokens[k] : std::to_string(id);
    a.score = s;
    out.push_back(std::move(a));
  }
  double total = 0.0;
  for (const auto& a : out) total += a.score;
  for (auto& a : out) a.normalized = total > 0.0 ? a.score / total : 0.0;
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  return out;
}

// Positions holding `token` in the sequence.
inline std::vector<std::size_t> positions_of(const TokenSequence& seq, TokenId token) {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < seq.size(); ++p)
    if (seq.tokens[p] == token) out.push_back(p);
  return out;
}

// Content positions of a map (everything but CLS, SEP and padding).
inline std::vector<std::size_t> content_positions(const AttentionMap& map) {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < map.token_ids.size(); ++p)
    if (!Vocabulary::is_special(map.token_ids[p])) out.push_back(p);
  return out;
}

// Association report for each query position (all content positions when
// `queries` is empty), keeping the top_k entries of each ranking.
inline nlohmann::ordered_json association_report(const AttentionMap& map, std::vector<std::size_t> queries,
                                                 std::size_t top_k, std::optional<std::size_t> layer = {},
                                                 HeadAggregate aggregate = HeadAggregate::Mean) {
  if (map.n_layers == 0) throw ContractError("attention map is empty");
  if (queries.empty()) queries = content_positions(map);
  const std::size_t l = layer.value_or(map.n_layers - 1);
  nlohmann::ordered_json j;
  j["layer"] = l;
  j["n_layers"] = map.n_layers;
  j["n_heads"] = map.n_heads;
  j["aggregate"] = std::string(aggregate_name(aggregate));
  j["top_k"] = top_k;
  auto list = nlohmann::ordered_json::array();
  for (auto q : queries) {
    const auto assoc = association_scores(map, q, l, aggregate);
    nlohmann::ordered_json entry;
    entry["position"] = q;
    entry["token"] = q < map.tokens.size() ? map.tokens[q] : std::to_string(map.token_ids[q]);
    auto items = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < std::min(top_k, assoc.size()); ++i) {
      const auto& a = assoc[i];
      items.push_back({{"position", a.position}, {"token", a.token}, {"score", a.score}, {"normalized", a.normalized}});
    }
    entry["associations"] = std::move(items);
    list.push_back(std::move(entry));
  }
  j["queries"] = std::move(list);
  return j;
}

inline void export_associations(const AttentionMap& map, const std::string& path, std::size_t top_k,
                                std::vector<std::size_t> queries = {}, std::optional<std::size_t> layer = {},
                                HeadAggregate aggregate = HeadAggregate::Mean) {
  write_file(path, association_report(map, std::move(queries), top_k, layer, aggregate).dump(2) + "\n");
}

// Token-level summary across many query occurrences: the mean score of each
// associated token over the occurrences where it appeared.
struct TokenAssociation {
  std::string token;
  double mean_score = 0.0;
  std::size_t count = 0;
};

inline std::vector<TokenAssociation> aggregate_by_token(const std::vector<std::vector<Association>>& lists) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& list : lists) {
    // One entry per token per occurrence: take the strongest position.
    std::map<std::string, double> best;
    for (const auto& a : list) {
      auto [it, inserted] = best.emplace(a.token, a.score);
      if (!inserted) it->second = std::max(it->second, a.score);
    }
    for (const auto& [tok, s] : best) {
      acc[tok].first += s;
      acc[tok].second += 1;
    }
  }
  std::vector<TokenAssociation> out;
  for (const auto& [tok, v] : acc) out.push_back({tok, v.first / static_cast<double>(v.second), v.second});
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.mean_score > b.mean_score; });
  return out;
}

}  // namespace brltm
