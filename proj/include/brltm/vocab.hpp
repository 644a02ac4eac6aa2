#pragma once

// Token vocabulary over modality-tagged codes.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "brltm/cohort.hpp"
#include "brltm/error.hpp"
#include "brltm/hash.hpp"

namespace brltm {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kClsId = 1;
inline constexpr TokenId kSepId = 2;
inline constexpr TokenId kMaskId = 3;
inline constexpr TokenId kUnkId = 4;
inline constexpr TokenId kFirstContentId = 5;

inline constexpr std::array<std::string_view, 5> kSpecialTokens = {"PAD", "CLS", "SEP", "MASK", "UNK"};

// Three-character ICD-9 category: everything before the decimal point.
inline std::string group_icd9(std::string_view raw) {
  if (raw.empty()) throw ValidationError("empty diagnosis code");
  const auto dot = raw.find('.');
  if (dot == 0) throw ValidationError("diagnosis code has no category: '" + std::string(raw) + "'");
  return std::string(raw.substr(0, dot));
}

// "MODALITY:code", with diagnosis codes grouped to their category.
inline std::string token_string(const EventCode& e) {
  std::string out(modality_name(e.modality));
  out += ':';
  out += e.modality == Modality::Diag ? group_icd9(e.raw) : e.raw;
  return out;
}

// Feature-dimension accounting, including the two demographic features that
// are embedded through their own channels rather than as sequence tokens.
struct VocabularyReport {
  std::array<std::size_t, 4> per_modality{};
  std::size_t demographics = 2;

  std::size_t content_tokens() const {
    std::size_t n = 0;
    for (auto c : per_modality) n += c;
    return n;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    for (auto m : kModalities) j[std::string(modality_name(m))] = per_modality[static_cast<std::size_t>(m)];
    j["DEMOGRAPHICS"] = demographics;
    j["content_tokens"] = content_tokens();
    j["special_tokens"] = kSpecialTokens.size();
    return j;
  }
};

class Vocabulary {
 public:
  // Specials only.
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // `content` need not be sorted or unique; ids follow sorted order.
  explicit Vocabulary(std::vector<std::string> content) {
    std::sort(content.begin(), content.end());
    content.erase(std::unique(content.begin(), content.end()), content.end());
    for (auto s : kSpecialTokens) add(std::string(s));
    for (auto& t : content) {
      if (index_.contains(t)) throw FormatError("content token collides with a special: " + t);
      add(std::move(t));
    }
  }

  static Vocabulary build(const std::vector<PatientRecord>& records) {
    std::vector<std::string> content;
    for (const auto& r : records)
      for (const auto& v : r.visits)
        for (const auto& e : v.events) content.push_back(token_string(e));
    return Vocabulary(std::move(content));
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t content_size() const { return tokens_.size() - kFirstContentId; }

  TokenId encode(const EventCode& e) const { return encode_token(token_string(e)); }

  TokenId encode_token(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& decode(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw RangeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(tokens_.size()));
    return tokens_[static_cast<std::size_t>(id)];
  }

  static bool is_special(TokenId id) { return id < kFirstContentId; }

  const std::vector<std::string>& tokens() const { return tokens_; }

  VocabularyReport report() const {
    VocabularyReport r;
    for (std::size_t i = kFirstContentId; i < tokens_.size(); ++i) {
      const auto colon = tokens_[i].find(':');
      r.per_modality[static_cast<std::size_t>(parse_modality(tokens_[i].substr(0, colon)))]++;
    }
    return r;
  }

  // Canonical file bytes: {"tokens":[...]} where id = index.
  std::string serialize() const {
    nlohmann::ordered_json j;
    j["tokens"] = tokens_;
    return j.dump() + "\n";
  }

  std::string content_hash() const { return sha256_hex(serialize()); }

  static Vocabulary parse(std::string_view bytes) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("vocabulary: ") + e.what());
    }
    if (!j.is_object() || !j.contains("tokens") || !j["tokens"].is_array())
      throw ParseError("vocabulary: expected {\"tokens\": [...]}");
    const auto tokens = j["tokens"].get<std::vector<std::string>>();
    if (tokens.size() < kSpecialTokens.size())
      throw ParseError("vocabulary: missing special tokens");
    for (std::size_t i = 0; i < kSpecialTokens.size(); ++i)
      if (tokens[i] != kSpecialTokens[i]) throw ParseError("vocabulary: special token order mismatch");
    Vocabulary v(std::vector<std::string>(tokens.begin() + kFirstContentId, tokens.end()));
    if (v.tokens_ != tokens) throw ParseError("vocabulary: content tokens not sorted/unique");
    return v;
  }

  void save(const std::string& path) const { write_file(path, serialize()); }
  static Vocabulary load(const std::string& path) { return parse(read_file(path)); }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void add(std::string t) {
    index_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(t));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace brltm
