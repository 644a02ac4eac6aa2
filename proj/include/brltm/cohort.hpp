#pragma once

// Synthetic patient cohorts and the JSON-lines record format.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "brltm/date.hpp"
#include "brltm/error.hpp"
#include "brltm/rng.hpp"

namespace brltm {

enum class Modality : std::uint8_t { Diag = 0, Proc = 1, Med = 2, Topic = 3 };

inline constexpr std::array<Modality, 4> kModalities = {Modality::Diag, Modality::Proc,
                                                        Modality::Med, Modality::Topic};

constexpr std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::Diag: return "DIAG";
    case Modality::Proc: return "PROC";
    case Modality::Med: return "MED";
    case Modality::Topic: return "TOPIC";
  }
  return "?";
}

inline Modality parse_modality(std::string_view s) {
  for (auto m : kModalities)
    if (modality_name(m) == s) return m;
  throw ParseError("unknown modality tag '" + std::string(s) + "'");
}

struct EventCode {
  Modality modality = Modality::Diag;
  std::string raw;

  auto operator<=>(const EventCode&) const = default;
  bool operator==(const EventCode&) const = default;
};

struct Visit {
  Date date;
  std::vector<EventCode> events;

  bool operator==(const Visit&) const = default;
};

enum class Gender : std::uint8_t { F = 0, M = 1 };

struct PatientRecord {
  std::string id;
  Gender gender = Gender::F;
  int birth_year = 1950;
  std::vector<Visit> visits;
  std::optional<Date> onset;

  bool operator==(const PatientRecord&) const = default;
};

inline bool contains(const std::vector<EventCode>& events, const EventCode& code) {
  return std::find(events.begin(), events.end(), code) != events.end();
}

struct IntRange {
  int min = 0;
  int max = 0;
};

struct AssociationRule {
  EventCode trigger;
  EventCode companion;
  double probability = 1.0;
};

// Generator settings. Field groups:
//  * background: per-modality pools and per-visit draw ranges;
//  * association rules: trigger -> companion co-occurrence;
//  * depression: risk codes feed a logistic onset model, and optional
//    precursor codes are emitted before onset with a rate that decays with
//    time-to-onset.
struct CohortConfig {
  std::size_t n_patients = 1000;
  std::array<std::size_t, 4> codes_per_modality = {60, 40, 40, 20};
  IntRange visits_range = {4, 12};
  std::array<IntRange, 4> codes_per_visit = {IntRange{1, 2}, IntRange{0, 2}, IntRange{0, 2},
                                             IntRange{0, 1}};
  std::vector<AssociationRule> association_rules;
  std::vector<EventCode> risk_codes = {{Modality::Diag, "311.1"}, {Modality::Med, "RX_RISK1"},
                                       {Modality::Topic, "T_RISK1"}};
  double risk_code_rate = 0.15;
  double risk_logit_weight = 1.5;
  double risk_bias = -1.0;
  double precursor_rate = 0.0;
  double precursor_decay_days = 90.0;
  std::array<EventCode, 3> sentinel_depression_codes = {
      EventCode{Modality::Diag, "296.20"}, EventCode{Modality::Med, "RX_SSRI"},
      EventCode{Modality::Topic, "T_DEPRESSION"}};
  IntRange first_visit_years = {2008, 2012};
  IntRange birth_years = {1930, 1985};
  double female_fraction = 0.7;
  std::uint64_t seed = 0;

  void validate() const;
};

// Number of distinct raw diagnosis codes that share one three-digit group in
// the generated pools, so that grouping visibly reduces dimensionality.
inline constexpr std::size_t kDiagCodesPerGroup = 2;

// Raw code string of the i-th background code of a modality.
inline std::string pool_code(Modality m, std::size_t i) {
  char buf[32];
  switch (m) {
    case Modality::Diag:
      std::snprintf(buf, sizeof buf, "%03zu.%zu", i / kDiagCodesPerGroup + 1, i % kDiagCodesPerGroup);
      break;
    case Modality::Proc: std::snprintf(buf, sizeof buf, "%05zu", 10000 + i); break;
    case Modality::Med: std::snprintf(buf, sizeof buf, "RX%05zu", i + 1); break;
    case Modality::Topic: std::snprintf(buf, sizeof buf, "T%03zu", i); break;
  }
  return buf;
}

namespace detail {

inline bool valid_raw(const std::string& raw) {
  return !raw.empty() &&
         std::none_of(raw.begin(), raw.end(), [](unsigned char c) { return std::isspace(c); });
}

// Codes the background sampler must never emit: they are placed only by their
// own mechanism (sentinels at onset, risk codes by the risk model, companions
// by their rule).
inline std::vector<EventCode> reserved_codes(const CohortConfig& c) {
  std::vector<EventCode> out(c.sentinel_depression_codes.begin(), c.sentinel_depression_codes.end());
  out.insert(out.end(), c.risk_codes.begin(), c.risk_codes.end());
  for (const auto& r : c.association_rules) out.push_back(r.companion);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace detail

inline void CohortConfig::validate() const {
  auto check_range = [](IntRange r, const std::string& what) {
    if (r.min < 0 || r.min > r.max) throw ConfigError(what + ": need 0 <= min <= max");
  };
  check_range(visits_range, "visits_range");
  check_range(first_visit_years, "first_visit_years");
  check_range(birth_years, "birth_years");
  const auto reserved = detail::reserved_codes(*this);
  int min_events = 0;
  for (auto m : kModalities) {
    const auto k = static_cast<std::size_t>(m);
    if (codes_per_modality[k] == 0)
      throw ConfigError("empty vocabulary for modality " + std::string(modality_name(m)));
    check_range(codes_per_visit[k], "codes_per_visit[" + std::string(modality_name(m)) + "]");
    std::size_t usable = 0;
    for (std::size_t i = 0; i < codes_per_modality[k]; ++i)
      if (!std::binary_search(reserved.begin(), reserved.end(), EventCode{m, pool_code(m, i)}))
        ++usable;
    if (static_cast<std::size_t>(codes_per_visit[k].max) > usable)
      throw ConfigError("codes_per_visit max exceeds usable pool for " + std::string(modality_name(m)));
    min_events += codes_per_visit[k].min;
  }
  if (min_events < 1) throw ConfigError("codes_per_visit minima must sum to at least 1");
  auto in_unit = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!in_unit(risk_code_rate) || !in_unit(precursor_rate) || !in_unit(female_fraction))
    throw ConfigError("rates must lie in [0,1]");
  if (!(precursor_decay_days > 0.0)) throw ConfigError("precursor_decay_days must be positive");
  if (!std::isfinite(risk_logit_weight) || !std::isfinite(risk_bias))
    throw ConfigError("risk logit parameters must be finite");
  for (const auto& r : association_rules) {
    if (!in_unit(r.probability)) throw ConfigError("rule probability outside [0,1]");
    if (!detail::valid_raw(r.trigger.raw) || !detail::valid_raw(r.companion.raw))
      throw ConfigError("rule codes must be non-empty without whitespace");
  }
  for (const auto& s : sentinel_depression_codes) {
    if (!detail::valid_raw(s.raw)) throw ConfigError("sentinel code must be non-empty");
    if (contains(risk_codes, s)) throw ConfigError("sentinel codes must be disjoint from risk codes");
  }
  if (sentinel_depression_codes[0].modality != Modality::Diag ||
      sentinel_depression_codes[1].modality != Modality::Med ||
      sentinel_depression_codes[2].modality != Modality::Topic)
    throw ConfigError("sentinels must be one DIAG, one MED and one TOPIC code, in that order");
  for (const auto& r : risk_codes)
    if (!detail::valid_raw(r.raw)) throw ConfigError("risk code must be non-empty");
  if (risk_codes.empty() && (risk_code_rate > 0.0 || precursor_rate > 0.0))
    throw ConfigError("risk_code_rate/precursor_rate need at least one risk code");
}

// ---------------------------------------------------------------------------
// JSON (config and records)

inline nlohmann::ordered_json to_json(const EventCode& e) {
  nlohmann::ordered_json j;
  j["m"] = modality_name(e.modality);
  j["c"] = e.raw;
  return j;
}

inline EventCode event_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("m") || !j.contains("c"))
    throw ParseError("event must be an object with keys \"m\" and \"c\"");
  EventCode e{parse_modality(j.at("m").get<std::string>()), j.at("c").get<std::string>()};
  if (!detail::valid_raw(e.raw)) throw ParseError("event code must be non-empty without whitespace");
  return e;
}

namespace detail {

inline IntRange range_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 2) throw ConfigError(std::string(what) + " must be [min, max]");
  return {j[0].get<int>(), j[1].get<int>()};
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                       const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("unknown key '" + key + "' in " + what);
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const CohortConfig& c) {
  nlohmann::ordered_json j;
  j["n_patients"] = c.n_patients;
  nlohmann::ordered_json counts, per_visit;
  for (auto m : kModalities) {
    const auto k = static_cast<std::size_t>(m);
    counts[std::string(modality_name(m))] = c.codes_per_modality[k];
    per_visit[std::string(modality_name(m))] = {c.codes_per_visit[k].min, c.codes_per_visit[k].max};
  }
  j["codes_per_modality"] = counts;
  j["visits_range"] = {c.visits_range.min, c.visits_range.max};
  j["codes_per_visit"] = per_visit;
  auto rules = nlohmann::ordered_json::array();
  for (const auto& r : c.association_rules) {
    nlohmann::ordered_json jr;
    jr["trigger"] = to_json(r.trigger);
    jr["companion"] = to_json(r.companion);
    jr["probability"] = r.probability;
    rules.push_back(jr);
  }
  j["association_rules"] = rules;
  auto risk = nlohmann::ordered_json::array();
  for (const auto& r : c.risk_codes) risk.push_back(to_json(r));
  j["risk_codes"] = risk;
  j["risk_code_rate"] = c.risk_code_rate;
  j["risk_logit_weight"] = c.risk_logit_weight;
  j["risk_bias"] = c.risk_bias;
  j["precursor_rate"] = c.precursor_rate;
  j["precursor_decay_days"] = c.precursor_decay_days;
  auto sentinels = nlohmann::ordered_json::array();
  for (const auto& s : c.sentinel_depression_codes) sentinels.push_back(to_json(s));
  j["sentinel_depression_codes"] = sentinels;
  j["first_visit_years"] = {c.first_visit_years.min, c.first_visit_years.max};
  j["birth_years"] = {c.birth_years.min, c.birth_years.max};
  j["female_fraction"] = c.female_fraction;
  j["seed"] = c.seed;
  return j;
}

// Missing keys keep their defaults; unknown keys are rejected.
inline CohortConfig cohort_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"n_patients", "codes_per_modality", "visits_range", "codes_per_visit",
                      "association_rules", "risk_codes", "risk_code_rate", "risk_logit_weight",
                      "risk_bias", "precursor_rate", "precursor_decay_days",
                      "sentinel_depression_codes", "first_visit_years", "birth_years",
                      "female_fraction", "seed"},
                     "cohort config");
  CohortConfig c;
  try {
    if (j.contains("n_patients")) c.n_patients = j["n_patients"].get<std::size_t>();
    if (j.contains("codes_per_modality"))
      for (const auto& [key, v] : j["codes_per_modality"].items())
        c.codes_per_modality[static_cast<std::size_t>(parse_modality(key))] = v.get<std::size_t>();
    if (j.contains("visits_range")) c.visits_range = detail::range_from_json(j["visits_range"], "visits_range");
    if (j.contains("codes_per_visit"))
      for (const auto& [key, v] : j["codes_per_visit"].items())
        c.codes_per_visit[static_cast<std::size_t>(parse_modality(key))] =
            detail::range_from_json(v, "codes_per_visit");
    if (j.contains("association_rules")) {
      c.association_rules.clear();
      for (const auto& jr : j["association_rules"])
        c.association_rules.push_back({event_from_json(jr.at("trigger")),
                                       event_from_json(jr.at("companion")),
                                       jr.at("probability").get<double>()});
    }
    if (j.contains("risk_codes")) {
      c.risk_codes.clear();
      for (const auto& jr : j["risk_codes"]) c.risk_codes.push_back(event_from_json(jr));
    }
    if (j.contains("risk_code_rate")) c.risk_code_rate = j["risk_code_rate"].get<double>();
    if (j.contains("risk_logit_weight")) c.risk_logit_weight = j["risk_logit_weight"].get<double>();
    if (j.contains("risk_bias")) c.risk_bias = j["risk_bias"].get<double>();
    if (j.contains("precursor_rate")) c.precursor_rate = j["precursor_rate"].get<double>();
    if (j.contains("precursor_decay_days")) c.precursor_decay_days = j["precursor_decay_days"].get<double>();
    if (j.contains("sentinel_depression_codes")) {
      const auto& js = j["sentinel_depression_codes"];
      if (!js.is_array() || js.size() != 3) throw ConfigError("sentinel_depression_codes needs 3 codes");
      for (std::size_t i = 0; i < 3; ++i) c.sentinel_depression_codes[i] = event_from_json(js[i]);
    }
    if (j.contains("first_visit_years"))
      c.first_visit_years = detail::range_from_json(j["first_visit_years"], "first_visit_years");
    if (j.contains("birth_years")) c.birth_years = detail::range_from_json(j["birth_years"], "birth_years");
    if (j.contains("female_fraction")) c.female_fraction = j["female_fraction"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("cohort config: ") + e.what());
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Generation

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace detail {

inline void add_unique(std::vector<EventCode>& events, const EventCode& code) {
  if (!contains(events, code)) events.push_back(code);
}

inline std::size_t distinct_risk_codes(const std::vector<Visit>& visits, std::size_t end,
                                       const std::vector<EventCode>& risk_codes) {
  std::size_t n = 0;
  for (const auto& r : risk_codes)
    for (std::size_t v = 0; v < end; ++v)
      if (contains(visits[v].events, r)) {
        ++n;
        break;
      }
  return n;
}

}  // namespace detail

// Onset probability of the planted mechanism for a given risk-code count.
inline double onset_probability(const CohortConfig& c, std::size_t distinct_risk) {
  return logistic(c.risk_logit_weight * static_cast<double>(distinct_risk) + c.risk_bias);
}

// Deterministic in (config, seed): patient i draws from stream {seed, i}.
inline std::vector<PatientRecord> generate_cohort(const CohortConfig& config) {
  config.validate();
  const auto reserved = detail::reserved_codes(config);
  std::array<std::vector<EventCode>, 4> pools;
  for (auto m : kModalities) {
    const auto k = static_cast<std::size_t>(m);
    for (std::size_t i = 0; i < config.codes_per_modality[k]; ++i) {
      EventCode code{m, pool_code(m, i)};
      if (!std::binary_search(reserved.begin(), reserved.end(), code)) pools[k].push_back(std::move(code));
    }
  }
  const Date first_day = make_date(config.first_visit_years.min, 1, 1);
  const Date last_day = make_date(config.first_visit_years.max, 12, 31);

  std::vector<PatientRecord> cohort;
  cohort.reserve(config.n_patients);
  for (std::size_t p = 0; p < config.n_patients; ++p) {
    Rng rng = Rng::stream(config.seed, {p});
    PatientRecord rec;
    char id[24];
    std::snprintf(id, sizeof id, "P%06zu", p);
    rec.id = id;
    rec.gender = rng.bernoulli(config.female_fraction) ? Gender::F : Gender::M;
    rec.birth_year = static_cast<int>(rng.uniform_range(config.birth_years.min, config.birth_years.max));
    const auto n_visits =
        static_cast<std::size_t>(rng.uniform_range(config.visits_range.min, config.visits_range.max));
    Date date = first_day + Days{rng.uniform_range(0, days_between(first_day, last_day))};
    for (std::size_t v = 0; v < n_visits; ++v) {
      if (v > 0) date += Days{rng.uniform_range(7, 90)};
      Visit visit{date, {}};
      for (auto m : kModalities) {
        const auto k = static_cast<std::size_t>(m);
        const auto n = rng.uniform_range(config.codes_per_visit[k].min, config.codes_per_visit[k].max);
        for (std::int64_t drawn = 0; drawn < n;) {
          const auto& code = pools[k][rng.uniform_int(pools[k].size())];
          if (contains(visit.events, code)) continue;
          visit.events.push_back(code);
          ++drawn;
        }
      }
      if (!config.risk_codes.empty() && rng.bernoulli(config.risk_code_rate))
        detail::add_unique(visit.events, config.risk_codes[rng.uniform_int(config.risk_codes.size())]);
      rec.visits.push_back(std::move(visit));
    }

    const std::size_t half = n_visits / 2;
    const auto risk = detail::distinct_risk_codes(rec.visits, half, config.risk_codes);
    if (rng.bernoulli(onset_probability(config, risk)) && n_visits >= 2) {
      const auto onset_idx = static_cast<std::size_t>(
          rng.uniform_range(static_cast<std::int64_t>(std::max<std::size_t>(half, 1)),
                            static_cast<std::int64_t>(n_visits - 1)));
      auto& onset_visit = rec.visits[onset_idx];
      for (const auto& s : config.sentinel_depression_codes) detail::add_unique(onset_visit.events, s);
      rec.onset = onset_visit.date;
      if (config.precursor_rate > 0.0) {
        for (std::size_t v = 0; v < onset_idx; ++v) {
          const double gap = static_cast<double>(days_between(rec.visits[v].date, onset_visit.date));
          const double p_pre =
              std::min(1.0, config.precursor_rate * std::exp(-gap / config.precursor_decay_days));
          if (rng.bernoulli(p_pre))
            detail::add_unique(rec.visits[v].events,
                               config.risk_codes[rng.uniform_int(config.risk_codes.size())]);
        }
      }
    }

    for (auto& visit : rec.visits)
      for (const auto& rule : config.association_rules)
        if (contains(visit.events, rule.trigger) && rng.bernoulli(rule.probability))
          detail::add_unique(visit.events, rule.companion);
    cohort.push_back(std::move(rec));
  }
  return cohort;
}

// ---------------------------------------------------------------------------
// Record file format (JSON lines)

inline nlohmann::ordered_json to_json(const PatientRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["gender"] = r.gender == Gender::F ? "F" : "M";
  j["birth_year"] = r.birth_year;
  j["onset"] = r.onset ? nlohmann::ordered_json(format_date(*r.onset)) : nlohmann::ordered_json(nullptr);
  auto visits = nlohmann::ordered_json::array();
  for (const auto& v : r.visits) {
    nlohmann::ordered_json jv;
    jv["date"] = format_date(v.date);
    auto events = nlohmann::ordered_json::array();
    for (const auto& e : v.events) events.push_back(to_json(e));
    jv["events"] = events;
    visits.push_back(jv);
  }
  j["visits"] = visits;
  return j;
}

inline PatientRecord record_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("record must be a JSON object");
  PatientRecord r;
  r.id = j.at("id").get<std::string>();
  const auto g = j.at("gender").get<std::string>();
  if (g == "F") r.gender = Gender::F;
  else if (g == "M") r.gender = Gender::M;
  else throw ParseError("gender must be \"F\" or \"M\"");
  r.birth_year = j.at("birth_year").get<int>();
  if (const auto& o = j.at("onset"); !o.is_null()) r.onset = parse_date(o.get<std::string>());
  for (const auto& jv : j.at("visits")) {
    Visit v{parse_date(jv.at("date").get<std::string>()), {}};
    for (const auto& je : jv.at("events")) v.events.push_back(event_from_json(je));
    r.visits.push_back(std::move(v));
  }
  for (std::size_t i = 1; i < r.visits.size(); ++i)
    if (r.visits[i].date < r.visits[i - 1].date) throw ParseError("visit dates must be non-decreasing");
  return r;
}

// Drops visits without events, then patients with fewer than two visits.
inline std::vector<PatientRecord> preprocess(std::vector<PatientRecord> records) {
  std::vector<PatientRecord> out;
  out.reserve(records.size());
  for (auto& r : records) {
    std::erase_if(r.visits, [](const Visit& v) { return v.events.empty(); });
    if (r.visits.size() < 2) continue;
    if (r.onset && *r.onset < r.visits.front().date)
      throw ParseError("patient " + r.id + ": onset precedes first visit");
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string serialize_records(const std::vector<PatientRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<PatientRecord> parse_records(std::istream& in) {
  std::vector<PatientRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return preprocess(std::move(records));
}

inline std::vector<PatientRecord> load_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open records file '" + path + "'");
  return parse_records(in);
}

inline void write_records(const std::vector<PatientRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const auto bytes = serialize_records(records);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace brltm
