#pragma once

#include <unistd.h>

#include <filesystem>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "brltm/cohort.hpp"
#include "brltm/date.hpp"
#include "brltm/model.hpp"
#include "brltm/rng.hpp"

namespace brltm::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    const auto base = std::filesystem::temp_directory_path();
    for (std::uint64_t i = 0;; ++i) {
      path_ = base / ("brltm_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(i));
      if (std::filesystem::create_directory(path_)) break;
    }
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline EventCode diag(std::string c) { return {Modality::Diag, std::move(c)}; }
inline EventCode proc(std::string c) { return {Modality::Proc, std::move(c)}; }
inline EventCode med(std::string c) { return {Modality::Med, std::move(c)}; }
inline EventCode topic(std::string c) { return {Modality::Topic, std::move(c)}; }

inline Visit visit(const std::string& date, std::vector<EventCode> events) {
  return Visit{parse_date(date), std::move(events)};
}

inline PatientRecord record(std::string id, std::vector<Visit> visits, std::optional<std::string> onset = {},
                            int birth_year = 1950, Gender g = Gender::F) {
  PatientRecord r;
  r.id = std::move(id);
  r.gender = g;
  r.birth_year = birth_year;
  r.visits = std::move(visits);
  if (onset) r.onset = parse_date(*onset);
  return r;
}

inline std::vector<EventCode> default_sentinels() {
  const auto s = CohortConfig{}.sentinel_depression_codes;
  return {s.begin(), s.end()};
}

// Small cohort for fast tests.
inline CohortConfig small_cohort(std::size_t n = 200, std::uint64_t seed = 1) {
  CohortConfig c;
  c.n_patients = n;
  c.codes_per_modality = {20, 16, 16, 8};
  c.visits_range = {3, 6};
  c.seed = seed;
  return c;
}

// Sequence with one visit per entry of `visits`, ages 40, 41, ...
inline TokenSequence make_sequence(const std::vector<std::vector<TokenId>>& visits, std::int32_t gender = 0) {
  TokenSequence s;
  s.gender = gender;
  auto push = [&](TokenId t, std::int32_t seg, std::int32_t age) {
    s.positions.push_back(static_cast<std::int32_t>(s.tokens.size()));
    s.tokens.push_back(t);
    s.segments.push_back(seg);
    s.ages.push_back(age);
    s.pad_mask.push_back(1);
  };
  push(kClsId, kSegmentA, 40);
  for (std::size_t v = 0; v < visits.size(); ++v) {
    const auto seg = v % 2 == 0 ? kSegmentA : kSegmentB;
    const auto age = 40 + static_cast<std::int32_t>(v);
    for (auto t : visits[v]) push(t, seg, age);
    push(kSepId, seg, age);
  }
  return s;
}

// Adds N(0, stddev^2) noise to every trainable tensor, moving a fresh init
// away from its near-uniform attention regime.
template <class Real>
void perturb(const ModelParams<Real>& p, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  for (auto np : p.named(false))
    for (auto& v : np.tensor.mutable_values()) v += static_cast<Real>(stddev * rng.normal());
}

}  // namespace brltm::test
