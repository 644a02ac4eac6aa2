#pragma once

#include <charconv>
#include <chrono>
#include <cstdio>
#include <string>
#include <string_view>

#include "brltm/error.hpp"

namespace brltm {

using Date = std::chrono::sys_days;
using Days = std::chrono::days;

inline Date make_date(int year, unsigned month, unsigned day) {
  return Date{std::chrono::year{year} / std::chrono::month{month} / std::chrono::day{day}};
}

inline int year_of(Date d) { return static_cast<int>(std::chrono::year_month_day{d}.year()); }

// Strict ISO-8601 calendar date, "YYYY-MM-DD".
inline Date parse_date(std::string_view s) {
  auto field = [&](std::size_t pos, std::size_t len) {
    int v = 0;
    const char* first = s.data() + pos;
    const char* last = first + len;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last) throw ParseError("bad date '" + std::string(s) + "'");
    return v;
  };
  if (s.size() != 10 || s[4] != '-' || s[7] != '-')
    throw ParseError("bad date '" + std::string(s) + "'");
  const int y = field(0, 4);
  const int m = field(5, 2);
  const int d = field(8, 2);
  const std::chrono::year_month_day ymd{std::chrono::year{y} / m / d};
  if (!ymd.ok()) throw ParseError("invalid calendar date '" + std::string(s) + "'");
  return Date{ymd};
}

inline std::string format_date(Date d) {
  const std::chrono::year_month_day ymd{d};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

inline long days_between(Date from, Date to) { return (to - from).count(); }

}  // namespace brltm
