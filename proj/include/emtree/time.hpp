#pragma once

#include <chrono>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace emtree {

using Duration = std::chrono::seconds;

// Seconds since the Unix epoch, UTC.
struct Timestamp {
  std::int64_t seconds = 0;

  constexpr auto operator<=>(const Timestamp&) const = default;

  constexpr Timestamp operator+(Duration d) const { return {seconds + d.count()}; }
  constexpr Timestamp operator-(Duration d) const { return {seconds - d.count()}; }
  constexpr Duration operator-(Timestamp other) const { return Duration{seconds - other.seconds}; }
  constexpr Timestamp& operator+=(Duration d) {
    seconds += d.count();
    return *this;
  }
};

struct TimeSpan {
  Timestamp start;
  Timestamp end;

  constexpr bool operator==(const TimeSpan&) const = default;

  constexpr Duration length() const { return end - start; }
  constexpr bool valid() const { return start <= end; }
  constexpr bool contains(Timestamp t) const { return start <= t && t <= end; }
  constexpr bool intersects(const TimeSpan& o) const { return start <= o.end && o.start <= end; }
  constexpr TimeSpan hull(const TimeSpan& o) const {
    return {start < o.start ? start : o.start, end > o.end ? end : o.end};
  }
  static constexpr TimeSpan at(Timestamp t) { return {t, t}; }
};

// "2024/04/24 09:00:13"
std::string format_timestamp(Timestamp t);
// "2024/04/24 09:00"
std::string format_minute(Timestamp t);
// "2024/04/24 09:00–09:20", or the full end date when the span crosses midnight.
std::string format_span(const TimeSpan& span);

// Accepts "2024/04/24 09:00:13", "2024-04-24T09:00:13Z" and "2024-04-24 09:00".
std::optional<Timestamp> parse_timestamp(std::string_view text);

Timestamp make_timestamp(int year, unsigned month, unsigned day, int hour = 0, int minute = 0,
                         int second = 0);

// Seconds since midnight UTC.
std::int64_t time_of_day(Timestamp t);

}  // namespace emtree
