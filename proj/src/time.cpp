#include "emtree/time.hpp"

#include <cstdio>

namespace emtree {

namespace {

struct Civil {
  int year;
  unsigned month;
  unsigned day;
  int hour;
  int minute;
  int second;
};

Civil to_civil(Timestamp t) {
  using namespace std::chrono;
  const sys_seconds tp{seconds{t.seconds}};
  const auto day_point = floor<days>(tp);
  const year_month_day ymd{day_point};
  const hh_mm_ss hms{tp - day_point};
  return {static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
          static_cast<unsigned>(ymd.day()), static_cast<int>(hms.hours().count()),
          static_cast<int>(hms.minutes().count()), static_cast<int>(hms.seconds().count())};
}

}  // namespace

Timestamp make_timestamp(int year, unsigned month, unsigned day, int hour, int minute, int second) {
  using namespace std::chrono;
  const sys_days d{std::chrono::year{year} / std::chrono::month{month} / std::chrono::day{day}};
  const auto secs = d.time_since_epoch() + hours{hour} + minutes{minute} + seconds{second};
  return Timestamp{duration_cast<seconds>(secs).count()};
}

std::int64_t time_of_day(Timestamp t) {
  constexpr std::int64_t kDay = 86400;
  return ((t.seconds % kDay) + kDay) % kDay;
}

std::string format_timestamp(Timestamp t) {
  const auto c = to_civil(t);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d/%02u/%02u %02d:%02d:%02d", c.year, c.month, c.day, c.hour,
                c.minute, c.second);
  return buf;
}

std::string format_minute(Timestamp t) {
  const auto c = to_civil(t);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d/%02u/%02u %02d:%02d", c.year, c.month, c.day, c.hour,
                c.minute);
  return buf;
}

std::string format_span(const TimeSpan& span) {
  const auto a = to_civil(span.start);
  const auto b = to_civil(span.end);
  std::string out = format_minute(span.start);
  out += "–";
  if (a.year == b.year && a.month == b.month && a.day == b.day) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%02d:%02d", b.hour, b.minute);
    out += buf;
  } else {
    out += format_minute(span.end);
  }
  return out;
}

std::optional<Timestamp> parse_timestamp(std::string_view text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  const std::string str{text};
  char sep1 = 0, sep2 = 0, sep3 = 0;
  const int n = std::sscanf(str.c_str(), "%d%c%d%c%d%c%d:%d:%d", &y, &sep1, &mo, &sep2, &d, &sep3,
                            &h, &mi, &s);
  if (n < 5) return std::nullopt;
  if (!((sep1 == '/' && sep2 == '/') || (sep1 == '-' && sep2 == '-'))) return std::nullopt;
  if (n >= 6 && sep3 != ' ' && sep3 != 'T') return std::nullopt;
  if (n < 8) {
    h = n >= 7 ? h : 0;
    mi = 0;
  }
  if (n < 9) s = 0;
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 ||
      s > 60) {
    return std::nullopt;
  }
  return make_timestamp(y, static_cast<unsigned>(mo), static_cast<unsigned>(d), h, mi, s);
}

}  // namespace emtree
