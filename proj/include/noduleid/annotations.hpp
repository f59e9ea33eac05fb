#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "noduleid/common.hpp"

namespace noduleid {

enum class TimePoint { T1, T2 };

inline std::string to_string(TimePoint t) { return t == TimePoint::T1 ? "T1" : "T2"; }

inline TimePoint parse_time_point(const std::string& s, int row = -1) {
  if (s == "T1") return TimePoint::T1;
  if (s == "T2") return TimePoint::T2;
  throw ParseError("row " + std::to_string(row) + ": bad value '" + s +
                       "' in column time_point (expected T1 or T2)",
                   row, "time_point");
}

// Ground-truth nodule location: world-space center and axial diameter.
struct NoduleAnnotation {
  std::string series_id;
  Vec3 center_world{0.0, 0.0, 0.0};
  double diameter = 0.0;  // mm, > 0
  TimePoint time_point = TimePoint::T1;
};

// Detector output: location, regressed diameter, and nodule probability.
struct Candidate {
  Vec3 center_world{0.0, 0.0, 0.0};
  double diameter = 0.0;
  double probability = 0.0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline double parse_number(const std::string& s, int row, const std::string& column) {
  const std::string t = trim(s);
  double value = 0.0;
  const char* begin = t.data();
  const char* end = t.data() + t.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || t.empty())
    throw ParseError("row " + std::to_string(row) + ": non-numeric value '" + s +
                         "' in column " + column,
                     row, column);
  return value;
}

// Shortest-exact double formatting: %.17g guarantees bit round-trip.
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void check_header(const std::vector<std::string>& got,
                         const std::vector<std::string>& want,
                         const std::filesystem::path& path) {
  bool ok = got.size() == want.size();
  for (std::size_t i = 0; ok && i < want.size(); ++i) ok = trim(got[i]) == want[i];
  if (!ok) {
    std::string w;
    for (std::size_t i = 0; i < want.size(); ++i) w += (i ? "," : "") + want[i];
    throw ParseError("bad CSV header in " + path.string() + " (expected: " + w + ")", 0);
  }
}

}  // namespace detail

inline const std::vector<std::string>& annotation_csv_header() {
  static const std::vector<std::string> h = {"series_id", "coord_x", "coord_y",
                                             "coord_z",   "diameter_mm", "time_point"};
  return h;
}

inline std::vector<NoduleAnnotation> load_annotations(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw NotFoundError("annotation file not found: " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw ParseError("empty annotation file: " + path.string(), 0);
  detail::check_header(detail::split_csv_line(line), annotation_csv_header(), path);

  std::vector<NoduleAnnotation> out;
  int row = 0;
  while (std::getline(f, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != 6)
      throw ParseError("row " + std::to_string(row) + ": expected 6 fields, got " +
                           std::to_string(fields.size()),
                       row);
    NoduleAnnotation a;
    a.series_id = detail::trim(fields[0]);
    a.center_world = {detail::parse_number(fields[1], row, "coord_x"),
                      detail::parse_number(fields[2], row, "coord_y"),
                      detail::parse_number(fields[3], row, "coord_z")};
    a.diameter = detail::parse_number(fields[4], row, "diameter_mm");
    if (!(a.diameter > 0.0))
      throw ParseError("row " + std::to_string(row) + ": diameter_mm must be positive", row,
                       "diameter_mm");
    a.time_point = parse_time_point(detail::trim(fields[5]), row);
    out.push_back(std::move(a));
  }
  return out;
}

inline void save_annotations(const std::vector<NoduleAnnotation>& annotations,
                             const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << "series_id,coord_x,coord_y,coord_z,diameter_mm,time_point\n";
  for (const auto& a : annotations) {
    f << a.series_id << "," << detail::format_double(a.center_world[0]) << ","
      << detail::format_double(a.center_world[1]) << ","
      << detail::format_double(a.center_world[2]) << ","
      << detail::format_double(a.diameter) << "," << to_string(a.time_point) << "\n";
  }
}

inline const std::vector<std::string>& candidate_csv_header() {
  static const std::vector<std::string> h = {"series_id", "coord_x", "coord_y",
                                             "coord_z",   "diameter_mm", "probability"};
  return h;
}

inline void save_candidates(const std::vector<std::pair<std::string, Candidate>>& rows,
                            const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << "series_id,coord_x,coord_y,coord_z,diameter_mm,probability\n";
  for (const auto& [sid, c] : rows) {
    f << sid << "," << detail::format_double(c.center_world[0]) << ","
      << detail::format_double(c.center_world[1]) << ","
      << detail::format_double(c.center_world[2]) << ","
      << detail::format_double(c.diameter) << "," << detail::format_double(c.probability)
      << "\n";
  }
}

inline std::vector<std::pair<std::string, Candidate>> load_candidates(
    const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw NotFoundError("candidate file not found: " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw ParseError("empty candidate file: " + path.string(), 0);
  detail::check_header(detail::split_csv_line(line), candidate_csv_header(), path);

  std::vector<std::pair<std::string, Candidate>> out;
  int row = 0;
  while (std::getline(f, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != 6)
      throw ParseError("row " + std::to_string(row) + ": expected 6 fields, got " +
                           std::to_string(fields.size()),
                       row);
    Candidate c;
    c.center_world = {detail::parse_number(fields[1], row, "coord_x"),
                      detail::parse_number(fields[2], row, "coord_y"),
                      detail::parse_number(fields[3], row, "coord_z")};
    c.diameter = detail::parse_number(fields[4], row, "diameter_mm");
    c.probability = detail::parse_number(fields[5], row, "probability");
    out.emplace_back(detail::trim(fields[0]), c);
  }
  return out;
}

}  // namespace noduleid
