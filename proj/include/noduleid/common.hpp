#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace noduleid {

// World-space vector (mm) and voxel-index triple. Axis order is (x, y, z)
// throughout; volume memory is x-fastest.
using Vec3 = std::array<double, 3>;
using Idx3 = std::array<int, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double distance(const Vec3& a, const Vec3& b) { return norm(a - b); }

// Thrown when a text input (CSV, JSON header) cannot be parsed. Carries the
// offending row and column so callers can point at the exact field.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::string msg, int row = -1, std::string column = "")
      : std::runtime_error(std::move(msg)), row_(row), column_(std::move(column)) {}
  int row() const { return row_; }
  const std::string& column() const { return column_; }

 private:
  int row_;
  std::string column_;
};

// Invalid run/model configuration (unknown siamese name, single-class
// training data, incompatible head/tap combination, ...).
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class NotFoundError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class CorruptCheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace noduleid
