#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "noduleid/common.hpp"
#include "noduleid/tensor.hpp"

namespace noduleid {

// 3D CT volume in Hounsfield units (or normalized intensities after
// normalize_hu). Memory layout is x-fastest: index = x + nx*(y + ny*z).
struct Volume {
  Idx3 dims{0, 0, 0};          // nx, ny, nz
  Vec3 spacing{1.0, 1.0, 1.0}; // mm per voxel
  Vec3 origin{0.0, 0.0, 0.0};  // world position of voxel (0,0,0), mm
  std::vector<float> voxels;

  Volume() = default;
  Volume(Idx3 d, Vec3 sp, Vec3 org)
      : dims(d), spacing(sp), origin(org),
        voxels(static_cast<std::size_t>(d[0]) * d[1] * d[2], 0.0f) {
    validate();
  }

  std::int64_t numel() const {
    return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
  }

  std::int64_t index(int x, int y, int z) const {
    return x + static_cast<std::int64_t>(dims[0]) * (y + static_cast<std::int64_t>(dims[1]) * z);
  }

  float at(int x, int y, int z) const { return voxels[static_cast<std::size_t>(index(x, y, z))]; }
  float& at(int x, int y, int z) { return voxels[static_cast<std::size_t>(index(x, y, z))]; }

  bool in_bounds(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw std::invalid_argument("volume dims must be >= 1");
      if (!(spacing[a] > 0.0)) throw std::invalid_argument("volume spacing must be positive");
    }
  }
};

inline Vec3 world_to_voxel(const Vec3& p_world, const Volume& v) {
  return {(p_world[0] - v.origin[0]) / v.spacing[0],
          (p_world[1] - v.origin[1]) / v.spacing[1],
          (p_world[2] - v.origin[2]) / v.spacing[2]};
}

inline Vec3 voxel_to_world(const Vec3& idx, const Volume& v) {
  return {v.origin[0] + idx[0] * v.spacing[0],
          v.origin[1] + idx[1] * v.spacing[1],
          v.origin[2] + idx[2] * v.spacing[2]};
}

namespace detail {

// lerp written so that a == b reproduces a exactly (constant volumes stay
// bit-identical under resampling).
inline float lerp(float a, float b, double t) {
  return static_cast<float>(a + t * (static_cast<double>(b) - a));
}

// Clamped trilinear sample at continuous voxel coordinate.
inline float sample_trilinear(const Volume& v, double cx, double cy, double cz) {
  const auto clampf = [](double c, int n) {
    return std::clamp(c, 0.0, static_cast<double>(n - 1));
  };
  cx = clampf(cx, v.dims[0]);
  cy = clampf(cy, v.dims[1]);
  cz = clampf(cz, v.dims[2]);
  const int x0 = static_cast<int>(cx), y0 = static_cast<int>(cy), z0 = static_cast<int>(cz);
  const int x1 = std::min(x0 + 1, v.dims[0] - 1);
  const int y1 = std::min(y0 + 1, v.dims[1] - 1);
  const int z1 = std::min(z0 + 1, v.dims[2] - 1);
  const double fx = cx - x0, fy = cy - y0, fz = cz - z0;

  const float c000 = v.at(x0, y0, z0), c100 = v.at(x1, y0, z0);
  const float c010 = v.at(x0, y1, z0), c110 = v.at(x1, y1, z0);
  const float c001 = v.at(x0, y0, z1), c101 = v.at(x1, y0, z1);
  const float c011 = v.at(x0, y1, z1), c111 = v.at(x1, y1, z1);

  const float c00 = lerp(c000, c100, fx), c10 = lerp(c010, c110, fx);
  const float c01 = lerp(c001, c101, fx), c11 = lerp(c011, c111, fx);
  const float c0 = lerp(c00, c10, fy), c1 = lerp(c01, c11, fy);
  return lerp(c0, c1, fz);
}

}  // namespace detail

// Resample to a new voxel grid with trilinear interpolation. Output dims are
// round(in_dim * in_spacing / out_spacing), which preserves the physical
// extent within one output voxel per axis. Origin is unchanged.
inline Volume resample_isotropic(const Volume& v, const Vec3& target_spacing) {
  v.validate();
  for (int a = 0; a < 3; ++a)
    if (!(target_spacing[a] > 0.0))
      throw std::invalid_argument("target spacing must be positive");

  Idx3 out_dims;
  for (int a = 0; a < 3; ++a) {
    out_dims[a] = std::max(1, static_cast<int>(std::llround(
        v.dims[a] * v.spacing[a] / target_spacing[a])));
  }
  Volume out(out_dims, target_spacing, v.origin);

  const double rx = target_spacing[0] / v.spacing[0];
  const double ry = target_spacing[1] / v.spacing[1];
  const double rz = target_spacing[2] / v.spacing[2];
  std::int64_t i = 0;
  for (int z = 0; z < out_dims[2]; ++z)
    for (int y = 0; y < out_dims[1]; ++y)
      for (int x = 0; x < out_dims[0]; ++x, ++i)
        out.voxels[static_cast<std::size_t>(i)] =
            detail::sample_trilinear(v, x * rx, y * ry, z * rz);
  return out;
}

// HU window [-1000, 600] mapped linearly onto [0, 1]; air lands exactly at 0.
inline float normalize_hu_value(float hu) {
  const float c = std::clamp(hu, -1000.0f, 600.0f);
  return (c + 1000.0f) / 1600.0f;
}

inline Volume normalize_hu(const Volume& v) {
  Volume out = v;
  for (float& x : out.voxels) x = normalize_hu_value(x);
  return out;
}

// Cubic crop around a world-space point. `normalized` records whether the
// source volume held [0,1] intensities.
struct Patch {
  int side = 0;
  bool normalized = false;
  Vec3 source_center_world{0.0, 0.0, 0.0};
  std::vector<float> values;  // x-fastest, like Volume

  std::int64_t index(int x, int y, int z) const {
    return x + static_cast<std::int64_t>(side) * (y + static_cast<std::int64_t>(side) * z);
  }
  float at(int x, int y, int z) const { return values[static_cast<std::size_t>(index(x, y, z))]; }

  // View as a (1, side, side, side) NN input, (C, D=z, H=y, W=x).
  Tensor<float> as_input() const {
    Tensor<float> t({1, side, side, side});
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }
};

// Crop a cube of `side` voxels centered at the voxel containing
// `center_world`. The cube spans [c - side/2, c + side/2) per axis; voxels
// outside the volume are padded with 0 (normalized air).
inline Patch extract_patch(const Volume& v, const Vec3& center_world, int side) {
  if (side < 1) throw std::invalid_argument("patch side must be >= 1");
  Patch p;
  p.side = side;
  p.normalized = true;
  p.source_center_world = center_world;
  p.values.assign(static_cast<std::size_t>(side) * side * side, 0.0f);

  const Vec3 cv = world_to_voxel(center_world, v);
  const int cx = static_cast<int>(std::floor(cv[0]));
  const int cy = static_cast<int>(std::floor(cv[1]));
  const int cz = static_cast<int>(std::floor(cv[2]));
  const int half = side / 2;
  const int x0 = cx - half, y0 = cy - half, z0 = cz - half;

  for (int z = 0; z < side; ++z) {
    const int vz = z0 + z;
    if (vz < 0 || vz >= v.dims[2]) continue;
    for (int y = 0; y < side; ++y) {
      const int vy = y0 + y;
      if (vy < 0 || vy >= v.dims[1]) continue;
      const int xa = std::max(0, -x0);
      const int xb = std::min(side, v.dims[0] - x0);
      if (xa >= xb) continue;
      const float* src = &v.voxels[static_cast<std::size_t>(v.index(x0 + xa, vy, vz))];
      float* dst = &p.values[static_cast<std::size_t>(p.index(xa, y, z))];
      std::copy(src, src + (xb - xa), dst);
    }
  }
  return p;
}

// One tile of an overlapping split: the patch, its start voxel in the source
// volume, and the (3, g, g, g) grid of scan-relative coordinates in [-1, 1]
// (g = side/4; channels ordered x, y, z).
struct LocatedPatch {
  Patch patch;
  Idx3 start{0, 0, 0};
  Tensor<float> location_grid;
};

// 1D tiling: starts at multiples of (side - overlap); the final start is
// shifted back so the last patch ends exactly at the volume boundary.
inline std::vector<int> tile_starts(int dim, int side, int stride) {
  std::vector<int> starts;
  int s = 0;
  while (true) {
    if (s + side >= dim) {
      starts.push_back(std::max(0, dim - side));
      break;
    }
    starts.push_back(s);
    s += stride;
  }
  if (starts.size() >= 2 && starts[starts.size() - 1] == starts[starts.size() - 2])
    starts.pop_back();
  return starts;
}

inline std::vector<LocatedPatch> split_overlapping(const Volume& v, int side = 128,
                                                   int overlap = 32) {
  if (side < 1) throw std::invalid_argument("patch side must be >= 1");
  if (overlap >= side) throw std::invalid_argument("overlap must be smaller than side");
  if (side % 4 != 0) throw std::invalid_argument("patch side must be a multiple of 4");
  const int stride = side - overlap;
  const int g = side / 4;

  std::array<std::vector<int>, 3> starts;
  for (int a = 0; a < 3; ++a) starts[a] = tile_starts(v.dims[a], side, stride);

  // Scan extent used for coordinate normalization; at least one patch long.
  Vec3 extent;
  for (int a = 0; a < 3; ++a) extent[a] = std::max(v.dims[a], side);

  std::vector<LocatedPatch> out;
  out.reserve(starts[0].size() * starts[1].size() * starts[2].size());
  for (int sz : starts[2])
    for (int sy : starts[1])
      for (int sx : starts[0]) {
        LocatedPatch lp;
        lp.start = {sx, sy, sz};

        Patch& p = lp.patch;
        p.side = side;
        p.normalized = true;
        p.source_center_world = voxel_to_world(
            {sx + side / 2.0, sy + side / 2.0, sz + side / 2.0}, v);
        p.values.assign(static_cast<std::size_t>(side) * side * side, 0.0f);
        for (int z = 0; z < side; ++z) {
          const int vz = sz + z;
          if (vz >= v.dims[2]) break;
          for (int y = 0; y < side; ++y) {
            const int vy = sy + y;
            if (vy >= v.dims[1]) break;
            const int n = std::min(side, v.dims[0] - sx);
            if (n <= 0) break;
            const float* src = &v.voxels[static_cast<std::size_t>(v.index(sx, vy, vz))];
            std::copy(src, src + n, &p.values[static_cast<std::size_t>(p.index(0, y, z))]);
          }
        }

        lp.location_grid = Tensor<float>({3, g, g, g});
        float* lg = lp.location_grid.data();
        const std::int64_t plane = static_cast<std::int64_t>(g) * g * g;
        std::int64_t i = 0;
        for (int z = 0; z < g; ++z)
          for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x, ++i) {
              const double px = sx + (x + 0.5) * 4.0;
              const double py = sy + (y + 0.5) * 4.0;
              const double pz = sz + (z + 0.5) * 4.0;
              lg[i] = static_cast<float>(std::clamp(2.0 * px / extent[0] - 1.0, -1.0, 1.0));
              lg[plane + i] = static_cast<float>(std::clamp(2.0 * py / extent[1] - 1.0, -1.0, 1.0));
              lg[2 * plane + i] = static_cast<float>(std::clamp(2.0 * pz / extent[2] - 1.0, -1.0, 1.0));
            }
        out.push_back(std::move(lp));
      }
  return out;
}

// ---------------------------------------------------------------------------
// Volume container: one-line JSON header followed by a little-endian raw
// payload in x-fastest order. dtype is "f32" or "i16" (HU rounded);
// round-trips are bit-exact for both.
// ---------------------------------------------------------------------------

inline void save_volume(const Volume& v, const std::filesystem::path& path,
                        const std::string& dtype = "f32") {
  v.validate();
  if (dtype != "f32" && dtype != "i16")
    throw std::invalid_argument("volume dtype must be f32 or i16");
  nlohmann::json header = {
      {"dims", {v.dims[0], v.dims[1], v.dims[2]}},
      {"spacing", {v.spacing[0], v.spacing[1], v.spacing[2]}},
      {"origin", {v.origin[0], v.origin[1], v.origin[2]}},
      {"dtype", dtype},
  };
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << header.dump() << "\n";
  if (dtype == "f32") {
    f.write(reinterpret_cast<const char*>(v.voxels.data()),
            static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
  } else {
    std::vector<std::int16_t> buf(v.voxels.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const long r = std::lround(std::clamp(v.voxels[i], -32768.0f, 32767.0f));
      buf[i] = static_cast<std::int16_t>(r);
    }
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(std::int16_t)));
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline Volume load_volume(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw NotFoundError("volume file not found: " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw ParseError("empty volume file: " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad volume header in " + path.string() + ": " + e.what());
  }
  try {
    Volume v;
    for (int a = 0; a < 3; ++a) {
      v.dims[a] = header.at("dims").at(a).get<int>();
      v.spacing[a] = header.at("spacing").at(a).get<double>();
      v.origin[a] = header.at("origin").at(a).get<double>();
    }
    v.validate();
    const std::string dtype = header.at("dtype").get<std::string>();
    const std::size_t n = static_cast<std::size_t>(v.numel());
    v.voxels.resize(n);
    if (dtype == "f32") {
      f.read(reinterpret_cast<char*>(v.voxels.data()),
             static_cast<std::streamsize>(n * sizeof(float)));
      if (static_cast<std::size_t>(f.gcount()) != n * sizeof(float))
        throw ParseError("truncated volume payload: " + path.string());
    } else if (dtype == "i16") {
      std::vector<std::int16_t> buf(n);
      f.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(n * sizeof(std::int16_t)));
      if (static_cast<std::size_t>(f.gcount()) != n * sizeof(std::int16_t))
        throw ParseError("truncated volume payload: " + path.string());
      for (std::size_t i = 0; i < n; ++i) v.voxels[i] = static_cast<float>(buf[i]);
    } else {
      throw ParseError("unknown dtype '" + dtype + "' in " + path.string());
    }
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad volume header in " + path.string() + ": " + e.what());
  }
}

}  // namespace noduleid
