#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "noduleid/annotations.hpp"
#include "noduleid/rng.hpp"
#include "noduleid/volume.hpp"

using namespace noduleid;
namespace fs = std::filesystem;

namespace {

Volume make_volume(Idx3 dims, Vec3 spacing = {1, 1, 1}, Vec3 origin = {0, 0, 0}) {
  return Volume(dims, spacing, origin);
}

fs::path temp_dir() {
  const fs::path d = fs::temp_directory_path() / "noduleid_volume_tests";
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("resample identity leaves voxels untouched") {
  Volume v = make_volume({20, 20, 20});
  Rng rng(1);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(-1000.0, 600.0));
  const Volume out = resample_isotropic(v, {1, 1, 1});
  REQUIRE(out.dims == v.dims);
  REQUIRE(out.voxels == v.voxels);
}

TEST_CASE("resample output dims follow the per-axis extent rule") {
  Volume v = make_volume({100, 100, 50}, {0.7, 0.7, 2.0});
  const Volume out = resample_isotropic(v, {1, 1, 1});
  // Independent per-axis check: round(dim * spacing / target).
  const auto expect = [](int dim, double sp) {
    return static_cast<int>(std::llround(dim * sp / 1.0));
  };
  REQUIRE(out.dims[0] == expect(100, 0.7));
  REQUIRE(out.dims[1] == expect(100, 0.7));
  REQUIRE(out.dims[2] == expect(50, 2.0));
  REQUIRE(out.dims == Idx3{70, 70, 100});
  for (int a = 0; a < 3; ++a) {
    const double in_extent = v.dims[a] * v.spacing[a];
    const double out_extent = out.dims[a] * out.spacing[a];
    REQUIRE(std::abs(in_extent - out_extent) <= out.spacing[a]);
  }
}

TEST_CASE("resample of a constant volume is constant, any spacing") {
  Volume v = make_volume({13, 9, 17}, {0.6, 1.3, 2.1});
  for (auto& x : v.voxels) x = -321.5f;
  for (const Vec3 target : {Vec3{1, 1, 1}, Vec3{0.8, 0.8, 0.8}, Vec3{2.5, 1.0, 0.4}}) {
    const Volume out = resample_isotropic(v, target);
    for (float x : out.voxels) REQUIRE(x == -321.5f);
  }
}

TEST_CASE("resample rejects non-positive target spacing") {
  Volume v = make_volume({4, 4, 4});
  REQUIRE_THROWS_AS(resample_isotropic(v, {0.0, 1.0, 1.0}), std::invalid_argument);
  REQUIRE_THROWS_AS(resample_isotropic(v, {1.0, -2.0, 1.0}), std::invalid_argument);
}

TEST_CASE("normalize_hu maps the clip window onto [0,1]") {
  Volume v = make_volume({3, 1, 1});
  v.voxels = {-1000.0f, 600.0f, -200.0f};
  const Volume out = normalize_hu(v);
  REQUIRE(out.voxels[0] == 0.0f);
  REQUIRE(out.voxels[1] == 1.0f);
  REQUIRE(out.voxels[2] == 0.5f);

  SECTION("range and monotonicity on arbitrary input") {
    Rng rng(7);
    float prev_in = -2000.0f;
    float prev_out = normalize_hu_value(prev_in);
    for (int i = 0; i < 1000; ++i) {
      const float x = static_cast<float>(rng.uniform(-2000.0, 1200.0));
      const float y = normalize_hu_value(x);
      REQUIRE(y >= 0.0f);
      REQUIRE(y <= 1.0f);
      if (x >= prev_in) REQUIRE(y >= prev_out);
      prev_in = x;
      prev_out = y;
    }
  }
}

TEST_CASE("world/voxel coordinate maps") {
  Volume v = make_volume({16, 16, 16}, {2, 2, 2}, {0, 0, 0});
  REQUIRE(world_to_voxel({0, 0, 0}, v) == Vec3{0, 0, 0});
  REQUIRE(world_to_voxel({10, 20, 30}, v) == Vec3{5, 10, 15});

  SECTION("round trip is exact on representable values") {
    Volume w = make_volume({8, 8, 8}, {0.5, 2.0, 4.0}, {-16.0, 8.0, 2.0});
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
      const Vec3 idx{static_cast<double>(rng.uniform_int(512)) / 4.0,
                     static_cast<double>(rng.uniform_int(512)) / 4.0,
                     static_cast<double>(rng.uniform_int(512)) / 4.0};
      const Vec3 back = world_to_voxel(voxel_to_world(idx, w), w);
      REQUIRE(back[0] == idx[0]);
      REQUIRE(back[1] == idx[1]);
      REQUIRE(back[2] == idx[2]);
    }
  }
}

TEST_CASE("extract_patch centered crop needs no padding") {
  Volume v = make_volume({64, 64, 64});
  Rng rng(11);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
  const Patch p = extract_patch(v, {32, 32, 32}, 32);
  REQUIRE(p.side == 32);
  for (int z = 0; z < 32; ++z)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        REQUIRE(p.at(x, y, z) == v.at(16 + x, 16 + y, 16 + z));
}

TEST_CASE("extract_patch at the corner pads exactly 7/8 of the cube") {
  Volume v = make_volume({64, 64, 64});
  for (auto& x : v.voxels) x = 0.5f;
  const Patch p = extract_patch(v, {0, 0, 0}, 32);
  std::int64_t zeros = 0;
  for (float x : p.values) zeros += x == 0.0f;
  REQUIRE(zeros == 32 * 32 * 32 * 7 / 8);

  SECTION("padding occurs iff the cube exits the volume") {
    const Patch inside = extract_patch(v, {31, 31, 31}, 32);
    for (float x : inside.values) REQUIRE(x == 0.5f);
  }
}

TEST_CASE("extract_patch is deterministic and validates side") {
  Volume v = make_volume({40, 40, 40});
  Rng rng(5);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
  const Patch a = extract_patch(v, {17.3, 20.9, 8.1}, 32);
  const Patch b = extract_patch(v, {17.3, 20.9, 8.1}, 32);
  REQUIRE(a.values == b.values);
  REQUIRE_THROWS_AS(extract_patch(v, {1, 1, 1}, 0), std::invalid_argument);
}

TEST_CASE("split_overlapping single patch covers a 128-cube") {
  Volume v = make_volume({128, 128, 128});
  Rng rng(2);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
  const auto tiles = split_overlapping(v, 128, 32);
  REQUIRE(tiles.size() == 1);
  REQUIRE(tiles[0].start == Idx3{0, 0, 0});
  REQUIRE(tiles[0].patch.values == v.voxels);

  // Location grid spans the full scan, channels monotone in their axis.
  const auto& g = tiles[0].location_grid;
  REQUIRE(g.shape() == std::vector<int>{3, 32, 32, 32});
  REQUIRE(g[0] < -0.9f);
  const std::int64_t plane = 32 * 32 * 32;
  REQUIRE(g[plane - 1] > 0.9f);  // x channel, last cell
  for (int i = 1; i < 32; ++i) REQUIRE(g[i] > g[i - 1]);  // x increases along x
}

TEST_CASE("split_overlapping tiles cover every voxel") {
  // 1D tiling oracle: brute-force voxel coverage count per axis.
  const auto coverage_1d = [](int dim, int side, int stride) {
    std::vector<int> cover(static_cast<std::size_t>(dim), 0);
    for (int s : tile_starts(dim, side, stride))
      for (int i = s; i < std::min(dim, s + side); ++i) ++cover[static_cast<std::size_t>(i)];
    return cover;
  };

  for (int dim : {128, 150, 224, 257, 300}) {
    const auto cover = coverage_1d(dim, 128, 96);
    for (int c : cover) REQUIRE(c >= 1);
  }

  Volume v = make_volume({150, 224, 130});
  const auto tiles = split_overlapping(v, 128, 32);
  const auto starts_x = tile_starts(150, 128, 96);
  const auto starts_y = tile_starts(224, 128, 96);
  const auto starts_z = tile_starts(130, 128, 96);
  REQUIRE(tiles.size() == starts_x.size() * starts_y.size() * starts_z.size());

  std::vector<int> covered(static_cast<std::size_t>(v.numel()), 0);
  for (const auto& t : tiles)
    for (int z = t.start[2]; z < std::min(v.dims[2], t.start[2] + 128); ++z)
      for (int y = t.start[1]; y < std::min(v.dims[1], t.start[1] + 128); ++y)
        for (int x = t.start[0]; x < std::min(v.dims[0], t.start[0] + 128); ++x)
          ++covered[static_cast<std::size_t>(v.index(x, y, z))];
  for (int c : covered) REQUIRE(c >= 1);
}

TEST_CASE("split_overlapping last tile ends at the boundary") {
  // stride 96: a 224-long axis tiles as {0, 96}, the second ending exactly at
  // the boundary.
  REQUIRE(tile_starts(224, 128, 96) == std::vector<int>{0, 96});
  REQUIRE(tile_starts(128, 128, 96) == std::vector<int>{0});
  REQUIRE(tile_starts(300, 128, 96) == std::vector<int>{0, 96, 172});
  REQUIRE(tile_starts(64, 128, 96) == std::vector<int>{0});  // smaller than one patch: padded
  REQUIRE_THROWS_AS(split_overlapping(Volume({64, 64, 64}, {1, 1, 1}, {0, 0, 0}), 128, 128),
                    std::invalid_argument);
}

TEST_CASE("annotation CSV round trip and errors") {
  const fs::path dir = temp_dir();

  SECTION("empty file with header") {
    const fs::path p = dir / "empty.csv";
    std::ofstream(p) << "series_id,coord_x,coord_y,coord_z,diameter_mm,time_point\n";
    REQUIRE(load_annotations(p).empty());
  }

  SECTION("direct field mapping") {
    const fs::path p = dir / "one.csv";
    std::ofstream(p) << "series_id,coord_x,coord_y,coord_z,diameter_mm,time_point\n"
                        "s1,10.0,-20.5,3.0,6.5,T1\n";
    const auto anns = load_annotations(p);
    REQUIRE(anns.size() == 1);
    REQUIRE(anns[0].series_id == "s1");
    REQUIRE(anns[0].center_world == Vec3{10.0, -20.5, 3.0});
    REQUIRE(anns[0].diameter == 6.5);
    REQUIRE(anns[0].time_point == TimePoint::T1);
  }

  SECTION("non-numeric diameter names row and column") {
    const fs::path p = dir / "bad.csv";
    std::ofstream(p) << "series_id,coord_x,coord_y,coord_z,diameter_mm,time_point\n"
                        "s1,1.0,2.0,3.0,abc,T2\n";
    try {
      load_annotations(p);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      REQUIRE(e.column() == "diameter_mm");
      REQUIRE(e.row() == 1);
    }
  }

  SECTION("missing column rejected") {
    const fs::path p = dir / "short.csv";
    std::ofstream(p) << "series_id,coord_x,coord_y,coord_z,diameter_mm\n";
    REQUIRE_THROWS_AS(load_annotations(p), ParseError);
  }

  SECTION("writer/reader round trip is exact") {
    std::vector<NoduleAnnotation> anns;
    Rng rng(9);
    for (int i = 0; i < 20; ++i) {
      NoduleAnnotation a;
      a.series_id = "case" + std::to_string(i);
      a.center_world = {rng.uniform(-200, 200), rng.uniform(-200, 200), rng.uniform(-200, 200)};
      a.diameter = rng.uniform(3.0, 25.0);
      a.time_point = i % 2 ? TimePoint::T2 : TimePoint::T1;
      anns.push_back(a);
    }
    const fs::path p = dir / "rt.csv";
    save_annotations(anns, p);
    const auto back = load_annotations(p);
    REQUIRE(back.size() == anns.size());
    for (std::size_t i = 0; i < anns.size(); ++i) {
      REQUIRE(back[i].series_id == anns[i].series_id);
      REQUIRE(back[i].center_world == anns[i].center_world);
      REQUIRE(back[i].diameter == anns[i].diameter);
      REQUIRE(back[i].time_point == anns[i].time_point);
    }
  }
}

TEST_CASE("volume container round trips bit-exactly") {
  const fs::path dir = temp_dir();
  Volume v = make_volume({12, 7, 9}, {0.7, 0.7, 1.5}, {-80.25, 3.5, 12.0});
  Rng rng(13);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(-1000.0, 600.0));

  SECTION("f32") {
    save_volume(v, dir / "v.f32.vol", "f32");
    const Volume back = load_volume(dir / "v.f32.vol");
    REQUIRE(back.dims == v.dims);
    REQUIRE(back.spacing == v.spacing);
    REQUIRE(back.origin == v.origin);
    REQUIRE(back.voxels == v.voxels);
  }

  SECTION("i16 stores rounded HU") {
    for (auto& x : v.voxels) x = std::round(x);
    save_volume(v, dir / "v.i16.vol", "i16");
    const Volume back = load_volume(dir / "v.i16.vol");
    REQUIRE(back.voxels == v.voxels);
  }

  SECTION("missing file and truncated payload") {
    REQUIRE_THROWS_AS(load_volume(dir / "nope.vol"), NotFoundError);
    save_volume(v, dir / "trunc.vol", "f32");
    const auto size = fs::file_size(dir / "trunc.vol");
    fs::resize_file(dir / "trunc.vol", size - 64);
    REQUIRE_THROWS_AS(load_volume(dir / "trunc.vol"), ParseError);
  }
}
