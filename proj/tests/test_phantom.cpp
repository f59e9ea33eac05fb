#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "noduleid/phantom.hpp"

using namespace noduleid;
using namespace noduleid::phantom;
namespace fs = std::filesystem;

namespace {

PhantomSpec small_spec() {
  PhantomSpec spec;
  spec.volume_dims = {72, 72, 72};
  spec.n_distractors = 2;
  spec.diameter_range_t1 = {6.0, 10.0};
  spec.growth_range = {-3.0, 4.0};
  spec.displacement_range = 12.0;
  spec.seed = 99;
  return spec;
}

// FWHM of the profile along +x/-x through the lesion center, with subvoxel
// linear interpolation of the half-maximum crossings.
double fwhm_x(const Volume& v, const Vec3& center, double background) {
  const int y = static_cast<int>(std::lround(center[1]));
  const int z = static_cast<int>(std::lround(center[2]));
  std::vector<double> profile(static_cast<std::size_t>(v.dims[0]));
  for (int x = 0; x < v.dims[0]; ++x) profile[static_cast<std::size_t>(x)] = v.at(x, y, z);
  const int cx = static_cast<int>(std::lround(center[0]));
  const double peak = profile[static_cast<std::size_t>(cx)];
  const double half = background + (peak - background) / 2.0;

  double left = -1, right = -1;
  for (int x = cx; x > 0; --x) {
    const double a = profile[static_cast<std::size_t>(x - 1)], b = profile[static_cast<std::size_t>(x)];
    if (a <= half && b > half) {
      left = (x - 1) + (half - a) / (b - a);
      break;
    }
  }
  for (int x = cx; x < v.dims[0] - 1; ++x) {
    const double a = profile[static_cast<std::size_t>(x)], b = profile[static_cast<std::size_t>(x + 1)];
    if (a > half && b <= half) {
      right = x + (a - half) / (a - b);
      break;
    }
  }
  REQUIRE(left >= 0);
  REQUIRE(right >= 0);
  return right - left;
}

}  // namespace

TEST_CASE("degenerate growth range gives exact growth") {
  PhantomSpec spec = small_spec();
  spec.growth_range = {2.0, 2.0};
  for (std::uint64_t cs = 0; cs < 6; ++cs) {
    const PhantomCase pc = generate_case(spec, cs);
    REQUIRE(pc.growth_mm == 2.0);
    REQUIRE(pc.true_annotation_t2.diameter - pc.true_annotation_t1.diameter == 2.0);
  }
}

TEST_CASE("same spec and seed give bit-identical cases") {
  const PhantomSpec spec = small_spec();
  const PhantomCase a = generate_case(spec, 17);
  const PhantomCase b = generate_case(spec, 17);
  REQUIRE(a.volume_t1.voxels == b.volume_t1.voxels);
  REQUIRE(a.volume_t2.voxels == b.volume_t2.voxels);
  REQUIRE(a.true_annotation_t1.center_world == b.true_annotation_t1.center_world);
  REQUIRE(a.growth_mm == b.growth_mm);

  const PhantomCase c = generate_case(spec, 18);
  REQUIRE(a.volume_t1.voxels != c.volume_t1.voxels);
}

TEST_CASE("rendered FWHM matches the annotated diameter within 1 mm") {
  const PhantomSpec spec = small_spec();
  for (std::uint64_t cs : {0ull, 1ull, 2ull, 3ull}) {
    const PhantomCase pc = generate_case(spec, cs);
    const double w1 =
        fwhm_x(pc.volume_t1, pc.true_annotation_t1.center_world, spec.background_hu);
    REQUIRE(std::abs(w1 - pc.true_annotation_t1.diameter) <= 1.0);
    const double w2 =
        fwhm_x(pc.volume_t2, pc.true_annotation_t2.center_world, spec.background_hu);
    REQUIRE(std::abs(w2 - pc.true_annotation_t2.diameter) <= 1.0);
  }
}

TEST_CASE("growth sign consistency and annotation contracts") {
  const PhantomSpec spec = small_spec();
  for (std::uint64_t cs = 0; cs < 10; ++cs) {
    const PhantomCase pc = generate_case(spec, cs);
    REQUIRE(pc.growth_mm ==
            pc.true_annotation_t2.diameter - pc.true_annotation_t1.diameter);
    REQUIRE(pc.true_annotation_t1.time_point == TimePoint::T1);
    REQUIRE(pc.true_annotation_t2.time_point == TimePoint::T2);
    REQUIRE(pc.true_annotation_t1.diameter > 0);
    // T2 displacement stays within range + lesion jitter.
    const double moved =
        distance(pc.true_annotation_t2.center_world, pc.true_annotation_t1.center_world);
    REQUIRE(moved <= spec.displacement_range + 1.5 + 1e-9);
  }
}

TEST_CASE("distractors stay far from the true nodule") {
  PhantomSpec spec = small_spec();
  spec.volume_dims = {96, 96, 96};
  spec.n_distractors = 3;
  for (std::uint64_t cs = 0; cs < 8; ++cs) {
    const PhantomCase pc = generate_case(spec, cs);
    REQUIRE(pc.distractor_annotations_t1.size() == 3);
    for (const auto& d : pc.distractor_annotations_t1)
      REQUIRE(distance(d.center_world, pc.true_annotation_t1.center_world) >=
              2.0 * spec.max_diameter() - 1e-9);
  }
}

TEST_CASE("volume too small for the margin fails") {
  PhantomSpec spec = small_spec();
  spec.volume_dims = {24, 24, 24};
  REQUIRE_THROWS_AS(generate_case(spec, 0), std::runtime_error);
}

TEST_CASE("generate_dataset writes a loadable, exact round trip") {
  const fs::path dir = fs::temp_directory_path() / "noduleid_phantom_ds";
  fs::remove_all(dir);
  PhantomSpec spec = small_spec();

  SECTION("empty dataset still emits valid headers") {
    const auto m = generate_dataset(spec, 0, dir / "empty");
    REQUIRE(load_annotations(m.path(m.annotations_t1)).empty());
    REQUIRE(load_annotations(m.path(m.annotations_t2)).empty());
    REQUIRE(load_growth_truth(m.path(m.growth_truth)).empty());
    REQUIRE(load_manifest(m.root / "manifest.json").cases.empty());
  }

  SECTION("round trip reproduces generator ground truth exactly") {
    const int n = 6;
    const auto m = generate_dataset(spec, n, dir / "d6");
    REQUIRE(static_cast<int>(m.cases.size()) == n);
    const auto ann1 = load_annotations(m.path(m.annotations_t1));
    const auto ann2 = load_annotations(m.path(m.annotations_t2));
    const auto truth = load_growth_truth(m.path(m.growth_truth));
    REQUIRE(static_cast<int>(ann1.size()) == n);
    REQUIRE(static_cast<int>(truth.size()) == n);
    for (int i = 0; i < n; ++i) {
      REQUIRE(ann1[static_cast<std::size_t>(i)].series_id == m.cases[static_cast<std::size_t>(i)].case_id);
      REQUIRE(truth[static_cast<std::size_t>(i)].growth_mm ==
              ann2[static_cast<std::size_t>(i)].diameter - ann1[static_cast<std::size_t>(i)].diameter);
      const Volume v1 = load_volume(m.path(m.cases[static_cast<std::size_t>(i)].volume_t1));
      REQUIRE(v1.dims == spec.volume_dims);
    }

    // Re-generating produces identical CSV bytes (bit-exact determinism).
    const auto m2 = generate_dataset(spec, n, dir / "d6_again");
    const auto slurp = [](const fs::path& p) {
      std::ifstream f(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(f), {});
    };
    REQUIRE(slurp(m.path(m.annotations_t1)) == slurp(m2.path(m2.annotations_t1)));
    REQUIRE(slurp(m.path(m.growth_truth)) == slurp(m2.path(m2.growth_truth)));
    REQUIRE(slurp(m.path(m.cases[0].volume_t1)) == slurp(m2.path(m2.cases[0].volume_t1)));
  }

  SECTION("class mix is stratified at 60/40") {
    const auto m = generate_dataset(spec, 38, dir / "d38");
    const auto truth = load_growth_truth(m.path(m.growth_truth));
    int growth = 0;
    for (const auto& g : truth) growth += g.growth_mm > 0;
    REQUIRE(growth >= 21);
    REQUIRE(growth <= 25);
  }
}
