#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "noduleid/annotations.hpp"
#include "noduleid/rng.hpp"
#include "noduleid/volume.hpp"

namespace noduleid::phantom {

// Synthetic longitudinal CT pair generator. Realism target: the matching task
// must be non-trivial (several look-alike lesions, patient repositioning
// between time points), not radiological fidelity.
struct PhantomSpec {
  Idx3 volume_dims{96, 96, 96};              // at 1 mm isotropic spacing
  int n_true_nodules = 1;                    // one relevant nodule per case
  int n_distractors = 4;
  std::array<double, 2> diameter_range_t1{6.0, 11.0};  // mm
  std::array<double, 2> growth_range{-3.0, 4.0};       // mm, may be negative
  double background_hu = -800.0;
  std::array<double, 2> nodule_hu_range{-100.0, 100.0};
  double displacement_range = 20.0;          // mm, T1 -> T2 repositioning
  std::uint64_t seed = 0;

  void validate() const {
    if (n_true_nodules != 1)
      throw std::invalid_argument("phantom protocol uses exactly one true nodule per case");
    if (n_distractors < 0) throw std::invalid_argument("n_distractors must be >= 0");
    if (diameter_range_t1[0] > diameter_range_t1[1] || diameter_range_t1[0] <= 0.0)
      throw std::invalid_argument("diameter_range_t1 must be ordered and positive");
    if (growth_range[0] > growth_range[1])
      throw std::invalid_argument("growth_range must be ordered");
    if (nodule_hu_range[0] > nodule_hu_range[1])
      throw std::invalid_argument("nodule_hu_range must be ordered");
    if (displacement_range < 0.0)
      throw std::invalid_argument("displacement_range must be >= 0");
  }

  double max_diameter() const {
    return diameter_range_t1[1] + std::max(0.0, growth_range[1]);
  }
};

struct Lesion {
  Vec3 center{0, 0, 0};
  double diameter = 0.0;
  double hu = 0.0;
};

struct PhantomCase {
  std::string case_id;
  Volume volume_t1, volume_t2;
  NoduleAnnotation true_annotation_t1, true_annotation_t2;
  std::vector<NoduleAnnotation> distractor_annotations_t1, distractor_annotations_t2;
  double growth_mm = 0.0;
};

namespace detail {

constexpr double kNoiseSigmaHu = 25.0;
constexpr double kEdgeSigmaMm = 1.0;     // soft sphere edge; FWHM == diameter
constexpr double kLesionJitterMm = 1.5;  // per-lesion residual motion T1 -> T2

// Diameters and growths live on a 1/64 mm grid so that sums and differences
// of diameters are exact in floating point (growth_mm == d_t2 - d_t1 holds
// bit-for-bit, including degenerate growth ranges).
inline double quantize_mm(double v) { return std::round(v * 64.0) / 64.0; }

// Soft-sphere occupancy: 0.5*erfc((r - R)/(sigma*sqrt(2))). Half-maximum sits
// exactly at r == R, so the rendered FWHM equals the annotated diameter.
inline double sphere_profile(double r, double radius) {
  return 0.5 * std::erfc((r - radius) / (kEdgeSigmaMm * std::sqrt(2.0)));
}

inline void render_lesion(Volume& v, const Lesion& le, double background_hu) {
  const double reach = le.diameter / 2.0 + 4.0 * kEdgeSigmaMm;
  const int x0 = std::max(0, static_cast<int>(std::floor(le.center[0] - reach)));
  const int x1 = std::min(v.dims[0] - 1, static_cast<int>(std::ceil(le.center[0] + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(le.center[1] - reach)));
  const int y1 = std::min(v.dims[1] - 1, static_cast<int>(std::ceil(le.center[1] + reach)));
  const int z0 = std::max(0, static_cast<int>(std::floor(le.center[2] - reach)));
  const int z1 = std::min(v.dims[2] - 1, static_cast<int>(std::ceil(le.center[2] + reach)));
  const double amplitude = le.hu - background_hu;
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - le.center[0], dy = y - le.center[1], dz = z - le.center[2];
        const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
        v.at(x, y, z) += static_cast<float>(amplitude * sphere_profile(r, le.diameter / 2.0));
      }
}

inline Volume render_volume(const PhantomSpec& spec, const std::vector<Lesion>& lesions,
                            Rng noise_rng) {
  Volume v(spec.volume_dims, {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0});
  for (auto& x : v.voxels)
    x = static_cast<float>(spec.background_hu + kNoiseSigmaHu * noise_rng.normal());
  for (const auto& le : lesions) render_lesion(v, le, spec.background_hu);
  return v;
}

inline Vec3 random_in_ball(Rng& rng, double radius) {
  while (true) {
    Vec3 p{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    if (dot(p, p) <= 1.0) return p * radius;
  }
}

inline Vec3 clamp_to_box(const Vec3& p, double margin, const Idx3& dims) {
  Vec3 out;
  for (int a = 0; a < 3; ++a)
    out[a] = std::clamp(p[a], margin, static_cast<double>(dims[a] - 1) - margin);
  return out;
}

}  // namespace detail

// Deterministic in (spec.seed, case_seed). The true nodule appears at both
// time points with diameter d1 and d1 + growth; the whole scene is displaced
// between time points and each lesion gets a small independent jitter.
inline PhantomCase generate_case(const PhantomSpec& spec, std::uint64_t case_seed) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, case_seed));

  const double margin = spec.max_diameter();
  for (int a = 0; a < 3; ++a)
    if (static_cast<double>(spec.volume_dims[a] - 1) - margin < margin)
      throw std::runtime_error("phantom volume too small to fit nodules with margin");

  PhantomCase pc;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case%04llu", static_cast<unsigned long long>(case_seed));
  pc.case_id = buf;

  const auto place = [&](Rng& r) {
    Vec3 p;
    for (int a = 0; a < 3; ++a)
      p[a] = r.uniform(margin, static_cast<double>(spec.volume_dims[a] - 1) - margin);
    return p;
  };

  Lesion true_t1;
  true_t1.center = place(rng);
  true_t1.diameter =
      detail::quantize_mm(rng.uniform(spec.diameter_range_t1[0], spec.diameter_range_t1[1]));
  true_t1.hu = rng.uniform(spec.nodule_hu_range[0], spec.nodule_hu_range[1]);

  double growth = detail::quantize_mm(rng.uniform(spec.growth_range[0], spec.growth_range[1]));
  double d2 = true_t1.diameter + growth;
  if (d2 < 1.0) {  // keep the follow-up lesion renderable
    d2 = 1.0;
    growth = d2 - true_t1.diameter;
  }

  const Vec3 global_shift =
      spec.displacement_range > 0.0
          ? detail::random_in_ball(rng, 1.0) * rng.uniform(0.0, spec.displacement_range)
          : Vec3{0, 0, 0};

  Lesion true_t2 = true_t1;
  true_t2.diameter = d2;
  true_t2.center = detail::clamp_to_box(
      true_t1.center + global_shift + detail::random_in_ball(rng, detail::kLesionJitterMm),
      margin, spec.volume_dims);

  // Distractors: same appearance family, kept well away from the true nodule
  // so ground truth stays unambiguous.
  std::vector<Lesion> dis_t1, dis_t2;
  const double min_sep_true = 2.0 * spec.max_diameter();
  const double min_sep_pair = 1.2 * spec.max_diameter();
  for (int k = 0; k < spec.n_distractors; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
      Lesion d;
      d.center = place(rng);
      d.diameter =
          detail::quantize_mm(rng.uniform(spec.diameter_range_t1[0], spec.diameter_range_t1[1]));
      d.hu = rng.uniform(spec.nodule_hu_range[0], spec.nodule_hu_range[1]);
      if (distance(d.center, true_t1.center) < min_sep_true) continue;
      if (distance(d.center, true_t2.center - global_shift) < min_sep_true) continue;
      bool clash = false;
      for (const auto& other : dis_t1)
        if (distance(d.center, other.center) < min_sep_pair) clash = true;
      if (clash) continue;
      dis_t1.push_back(d);
      Lesion d2t = d;
      d2t.center = detail::clamp_to_box(
          d.center + global_shift + detail::random_in_ball(rng, detail::kLesionJitterMm),
          margin, spec.volume_dims);
      dis_t2.push_back(d2t);
      placed = true;
    }
    if (!placed)
      throw std::runtime_error("could not place distractor with required separation");
  }

  std::vector<Lesion> scene_t1{true_t1}, scene_t2{true_t2};
  scene_t1.insert(scene_t1.end(), dis_t1.begin(), dis_t1.end());
  scene_t2.insert(scene_t2.end(), dis_t2.begin(), dis_t2.end());
  pc.volume_t1 = detail::render_volume(spec, scene_t1, rng.fork(101));
  pc.volume_t2 = detail::render_volume(spec, scene_t2, rng.fork(202));

  const auto annot = [&](const Lesion& le, TimePoint tp) {
    NoduleAnnotation a;
    a.series_id = pc.case_id;
    a.center_world = le.center;  // spacing 1 mm, origin 0: world == voxel
    a.diameter = le.diameter;
    a.time_point = tp;
    return a;
  };
  pc.true_annotation_t1 = annot(true_t1, TimePoint::T1);
  pc.true_annotation_t2 = annot(true_t2, TimePoint::T2);
  for (const auto& d : dis_t1) pc.distractor_annotations_t1.push_back(annot(d, TimePoint::T1));
  for (const auto& d : dis_t2) pc.distractor_annotations_t2.push_back(annot(d, TimePoint::T2));
  pc.growth_mm = pc.true_annotation_t2.diameter - pc.true_annotation_t1.diameter;
  return pc;
}

struct GrowthTruth {
  std::string series_id;
  double diameter_t1 = 0.0, diameter_t2 = 0.0, growth_mm = 0.0;
};

inline void save_growth_truth(const std::vector<GrowthTruth>& rows,
                              const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << "series_id,diameter_t1,diameter_t2,growth_mm\n";
  for (const auto& r : rows)
    f << r.series_id << "," << noduleid::detail::format_double(r.diameter_t1) << ","
      << noduleid::detail::format_double(r.diameter_t2) << ","
      << noduleid::detail::format_double(r.growth_mm) << "\n";
}

inline std::vector<GrowthTruth> load_growth_truth(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw NotFoundError("growth truth file not found: " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw ParseError("empty growth truth file", 0);
  static const std::vector<std::string> header = {"series_id", "diameter_t1", "diameter_t2",
                                                  "growth_mm"};
  noduleid::detail::check_header(noduleid::detail::split_csv_line(line), header, path);
  std::vector<GrowthTruth> out;
  int row = 0;
  while (std::getline(f, line)) {
    ++row;
    if (noduleid::detail::trim(line).empty()) continue;
    const auto fields = noduleid::detail::split_csv_line(line);
    if (fields.size() != 4)
      throw ParseError("row " + std::to_string(row) + ": expected 4 fields", row);
    GrowthTruth g;
    g.series_id = noduleid::detail::trim(fields[0]);
    g.diameter_t1 = noduleid::detail::parse_number(fields[1], row, "diameter_t1");
    g.diameter_t2 = noduleid::detail::parse_number(fields[2], row, "diameter_t2");
    g.growth_mm = noduleid::detail::parse_number(fields[3], row, "growth_mm");
    out.push_back(std::move(g));
  }
  return out;
}

struct CaseFiles {
  std::string case_id;
  std::string volume_t1, volume_t2;  // paths relative to the manifest
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<CaseFiles> cases;
  std::string annotations_t1 = "annotations_t1.csv";
  std::string annotations_t2 = "annotations_t2.csv";
  std::string distractors_t1 = "distractors_t1.csv";
  std::string distractors_t2 = "distractors_t2.csv";
  std::string growth_truth = "growth_truth.csv";

  std::filesystem::path path(const std::string& rel) const { return root / rel; }
};

inline void save_manifest(const DatasetManifest& m) {
  nlohmann::json j;
  j["annotations_t1"] = m.annotations_t1;
  j["annotations_t2"] = m.annotations_t2;
  j["distractors_t1"] = m.distractors_t1;
  j["distractors_t2"] = m.distractors_t2;
  j["growth_truth"] = m.growth_truth;
  j["cases"] = nlohmann::json::array();
  for (const auto& c : m.cases)
    j["cases"].push_back({{"id", c.case_id}, {"volume_t1", c.volume_t1}, {"volume_t2", c.volume_t2}});
  std::ofstream f(m.root / "manifest.json");
  if (!f) throw std::runtime_error("cannot write manifest in " + m.root.string());
  f << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw NotFoundError("manifest not found: " + manifest_path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad manifest " + manifest_path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.root = manifest_path.parent_path();
  m.annotations_t1 = j.value("annotations_t1", m.annotations_t1);
  m.annotations_t2 = j.value("annotations_t2", m.annotations_t2);
  m.distractors_t1 = j.value("distractors_t1", m.distractors_t1);
  m.distractors_t2 = j.value("distractors_t2", m.distractors_t2);
  m.growth_truth = j.value("growth_truth", m.growth_truth);
  for (const auto& c : j.at("cases")) {
    CaseFiles cf;
    cf.case_id = c.at("id").get<std::string>();
    cf.volume_t1 = c.at("volume_t1").get<std::string>();
    cf.volume_t2 = c.at("volume_t2").get<std::string>();
    m.cases.push_back(std::move(cf));
  }
  return m;
}

// Emits volumes (i16 container), annotation CSVs, distractor CSVs, growth
// ground truth, and a manifest. Cases are stratified ~60/40 growth/no-growth
// (exact counts); when growth_range does not cross zero the feasible bin wins.
inline DatasetManifest generate_dataset(const PhantomSpec& spec, int n_cases,
                                        const std::filesystem::path& out_dir) {
  spec.validate();
  if (n_cases < 0) throw std::invalid_argument("n_cases must be >= 0");
  std::filesystem::create_directories(out_dir);

  const int n_growth = static_cast<int>(std::lround(0.6 * n_cases));
  std::vector<int> labels(static_cast<std::size_t>(n_cases), 0);
  for (int i = 0; i < n_growth && i < n_cases; ++i) labels[static_cast<std::size_t>(i)] = 1;
  Rng shuffle_rng(mix_seed(spec.seed, 0xda7a5e7ULL));
  shuffle_rng.shuffle(labels);

  DatasetManifest m;
  m.root = out_dir;
  std::vector<NoduleAnnotation> ann_t1, ann_t2, dis_t1, dis_t2;
  std::vector<GrowthTruth> truth;

  for (int i = 0; i < n_cases; ++i) {
    PhantomSpec case_spec = spec;
    const auto [lo, hi] = spec.growth_range;
    if (labels[static_cast<std::size_t>(i)] == 1) {
      if (hi > 0.0) case_spec.growth_range = {std::max(lo, 1.0 / 64.0), hi};
    } else {
      if (lo <= 0.0) case_spec.growth_range = {lo, std::min(hi, 0.0)};
    }
    PhantomCase pc = generate_case(case_spec, static_cast<std::uint64_t>(i));

    CaseFiles cf;
    cf.case_id = pc.case_id;
    cf.volume_t1 = pc.case_id + "_t1.vol";
    cf.volume_t2 = pc.case_id + "_t2.vol";
    save_volume(pc.volume_t1, out_dir / cf.volume_t1, "i16");
    save_volume(pc.volume_t2, out_dir / cf.volume_t2, "i16");
    m.cases.push_back(cf);

    ann_t1.push_back(pc.true_annotation_t1);
    ann_t2.push_back(pc.true_annotation_t2);
    for (const auto& d : pc.distractor_annotations_t1) dis_t1.push_back(d);
    for (const auto& d : pc.distractor_annotations_t2) dis_t2.push_back(d);
    truth.push_back({pc.case_id, pc.true_annotation_t1.diameter, pc.true_annotation_t2.diameter,
                     pc.growth_mm});
  }

  save_annotations(ann_t1, m.path(m.annotations_t1));
  save_annotations(ann_t2, m.path(m.annotations_t2));
  save_annotations(dis_t1, m.path(m.distractors_t1));
  save_annotations(dis_t2, m.path(m.distractors_t2));
  save_growth_truth(truth, m.path(m.growth_truth));
  save_manifest(m);
  return m;
}

}  // namespace noduleid::phantom
