#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "noduleid/growth.hpp"
#include "noduleid/matching.hpp"
#include "noduleid/metrics.hpp"
#include "noduleid/phantom.hpp"
#include "noduleid/plot.hpp"

namespace noduleid {

// One longitudinal case, preprocessed (1 mm isotropic, normalized) and joined
// with its ground truth.
struct CaseRecord {
  std::string case_id;
  Volume volume_t1, volume_t2;  // preprocessed
  NoduleAnnotation annotation_t1, annotation_t2;
  double growth_true = 0.0;
};

inline Volume preprocess(const Volume& raw) {
  return normalize_hu(resample_isotropic(raw, {1.0, 1.0, 1.0}));
}

// Loads every case of a phantom-format dataset manifest and preprocesses the
// volumes.
inline std::vector<CaseRecord> load_cases(const phantom::DatasetManifest& m) {
  const auto ann1 = load_annotations(m.path(m.annotations_t1));
  const auto ann2 = load_annotations(m.path(m.annotations_t2));
  const auto truth = phantom::load_growth_truth(m.path(m.growth_truth));
  std::map<std::string, NoduleAnnotation> by_id_1, by_id_2;
  for (const auto& a : ann1) by_id_1[a.series_id] = a;
  for (const auto& a : ann2) by_id_2[a.series_id] = a;
  std::map<std::string, double> growth_by_id;
  for (const auto& g : truth) growth_by_id[g.series_id] = g.growth_mm;

  std::vector<CaseRecord> out;
  for (const auto& cf : m.cases) {
    CaseRecord r;
    r.case_id = cf.case_id;
    if (!by_id_1.count(cf.case_id) || !by_id_2.count(cf.case_id) ||
        !growth_by_id.count(cf.case_id))
      throw ParseError("dataset manifest: missing annotations or growth truth for case " +
                       cf.case_id);
    r.annotation_t1 = by_id_1[cf.case_id];
    r.annotation_t2 = by_id_2[cf.case_id];
    r.growth_true = growth_by_id[cf.case_id];
    r.volume_t1 = preprocess(load_volume(m.path(cf.volume_t1)));
    r.volume_t2 = preprocess(load_volume(m.path(cf.volume_t2)));
    out.push_back(std::move(r));
  }
  return out;
}

// Detector training set: every lesion (annotated nodule + distractors) is a
// detection target.
inline std::vector<DetectorCase> make_detector_cases(const phantom::DatasetManifest& m) {
  const auto ann1 = load_annotations(m.path(m.annotations_t1));
  const auto ann2 = load_annotations(m.path(m.annotations_t2));
  const auto dis1 = load_annotations(m.path(m.distractors_t1));
  const auto dis2 = load_annotations(m.path(m.distractors_t2));
  std::map<std::string, std::vector<NoduleAnnotation>> lesions_t1, lesions_t2;
  for (const auto& a : ann1) lesions_t1[a.series_id].push_back(a);
  for (const auto& a : dis1) lesions_t1[a.series_id].push_back(a);
  for (const auto& a : ann2) lesions_t2[a.series_id].push_back(a);
  for (const auto& a : dis2) lesions_t2[a.series_id].push_back(a);

  std::vector<DetectorCase> out;
  for (const auto& cf : m.cases) {
    DetectorCase d1;
    d1.volume = preprocess(load_volume(m.path(cf.volume_t1)));
    d1.lesions = lesions_t1[cf.case_id];
    out.push_back(std::move(d1));
    DetectorCase d2;
    d2.volume = preprocess(load_volume(m.path(cf.volume_t2)));
    d2.lesions = lesions_t2[cf.case_id];
    out.push_back(std::move(d2));
  }
  return out;
}

// Classifier training set: positives at every lesion center, negatives at
// random positions away from all lesions.
inline std::vector<LabeledPatch> make_classifier_patches(const phantom::DatasetManifest& m,
                                                         int negatives_per_volume,
                                                         std::uint64_t seed) {
  const auto cases = make_detector_cases(m);
  Rng rng(mix_seed(seed, 0xc1a55e5ULL));
  std::vector<LabeledPatch> out;
  for (const auto& dc : cases) {
    for (const auto& le : dc.lesions) {
      LabeledPatch lp;
      lp.input = extract_patch(dc.volume, le.center_world, kBackboneInputSide).as_input();
      lp.label = 1;
      out.push_back(std::move(lp));
    }
    for (int k = 0; k < negatives_per_volume; ++k) {
      for (int attempt = 0; attempt < 100; ++attempt) {
        const Vec3 p = voxel_to_world({rng.uniform(0.0, dc.volume.dims[0] - 1.0),
                                       rng.uniform(0.0, dc.volume.dims[1] - 1.0),
                                       rng.uniform(0.0, dc.volume.dims[2] - 1.0)},
                                      dc.volume);
        bool near = false;
        for (const auto& le : dc.lesions)
          if (distance(p, le.center_world) < le.diameter + 8.0) near = true;
        if (near) continue;
        LabeledPatch lp;
        lp.input = extract_patch(dc.volume, p, kBackboneInputSide).as_input();
        lp.label = 0;
        out.push_back(std::move(lp));
        break;
      }
    }
  }
  return out;
}

// Siamese training units: patches cropped at the annotated nodule centers.
inline std::vector<CasePatches> make_case_patches(std::span<const CaseRecord> cases) {
  std::vector<CasePatches> out;
  for (const auto& c : cases) {
    CasePatches cp;
    cp.case_id = c.case_id;
    cp.patch_t1 = extract_patch(c.volume_t1, c.annotation_t1.center_world, kBackboneInputSide);
    cp.patch_t2 = extract_patch(c.volume_t2, c.annotation_t2.center_world, kBackboneInputSide);
    out.push_back(std::move(cp));
  }
  return out;
}

struct PipelineOptions {
  int top_k = 32;                 // candidate cutoff per scan
  bool t1_from_detector = true;   // false: T1 candidate is the annotated nodule
  int bootstrap_resamples = 1000;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;  // empty: no files written
};

struct PipelineResult {
  std::vector<MatchResult> matches;
  MatchingEvaluation match_eval;
  std::vector<GrowthAssessment> growth;
  ConfusionMatrix growth_cm;
  double growth_sign_accuracy = 0.0;
  AgreementReport agreement;
  bool agreement_valid = false;
  FrocCurve froc_curve;
  double seconds_detect = 0.0, seconds_match = 0.0, seconds_total = 0.0;
};

inline void write_summary_json(const PipelineResult& r, const std::filesystem::path& path);

// Detect -> top-k(32) -> match -> growth on every case; emits the module
// reports and both figures when out_dir is set.
template <typename T>
PipelineResult run_pipeline(Detector<T>& detector, SiameseModel<T>& siamese,
                            std::span<const CaseRecord> cases, const PipelineOptions& opt) {
  if (cases.empty()) throw ConfigError("pipeline: no cases in manifest");
  const auto t_total = std::chrono::steady_clock::now();
  PipelineResult result;

  std::vector<ScanData> scans;  // pooled T1+T2 for the detector FROC
  std::map<std::string, NoduleAnnotation> ann2_by_id;
  std::vector<std::pair<std::string, Candidate>> candidate_rows;

  SiameseScorer<T> scorer(siamese);
  for (const CaseRecord& c : cases) {
    const auto t_det = std::chrono::steady_clock::now();
    std::vector<Candidate> c1 = detect(detector, c.volume_t1);
    std::vector<Candidate> c2 = detect(detector, c.volume_t2);
    result.seconds_detect +=
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_det).count();

    scans.push_back({c1, {c.annotation_t1}});
    scans.push_back({c2, {c.annotation_t2}});

    c1 = top_k(c1, opt.top_k);
    c2 = top_k(c2, opt.top_k);
    for (const auto& cand : c1) candidate_rows.emplace_back(c.case_id + "_t1", cand);
    for (const auto& cand : c2) candidate_rows.emplace_back(c.case_id + "_t2", cand);

    if (!opt.t1_from_detector) {
      Candidate a;
      a.center_world = c.annotation_t1.center_world;
      a.diameter = c.annotation_t1.diameter;
      a.probability = 1.0;
      c1 = {a};
    }

    const auto t_match = std::chrono::steady_clock::now();
    MatchResult mr = match_case(scorer, c.case_id, c.volume_t1, c.volume_t2, c1, c2);
    mr.elapsed_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_match).count();
    result.matches.push_back(std::move(mr));
    ann2_by_id[c.case_id] = c.annotation_t2;
  }

  result.match_eval = evaluate_matching(result.matches, ann2_by_id);
  for (const auto& m : result.matches) result.seconds_match += m.elapsed_s;

  // Growth is assessed on the correctly matched cases only.
  std::map<std::string, double> growth_by_id;
  for (const CaseRecord& c : cases) growth_by_id[c.case_id] = c.growth_true;
  std::vector<double> pred_deltas, true_deltas;
  for (const MatchResult& m : result.matches) {
    if (!m.correct.value_or(false)) continue;
    GrowthAssessment g =
        assess_growth(m.case_id, m.t1.diameter, m.t2.diameter, growth_by_id.at(m.case_id));
    switch (g.outcome) {
      case GrowthOutcome::TP: ++result.growth_cm.tp; break;
      case GrowthOutcome::FP: ++result.growth_cm.fp; break;
      case GrowthOutcome::TN: ++result.growth_cm.tn; break;
      case GrowthOutcome::FN: ++result.growth_cm.fn; break;
    }
    pred_deltas.push_back(g.delta_pred);
    true_deltas.push_back(g.delta_true);
    result.growth.push_back(std::move(g));
  }
  const std::int64_t assessed =
      result.growth_cm.tp + result.growth_cm.fp + result.growth_cm.tn + result.growth_cm.fn;
  result.growth_sign_accuracy =
      assessed > 0
          ? static_cast<double>(result.growth_cm.tp + result.growth_cm.tn) / assessed
          : 0.0;
  if (pred_deltas.size() >= 2) {
    bool constant_truth = true;
    for (double t : true_deltas) constant_truth &= t == true_deltas[0];
    if (!constant_truth) {
      result.agreement = make_agreement_report(pred_deltas, true_deltas);
      result.agreement_valid = true;
    }
  }

  const auto rates = default_fp_rates();
  result.froc_curve = froc_with_bootstrap(scans, rates, opt.bootstrap_resamples, 0.95, opt.seed);
  result.seconds_total =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_total).count();

  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    save_match_report(result.matches, opt.out_dir / "match_report.csv");
    save_growth_report(result.growth, opt.out_dir / "growth_report.csv");
    save_candidates(candidate_rows, opt.out_dir / "candidates.csv");
    save_froc_csv(result.froc_curve, opt.out_dir / "froc.csv");
    plot::write_froc_svg(result.froc_curve, opt.out_dir / "froc.svg", "Detector FROC");
    if (pred_deltas.size() >= 2)
      plot::write_bland_altman_svg(pred_deltas, true_deltas, opt.out_dir / "bland_altman.svg",
                                   "Growth agreement");
    write_summary_json(result, opt.out_dir / "summary.json");
  }
  return result;
}

inline void write_summary_json(const PipelineResult& r, const std::filesystem::path& path) {
  nlohmann::json j;
  j["matching"] = {{"correct", r.match_eval.correct},
                   {"total", r.match_eval.total},
                   {"accuracy", r.match_eval.accuracy}};
  j["growth"] = {{"tp", r.growth_cm.tp},
                 {"fp", r.growth_cm.fp},
                 {"tn", r.growth_cm.tn},
                 {"fn", r.growth_cm.fn},
                 {"sign_accuracy", r.growth_sign_accuracy}};
  if (r.growth_cm.tp + r.growth_cm.fp > 0 && r.growth_cm.tp + r.growth_cm.fn > 0) {
    const DerivedScores s = derive_scores(r.growth_cm);
    j["growth"]["precision"] = s.precision;
    j["growth"]["recall"] = s.recall;
    j["growth"]["f1"] = s.f1;
  }
  if (r.agreement_valid) {
    j["agreement"] = {{"mean_diff", r.agreement.mean_diff}, {"loa_low", r.agreement.loa_low},
                      {"loa_high", r.agreement.loa_high},   {"mae", r.agreement.mae},
                      {"mse", r.agreement.mse},             {"r2", r.agreement.r2},
                      {"t_test_p", r.agreement.t_test_p}};
  }
  j["froc"] = nlohmann::json::array();
  for (const auto& p : r.froc_curve.points)
    j["froc"].push_back({{"fp_rate", p.fp_per_scan},
                         {"mean", p.sensitivity},
                         {"lower", p.lower},
                         {"upper", p.upper}});
  j["timing"] = {{"detect_s", r.seconds_detect},
                 {"match_s", r.seconds_match},
                 {"total_s", r.seconds_total}};
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << j.dump(2) << "\n";
}

}  // namespace noduleid
