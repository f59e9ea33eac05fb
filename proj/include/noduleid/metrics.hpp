#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <vector>

#include "noduleid/detector.hpp"

namespace noduleid {

struct ConfusionMatrix {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct DerivedScores {
  double precision = 0.0, recall = 0.0, f1 = 0.0, accuracy = 0.0;
};

inline DerivedScores derive_scores(const ConfusionMatrix& cm) {
  if (cm.tp < 0 || cm.fp < 0 || cm.tn < 0 || cm.fn < 0)
    throw std::invalid_argument("derive_scores: negative counts");
  DerivedScores s;
  if (cm.tp + cm.fp == 0) throw std::domain_error("precision undefined: tp+fp is zero");
  s.precision = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fp);
  if (cm.tp + cm.fn == 0) throw std::domain_error("recall undefined: tp+fn is zero");
  s.recall = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
  if (s.precision + s.recall == 0.0) throw std::domain_error("f1 undefined: precision+recall is zero");
  s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  const std::int64_t total = cm.tp + cm.fp + cm.tn + cm.fn;
  if (total == 0) throw std::domain_error("accuracy undefined: empty confusion matrix");
  s.accuracy = static_cast<double>(cm.tp + cm.tn) / static_cast<double>(total);
  return s;
}

// One scan's detections and ground truth for FROC evaluation.
struct ScanData {
  std::vector<Candidate> candidates;
  std::vector<NoduleAnnotation> annotations;
};

struct FrocPoint {
  double fp_per_scan = 0.0;
  double sensitivity = 0.0;
  double lower = 0.0, upper = 0.0;  // bootstrap bounds (== sensitivity until filled)
  double threshold = 0.0;           // probability threshold realizing this point
};

struct FrocCurve {
  std::vector<FrocPoint> points;
};

inline std::vector<double> default_fp_rates() { return {0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0}; }

// Per-scan hit/total annotation counts at a fixed probability threshold
// (candidates with probability >= threshold are active).
struct ScanOutcome {
  int hits = 0;
  int total = 0;
};

namespace detail {

inline int count_false_positives(const ScanData& scan, double threshold) {
  int fp = 0;
  for (const Candidate& c : scan.candidates) {
    if (c.probability < threshold) continue;
    bool is_tp = false;
    for (const auto& a : scan.annotations)
      if (hit(c, a)) {
        is_tp = true;
        break;
      }
    if (!is_tp) ++fp;
  }
  return fp;
}

inline ScanOutcome scan_outcome_at(const ScanData& scan, double threshold) {
  ScanOutcome o;
  o.total = static_cast<int>(scan.annotations.size());
  for (const auto& a : scan.annotations) {
    for (const Candidate& c : scan.candidates)
      if (c.probability >= threshold && hit(c, a)) {
        ++o.hits;
        break;
      }
  }
  return o;
}

}  // namespace detail

inline std::vector<ScanOutcome> per_scan_outcomes_at(std::span<const ScanData> scans,
                                                     double threshold) {
  std::vector<ScanOutcome> out;
  out.reserve(scans.size());
  for (const auto& s : scans) out.push_back(detail::scan_outcome_at(s, threshold));
  return out;
}

// Pooled sensitivity across scans at each target FP/scan rate. The operating
// threshold for a target is the smallest candidate probability whose average
// FP count per scan stays <= the target (a step function over the sorted
// unique thresholds; no interpolation).
inline FrocCurve froc(std::span<const ScanData> scans, std::span<const double> fp_rates) {
  if (scans.empty()) throw std::invalid_argument("froc: empty scan list");

  std::vector<double> thresholds;
  for (const auto& s : scans)
    for (const auto& c : s.candidates) thresholds.push_back(c.probability);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::int64_t total_annotations = 0;
  for (const auto& s : scans) total_annotations += static_cast<std::int64_t>(s.annotations.size());

  const auto stats_at = [&](double t) {
    double fp_sum = 0.0;
    std::int64_t hits = 0;
    for (const auto& s : scans) {
      fp_sum += detail::count_false_positives(s, t);
      hits += detail::scan_outcome_at(s, t).hits;
    }
    const double fp_rate = fp_sum / static_cast<double>(scans.size());
    const double sens =
        total_annotations > 0 ? static_cast<double>(hits) / static_cast<double>(total_annotations)
                              : 0.0;
    return std::pair<double, double>(fp_rate, sens);
  };

  FrocCurve curve;
  for (double target : fp_rates) {
    // +infinity admits nothing: FP/scan = 0, always feasible.
    double best_threshold = std::numeric_limits<double>::infinity();
    double best_sens = 0.0;
    for (double t : thresholds) {  // ascending: the last feasible t is the smallest
      const auto [fp_rate, sens] = stats_at(t);
      if (fp_rate <= target) {
        best_threshold = t;
        best_sens = sens;
        break;  // thresholds ascending: first feasible is smallest => max sensitivity
      }
    }
    FrocPoint p;
    p.fp_per_scan = target;
    p.sensitivity = best_sens;
    p.lower = p.upper = best_sens;
    p.threshold = best_threshold;
    curve.points.push_back(p);
  }
  return curve;
}

// Inverse-CDF (nearest-rank) percentile: Q(p) = sorted[ceil(p*B) - 1].
inline double percentile_nearest_rank(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of empty sample");
  std::sort(values.begin(), values.end());
  const std::int64_t b = static_cast<std::int64_t>(values.size());
  std::int64_t k = static_cast<std::int64_t>(std::ceil(p * static_cast<double>(b))) - 1;
  k = std::clamp<std::int64_t>(k, 0, b - 1);
  return values[static_cast<std::size_t>(k)];
}

// Percentile bootstrap over scans (resampled with replacement); pooled
// sensitivity per resample. Deterministic under seed.
inline std::pair<double, double> bootstrap_ci(std::span<const ScanOutcome> outcomes,
                                              int n_resamples = 1000, double level = 0.95,
                                              std::uint64_t seed = 0) {
  if (outcomes.empty()) throw std::invalid_argument("bootstrap_ci: no scans");
  Rng rng(mix_seed(seed, 0xb007ULL));
  const int n = static_cast<int>(outcomes.size());
  std::vector<double> sens(static_cast<std::size_t>(n_resamples));
  for (int r = 0; r < n_resamples; ++r) {
    std::int64_t hits = 0, total = 0;
    for (int i = 0; i < n; ++i) {
      const ScanOutcome& o = outcomes[static_cast<std::size_t>(rng.uniform_int(n))];
      hits += o.hits;
      total += o.total;
    }
    sens[static_cast<std::size_t>(r)] =
        total > 0 ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  }
  const double alpha = (1.0 - level) / 2.0;
  return {percentile_nearest_rank(sens, alpha), percentile_nearest_rank(sens, 1.0 - alpha)};
}

// FROC curve with per-point bootstrap confidence bounds. Each operating point
// uses a seed derived from (seed, point index).
inline FrocCurve froc_with_bootstrap(std::span<const ScanData> scans,
                                     std::span<const double> fp_rates, int n_resamples = 1000,
                                     double level = 0.95, std::uint64_t seed = 0) {
  FrocCurve curve = froc(scans, fp_rates);
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    const auto outcomes = per_scan_outcomes_at(scans, curve.points[i].threshold);
    const auto [lo, hi] =
        bootstrap_ci(outcomes, n_resamples, level, mix_seed(seed, 7000 + i));
    curve.points[i].lower = lo;
    curve.points[i].upper = hi;
  }
  return curve;
}

// FROC CSV: fp_rate,mean,lower,upper
inline void save_froc_csv(const FrocCurve& curve, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << "fp_rate,mean,lower,upper\n";
  for (const auto& p : curve.points)
    f << detail::format_double(p.fp_per_scan) << "," << detail::format_double(p.sensitivity)
      << "," << detail::format_double(p.lower) << "," << detail::format_double(p.upper) << "\n";
}

}  // namespace noduleid
