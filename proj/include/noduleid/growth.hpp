#pragma once

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "noduleid/annotations.hpp"

namespace noduleid {

enum class GrowthOutcome { TP, FP, TN, FN };

inline std::string to_string(GrowthOutcome o) {
  switch (o) {
    case GrowthOutcome::TP: return "TP";
    case GrowthOutcome::FP: return "FP";
    case GrowthOutcome::TN: return "TN";
    case GrowthOutcome::FN: return "FN";
  }
  return "?";
}

// Sign agreement between predicted and true growth. Zero difference counts as
// no growth (clinically: unchanged diameter), so it lands on the TN/FN side.
inline GrowthOutcome classify_outcome(double delta_pred, double delta_true) {
  const bool pred_growth = delta_pred > 0.0;
  const bool true_growth = delta_true > 0.0;
  if (pred_growth && true_growth) return GrowthOutcome::TP;
  if (pred_growth && !true_growth) return GrowthOutcome::FP;
  if (!pred_growth && true_growth) return GrowthOutcome::FN;
  return GrowthOutcome::TN;
}

struct GrowthAssessment {
  std::string case_id;
  double d_t1 = 0.0, d_t2 = 0.0;  // predicted diameters, mm
  double delta_pred = 0.0;        // == d_t2 - d_t1
  double delta_true = 0.0;
  GrowthOutcome outcome = GrowthOutcome::TN;
};

inline GrowthAssessment assess_growth(const std::string& case_id, double d_t1, double d_t2,
                                      double delta_true) {
  GrowthAssessment g;
  g.case_id = case_id;
  g.d_t1 = d_t1;
  g.d_t2 = d_t2;
  g.delta_pred = d_t2 - d_t1;
  g.delta_true = delta_true;
  g.outcome = classify_outcome(g.delta_pred, delta_true);
  return g;
}

struct BlandAltman {
  double mean_diff = 0.0;
  double loa_low = 0.0, loa_high = 0.0;  // mean +/- 1.96 * sample sd
  double sd = 0.0;
};

namespace detail {

inline void require_paired(std::span<const double> pred, std::span<const double> truth,
                           std::size_t min_n, const char* what) {
  if (pred.size() != truth.size())
    throw std::invalid_argument(std::string(what) + ": lists differ in length");
  if (pred.size() < min_n)
    throw std::invalid_argument(std::string(what) + ": need at least " + std::to_string(min_n) +
                                " pairs");
}

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_sd(std::span<const double> v, double mean) {
  double s2 = 0.0;
  for (double x : v) s2 += (x - mean) * (x - mean);
  return std::sqrt(s2 / static_cast<double>(v.size() - 1));
}

}  // namespace detail

inline BlandAltman bland_altman(std::span<const double> pred, std::span<const double> truth) {
  detail::require_paired(pred, truth, 2, "bland_altman");
  std::vector<double> diffs(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) diffs[i] = pred[i] - truth[i];
  BlandAltman ba;
  ba.mean_diff = detail::mean_of(diffs);
  ba.sd = detail::sample_sd(diffs, ba.mean_diff);
  ba.loa_low = ba.mean_diff - 1.96 * ba.sd;
  ba.loa_high = ba.mean_diff + 1.96 * ba.sd;
  return ba;
}

struct RegressionStats {
  double mae = 0.0;
  double mse = 0.0;
  double r2 = 0.0;
};

inline RegressionStats regression_stats(std::span<const double> pred,
                                        std::span<const double> truth) {
  detail::require_paired(pred, truth, 2, "regression_stats");
  RegressionStats rs;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - truth[i];
    rs.mae += std::abs(e);
    rs.mse += e * e;
    ss_res += e * e;
  }
  rs.mae /= static_cast<double>(pred.size());
  rs.mse /= static_cast<double>(pred.size());
  const double tmean = detail::mean_of(truth);
  double ss_tot = 0.0;
  for (double t : truth) ss_tot += (t - tmean) * (t - tmean);
  if (ss_tot == 0.0)
    throw std::domain_error("regression_stats: r2 undefined for constant truth");
  rs.r2 = 1.0 - ss_res / ss_tot;
  return rs;
}

// Two-sided one-sample t-test of (pred - truth) against mean zero. With zero
// variance: p = 1 when the mean is also zero, else p = 0.
inline double paired_t_test(std::span<const double> pred, std::span<const double> truth,
                            bool log_transform = false) {
  detail::require_paired(pred, truth, 2, "paired_t_test");
  std::vector<double> diffs(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    diffs[i] = pred[i] - truth[i];
    if (log_transform) {
      // Signed log transform keeps zero-centered differences meaningful.
      diffs[i] = std::copysign(std::log1p(std::abs(diffs[i])), diffs[i]);
    }
  }
  const double m = detail::mean_of(diffs);
  const double sd = detail::sample_sd(diffs, m);
  const std::size_t n = diffs.size();
  if (sd == 0.0) return m == 0.0 ? 1.0 : 0.0;
  const double t = m / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t_distribution<double> dist(static_cast<double>(n - 1));
  return 2.0 * boost::math::cdf(dist, -std::abs(t));
}

struct AgreementReport {
  double mean_diff = 0.0;
  double loa_low = 0.0, loa_high = 0.0;
  double mae = 0.0, mse = 0.0, r2 = 0.0;
  double t_test_p = 1.0;
};

inline AgreementReport make_agreement_report(std::span<const double> pred,
                                             std::span<const double> truth) {
  const BlandAltman ba = bland_altman(pred, truth);
  const RegressionStats rs = regression_stats(pred, truth);
  AgreementReport r;
  r.mean_diff = ba.mean_diff;
  r.loa_low = ba.loa_low;
  r.loa_high = ba.loa_high;
  r.mae = rs.mae;
  r.mse = rs.mse;
  r.r2 = rs.r2;
  r.t_test_p = paired_t_test(pred, truth);
  return r;
}

// Growth report CSV: case_id,d_t1_pred,d_t2_pred,delta_pred,delta_true,outcome
inline void save_growth_report(std::span<const GrowthAssessment> rows,
                               const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << "case_id,d_t1_pred,d_t2_pred,delta_pred,delta_true,outcome\n";
  for (const auto& g : rows) {
    f << g.case_id << "," << detail::format_double(g.d_t1) << ","
      << detail::format_double(g.d_t2) << "," << detail::format_double(g.delta_pred) << ","
      << detail::format_double(g.delta_true) << "," << to_string(g.outcome) << "\n";
  }
}

}  // namespace noduleid
