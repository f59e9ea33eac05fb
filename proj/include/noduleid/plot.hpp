#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include "noduleid/growth.hpp"
#include "noduleid/metrics.hpp"

namespace noduleid {

// Static SVG figures; deterministic output for reproducibility checks.
namespace plot {

namespace detail {

inline std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

struct Frame {
  double x0 = 70, y0 = 40, w = 520, h = 380;  // plot area in svg units
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;

  double sx(double x) const { return x0 + (x - xmin) / (xmax - xmin) * w; }
  double sy(double y) const { return y0 + h - (y - ymin) / (ymax - ymin) * h; }
};

inline void open_svg(std::ofstream& f, const std::string& title) {
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" "
       "viewBox=\"0 0 640 480\" font-family=\"Helvetica, Arial, sans-serif\" "
       "font-size=\"12\">\n";
  f << "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
  f << "<text x=\"320\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title
    << "</text>\n";
}

inline void axes(std::ofstream& f, const Frame& fr, const std::string& xlabel,
                 const std::string& ylabel) {
  f << "<rect x=\"" << num(fr.x0) << "\" y=\"" << num(fr.y0) << "\" width=\"" << num(fr.w)
    << "\" height=\"" << num(fr.h) << "\" fill=\"none\" stroke=\"black\"/>\n";
  f << "<text x=\"" << num(fr.x0 + fr.w / 2) << "\" y=\"470\" text-anchor=\"middle\">" << xlabel
    << "</text>\n";
  f << "<text x=\"16\" y=\"" << num(fr.y0 + fr.h / 2)
    << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << num(fr.y0 + fr.h / 2) << ")\">"
    << ylabel << "</text>\n";
}

}  // namespace detail

// Sensitivity vs FP/scan on a log2 axis, with bootstrap whiskers.
inline void write_froc_svg(const FrocCurve& curve, const std::filesystem::path& path,
                           const std::string& title = "FROC") {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  detail::Frame fr;
  fr.xmin = std::log2(0.125) - 0.3;
  fr.xmax = std::log2(8.0) + 0.3;
  fr.ymin = 0.0;
  fr.ymax = 1.0;

  detail::open_svg(f, title);
  detail::axes(f, fr, "false positives per scan", "sensitivity");
  for (double y = 0.0; y <= 1.0001; y += 0.2) {
    f << "<line x1=\"" << detail::num(fr.sx(fr.xmin)) << "\" y1=\"" << detail::num(fr.sy(y))
      << "\" x2=\"" << detail::num(fr.sx(fr.xmax)) << "\" y2=\"" << detail::num(fr.sy(y))
      << "\" stroke=\"#dddddd\"/>\n";
    f << "<text x=\"" << detail::num(fr.x0 - 8) << "\" y=\"" << detail::num(fr.sy(y) + 4)
      << "\" text-anchor=\"end\">" << detail::num(y) << "</text>\n";
  }
  for (const auto& p : curve.points) {
    const double x = std::log2(p.fp_per_scan);
    f << "<text x=\"" << detail::num(fr.sx(x)) << "\" y=\"" << detail::num(fr.y0 + fr.h + 16)
      << "\" text-anchor=\"middle\">" << detail::num(p.fp_per_scan) << "</text>\n";
  }

  std::string poly;
  for (const auto& p : curve.points) {
    poly += detail::num(fr.sx(std::log2(p.fp_per_scan))) + "," +
            detail::num(fr.sy(p.sensitivity)) + " ";
  }
  f << "<polyline points=\"" << poly << "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n";
  for (const auto& p : curve.points) {
    const double x = fr.sx(std::log2(p.fp_per_scan));
    f << "<line x1=\"" << detail::num(x) << "\" y1=\"" << detail::num(fr.sy(p.lower))
      << "\" x2=\"" << detail::num(x) << "\" y2=\"" << detail::num(fr.sy(p.upper))
      << "\" stroke=\"#1f77b4\" stroke-width=\"1\"/>\n";
    f << "<circle cx=\"" << detail::num(x) << "\" cy=\"" << detail::num(fr.sy(p.sensitivity))
      << "\" r=\"3.5\" fill=\"#1f77b4\"/>\n";
  }
  f << "</svg>\n";
}

// Bland-Altman scatter: mean of the two measurements vs their difference, with
// the mean-difference line and 95% limits of agreement.
inline void write_bland_altman_svg(std::span<const double> pred, std::span<const double> truth,
                                   const std::filesystem::path& path,
                                   const std::string& title = "Bland-Altman") {
  if (pred.size() != truth.size() || pred.size() < 2)
    throw std::invalid_argument("bland-altman plot: need >= 2 paired values");
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());

  const BlandAltman ba = bland_altman(pred, truth);
  detail::Frame fr;
  double mmin = 1e300, mmax = -1e300;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double m = (pred[i] + truth[i]) / 2.0;
    mmin = std::min(mmin, m);
    mmax = std::max(mmax, m);
  }
  const double mpad = std::max(1.0, (mmax - mmin) * 0.1);
  fr.xmin = mmin - mpad;
  fr.xmax = mmax + mpad;
  const double dspan = std::max(1.0, (ba.loa_high - ba.loa_low) * 0.75);
  fr.ymin = ba.loa_low - dspan * 0.4;
  fr.ymax = ba.loa_high + dspan * 0.4;

  detail::open_svg(f, title);
  detail::axes(f, fr, "mean of measurements (mm)", "difference (mm)");

  const auto hline = [&](double y, const char* color, const std::string& label) {
    f << "<line x1=\"" << detail::num(fr.sx(fr.xmin)) << "\" y1=\"" << detail::num(fr.sy(y))
      << "\" x2=\"" << detail::num(fr.sx(fr.xmax)) << "\" y2=\"" << detail::num(fr.sy(y))
      << "\" stroke=\"" << color << "\" stroke-dasharray=\"6,3\"/>\n";
    f << "<text x=\"" << detail::num(fr.x0 + fr.w + 4) << "\" y=\"" << detail::num(fr.sy(y) + 4)
      << "\" font-size=\"10\">" << label << "</text>\n";
  };
  hline(ba.mean_diff, "#2ca02c", "mean " + detail::num(ba.mean_diff));
  hline(ba.loa_low, "#d62728", detail::num(ba.loa_low));
  hline(ba.loa_high, "#d62728", detail::num(ba.loa_high));

  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double m = (pred[i] + truth[i]) / 2.0;
    const double d = pred[i] - truth[i];
    f << "<circle cx=\"" << detail::num(fr.sx(m)) << "\" cy=\"" << detail::num(fr.sy(d))
      << "\" r=\"3\" fill=\"none\" stroke=\"#1f77b4\"/>\n";
  }
  f << "</svg>\n";
}

}  // namespace plot
}  // namespace noduleid
