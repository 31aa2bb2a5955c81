#include <algorithm>
#include <cstdio>
#include <fstream>

#include "cubeseg/eval.hpp"

namespace cubeseg {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f << text;
}

struct SvgCanvas {
  std::string body;
  double w = 640, h = 400;
  double left = 60, right = 20, top = 30, bottom = 40;

  double plot_w() const { return w - left - right; }
  double plot_h() const { return h - top - bottom; }

  void rect(double x, double y, double rw, double rh, const std::string& fill, double opacity) {
    body += "<rect x=\"" + fmt_short(x) + "\" y=\"" + fmt_short(y) + "\" width=\"" +
            fmt_short(rw) + "\" height=\"" + fmt_short(rh) + "\" fill=\"" + fill +
            "\" fill-opacity=\"" + fmt_short(opacity) + "\"/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke) {
    body += "<line x1=\"" + fmt_short(x1) + "\" y1=\"" + fmt_short(y1) + "\" x2=\"" +
            fmt_short(x2) + "\" y2=\"" + fmt_short(y2) + "\" stroke=\"" + stroke +
            "\" stroke-width=\"1\"/>\n";
  }
  void polyline(const std::string& points, const std::string& stroke) {
    body += "<polyline points=\"" + points + "\" fill=\"none\" stroke=\"" + stroke +
            "\" stroke-width=\"2\"/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 12,
            const std::string& anchor = "start") {
    body += "<text x=\"" + fmt_short(x) + "\" y=\"" + fmt_short(y) + "\" font-size=\"" +
            std::to_string(size) + "\" font-family=\"sans-serif\" text-anchor=\"" + anchor +
            "\">" + s + "</text>\n";
  }
  void axes() {
    line(left, top, left, h - bottom, "#333");
    line(left, h - bottom, w - right, h - bottom, "#333");
  }
  std::string finish() const {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " + fmt_short(w) + " " +
           fmt_short(h) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n" + body +
           "</svg>\n";
  }
};

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& r) {
  std::string out = "metric,value\n";
  out += "mcov," + fmt(r.mcov) + "\n";
  out += "mwcov," + fmt(r.mwcov) + "\n";
  out += "mprec," + fmt(r.mprec) + "\n";
  out += "mrec," + fmt(r.mrec) + "\n";
  const std::vector<double> t = ap_thresholds();
  for (std::size_t i = 0; i < t.size(); ++i)
    out += "ap@" + fmt_short(t[i]) + "," + fmt(r.ap_by_threshold[i]) + "\n";
  out += "map_avg," + fmt(r.map_avg) + "\n";
  out += "scenes," + std::to_string(r.scene_count) + "\n";
  out += "zero_prediction_flag," + std::to_string(r.zero_prediction_flag ? 1 : 0) + "\n";
  for (const PerClassMetrics& pc : r.per_class) {
    const std::string base = "class" + std::to_string(pc.cls);
    out += base + ".ap25," + fmt(pc.ap25) + "\n";
    out += base + ".ap50," + fmt(pc.ap50) + "\n";
    out += base + ".map_avg," + fmt(pc.map_avg) + "\n";
  }
  write_text(path, out);
}

std::string metrics_svg(const MetricsReport& r) {
  SvgCanvas c;
  std::vector<std::pair<std::string, double>> bars = {
      {"mCov", r.mcov},   {"mWCov", r.mwcov},          {"mPrec", r.mprec},
      {"mRec", r.mrec},   {"AP@0.25", r.ap_by_threshold.empty() ? 0.0 : r.ap_by_threshold[0]},
      {"AP@0.5", r.ap_by_threshold.size() > 1 ? r.ap_by_threshold[1] : 0.0},
      {"mAP", r.map_avg},
  };
  c.axes();
  c.text(c.w / 2, 18, "segmentation metrics (" + std::to_string(r.scene_count) + " scenes)", 14,
         "middle");
  for (int g = 0; g <= 4; ++g) {
    const double v = g / 4.0;
    const double y = c.h - c.bottom - v * c.plot_h();
    c.line(c.left - 3, y, c.left, y, "#333");
    c.text(c.left - 6, y + 4, fmt_short(v), 10, "end");
  }
  const double bw = c.plot_w() / (bars.size() * 1.5);
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double x = c.left + (i + 0.25) * c.plot_w() / bars.size();
    const double hh = std::clamp(bars[i].second, 0.0, 1.0) * c.plot_h();
    c.rect(x, c.h - c.bottom - hh, bw, hh, "#4878cf", 0.9);
    c.text(x + bw / 2, c.h - c.bottom + 14, bars[i].first, 10, "middle");
    c.text(x + bw / 2, c.h - c.bottom - hh - 4, fmt_short(bars[i].second), 10, "middle");
  }
  return c.finish();
}

std::string distance_overlap_svg(const DistanceOverlapReport& a, const std::string& label_a,
                                 const DistanceOverlapReport* b, const std::string& label_b) {
  SvgCanvas c;
  c.axes();
  auto peak = [](const DistanceOverlapReport& r) {
    double m = 0.0;
    for (double v : r.intra_histogram) m = std::max(m, v);
    for (double v : r.inter_histogram) m = std::max(m, v);
    return m;
  };
  double ymax = peak(a);
  if (b) ymax = std::max(ymax, peak(*b));
  if (ymax <= 0.0) ymax = 1.0;

  auto draw = [&](const DistanceOverlapReport& r, double y_off, double height,
                  const std::string& title) {
    const std::size_t bins = r.intra_histogram.size();
    const double bw = c.plot_w() / static_cast<double>(bins);
    for (std::size_t i = 0; i < bins; ++i) {
      const double x = c.left + i * bw;
      const double hi_h = r.intra_histogram[i] / ymax * height;
      const double he_h = r.inter_histogram[i] / ymax * height;
      if (hi_h > 0) c.rect(x, y_off - hi_h, bw, hi_h, "#d65f5f", 0.55);
      if (he_h > 0) c.rect(x, y_off - he_h, bw, he_h, "#4878cf", 0.55);
    }
    c.line(c.left, y_off, c.w - c.right, y_off, "#333");
    c.text(c.left + 4, y_off - height - 4,
           title + " (overlap " + fmt_short(r.overlap_probability) + ")", 12);
  };

  if (b) {
    const double half = c.plot_h() / 2 - 16;
    draw(a, c.top + half + 8, half, label_a);
    draw(*b, c.h - c.bottom, half, label_b);
  } else {
    draw(a, c.h - c.bottom, c.plot_h(), label_a);
  }
  c.text(c.left + 4, 18, "intra-instance", 11);
  c.rect(c.left + 80, 10, 10, 10, "#d65f5f", 0.55);
  c.text(c.left + 104, 18, "inter-instance", 11);
  c.rect(c.left + 184, 10, 10, 10, "#4878cf", 0.55);
  c.text(c.w - c.right, c.h - 8, "pairwise L2 distance", 11, "end");
  return c.finish();
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  std::string out = "n_s,overlap_rate,oracle_mprec\n";
  for (const SweepRow& r : rows)
    out += std::to_string(r.n_s) + "," + fmt(r.overlap_rate) + "," + fmt(r.oracle_mprec) + "\n";
  write_text(path, out);
}

std::string sweep_svg(std::span<const SweepRow> rows) {
  SvgCanvas c;
  c.axes();
  c.line(c.w - c.right, c.top, c.w - c.right, c.h - c.bottom, "#333");
  if (rows.empty()) return c.finish();

  double max_rate = 0.0;
  for (const SweepRow& r : rows) max_rate = std::max(max_rate, r.overlap_rate);
  if (max_rate <= 0.0) max_rate = 1.0;

  const int n0 = rows.front().n_s, n1 = rows.back().n_s;
  auto x_of = [&](int n_s) {
    return n1 == n0 ? c.left + c.plot_w() / 2
                    : c.left + (n_s - n0) / double(n1 - n0) * c.plot_w();
  };

  std::string pts_rate, pts_prec;
  for (const SweepRow& r : rows) {
    const double x = x_of(r.n_s);
    pts_rate += fmt_short(x) + "," + fmt_short(c.h - c.bottom - r.overlap_rate / max_rate * c.plot_h()) + " ";
    pts_prec += fmt_short(x) + "," + fmt_short(c.h - c.bottom - r.oracle_mprec * c.plot_h()) + " ";
    c.text(x, c.h - c.bottom + 14, std::to_string(r.n_s), 10, "middle");
  }
  c.polyline(pts_rate, "#d65f5f");
  c.polyline(pts_prec, "#4878cf");
  c.text(c.left + 4, 18, "cube overlap rate (left, max " + fmt_short(max_rate) + ")", 11);
  c.rect(c.left + 220, 10, 10, 10, "#d65f5f", 0.9);
  c.text(c.left + 244, 18, "oracle precision bound (right, 0..1)", 11);
  c.rect(c.left + 440, 10, 10, 10, "#4878cf", 0.9);
  c.text(c.w / 2, c.h - 8, "cells per axis", 11, "middle");
  return c.finish();
}

}  // namespace cubeseg
