// SPDX-License-Identifier: Apache-2.0

#include "dqa/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "dqa/error.hpp"
#include "dqa/quantizers.hpp"

namespace dqa {

Staircase effective_staircase(std::span<const CalibrationRecord> records, std::size_t points) {
  if (records.empty()) throw ValidationError("staircase: no calibration records");
  if (points < 2) throw ValidationError("staircase: need at least two sweep points");
  Staircase s;
  s.epoch = records.front().epoch;
  const double lo = records.front().w_min;
  const double hi = records.front().w_max;
  s.w.resize(points);
  for (std::size_t i = 0; i < points; ++i)
    s.w[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  s.q.assign(points, 0.0);
  const Tensor sweep = Tensor::vector(s.w);
  for (const auto& r : records) {
    const Tensor q = quantize(sweep, r.spec).values;
    for (std::size_t i = 0; i < points; ++i) s.q[i] += r.weight * q[i];
  }
  return s;
}

std::size_t count_levels(std::span<const double> q, double tol) {
  if (q.empty()) return 0;
  std::vector<double> v(q.begin(), q.end());
  std::sort(v.begin(), v.end());
  const double gap = tol * (v.back() - v.front());
  std::size_t n = 1;
  double anchor = v.front();
  for (double x : v) {
    if (x - anchor > gap) {
      ++n;
      anchor = x;
    }
  }
  return n;
}

std::vector<int> default_plot_epochs(std::span<const CalibrationRecord> records, std::size_t layer) {
  int last = -1;
  for (const auto& r : records)
    if (r.layer == layer) last = std::max(last, r.epoch);
  if (last < 0) return {};
  std::set<int> e{0, last / 4, last / 2, last};
  return {e.begin(), e.end()};
}

PlotData build_plot(const MetricsTable& metrics, std::span<const CalibrationRecord> calibrations,
                    std::size_t layer, std::span<const int> epochs, std::size_t points) {
  if (metrics.k == 0)
    throw ValidationError("metrics have no attention columns (not a DQA run)");
  std::size_t layers = 0;
  for (const auto& r : metrics.rows) layers = std::max(layers, r.layer + 1);
  if (layer >= layers)
    throw ValidationError("layer " + std::to_string(layer) + " out of range (run has " +
                          std::to_string(layers) + " layers)");

  PlotData plot;
  plot.layer = layer;
  for (const auto& r : metrics.rows) {
    if (r.layer != layer || r.attention.empty()) continue;
    if (plot.curves.empty()) {
      plot.curves.resize(r.attention.size());
      for (std::size_t k = 0; k < plot.curves.size(); ++k) plot.curves[k].k = k;
    }
    for (std::size_t k = 0; k < plot.curves.size() && k < r.attention.size(); ++k) {
      plot.curves[k].batch.push_back(static_cast<double>(r.batch));
      plot.curves[k].value.push_back(r.attention[k]);
    }
  }
  if (plot.curves.empty())
    throw ValidationError("layer " + std::to_string(layer) + " has no attention values");

  std::vector<int> chosen(epochs.begin(), epochs.end());
  if (chosen.empty()) chosen = default_plot_epochs(calibrations, layer);
  for (int e : chosen) {
    std::vector<CalibrationRecord> at;
    for (const auto& c : calibrations)
      if (c.layer == layer && c.epoch == e) at.push_back(c);
    if (at.empty())
      throw ValidationError("no calibration snapshot for layer " + std::to_string(layer) +
                            " at epoch " + std::to_string(e));
    std::sort(at.begin(), at.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
    if (plot.labels.empty())
      for (const auto& c : at) plot.labels.push_back(c.spec.label());
    plot.staircases.push_back(effective_staircase(at, points));
  }
  if (plot.labels.empty())
    for (std::size_t k = 0; k < plot.curves.size(); ++k) plot.labels.push_back("Q" + std::to_string(k + 1));
  return plot;
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

struct Panel {
  double x0, y0, w, h;
  double xmin, xmax, ymin, ymax;

  double px(double x) const { return x0 + (x - xmin) / (xmax - xmin) * w; }
  double py(double y) const { return y0 + h - (y - ymin) / (ymax - ymin) * h; }
};

void fix_range(double& lo, double& hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
}

void axes(std::ostringstream& o, const Panel& p, const std::string& title, const std::string& xl,
          const std::string& yl) {
  o << "<rect x=\"" << p.x0 << "\" y=\"" << p.y0 << "\" width=\"" << p.w << "\" height=\"" << p.h
    << "\" fill=\"none\" stroke=\"#333\"/>\n";
  o << "<text x=\"" << p.x0 + p.w / 2 << "\" y=\"" << p.y0 - 10
    << "\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  o << "<text x=\"" << p.x0 + p.w / 2 << "\" y=\"" << p.y0 + p.h + 36
    << "\" text-anchor=\"middle\" font-size=\"12\">" << xl << "</text>\n";
  o << "<text x=\"" << p.x0 - 44 << "\" y=\"" << p.y0 + p.h / 2 << "\" text-anchor=\"middle\" "
    << "font-size=\"12\" transform=\"rotate(-90 " << p.x0 - 44 << ' ' << p.y0 + p.h / 2 << ")\">" << yl
    << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = p.xmin + (p.xmax - p.xmin) * i / 4.0;
    const double fy = p.ymin + (p.ymax - p.ymin) * i / 4.0;
    o << "<text x=\"" << p.px(fx) << "\" y=\"" << p.y0 + p.h + 16
      << "\" text-anchor=\"middle\" font-size=\"10\">" << num(fx) << "</text>\n";
    o << "<text x=\"" << p.x0 - 6 << "\" y=\"" << p.py(fy) + 3
      << "\" text-anchor=\"end\" font-size=\"10\">" << num(fy) << "</text>\n";
  }
}

void polyline(std::ostringstream& o, const Panel& p, std::span<const double> x,
              std::span<const double> y, const char* colour) {
  o << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < x.size(); ++i) o << num(p.px(x[i])) << ',' << num(p.py(y[i])) << ' ';
  o << "\"/>\n";
}

}  // namespace

std::string render_svg(const PlotData& plot) {
  const double width = 1000, height = 420;
  Panel left{70, 50, 380, 300, 0, 1, 0, 1};
  Panel right{570, 50, 380, 300, 0, 1, 0, 1};

  double bmin = INFINITY, bmax = -INFINITY;
  for (const auto& c : plot.curves)
    for (double b : c.batch) {
      bmin = std::min(bmin, b);
      bmax = std::max(bmax, b);
    }
  left.xmin = bmin;
  left.xmax = bmax;
  fix_range(left.xmin, left.xmax);

  double wmin = INFINITY, wmax = -INFINITY, qmin = INFINITY, qmax = -INFINITY;
  for (const auto& s : plot.staircases) {
    for (double w : s.w) {
      wmin = std::min(wmin, w);
      wmax = std::max(wmax, w);
    }
    for (double q : s.q) {
      qmin = std::min(qmin, q);
      qmax = std::max(qmax, q);
    }
  }
  if (plot.staircases.empty()) wmin = qmin = -1, wmax = qmax = 1;
  right.xmin = std::min(wmin, qmin);
  right.xmax = std::max(wmax, qmax);
  fix_range(right.xmin, right.xmax);
  right.ymin = right.xmin;
  right.ymax = right.xmax;

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << width
    << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << ' ' << height
    << "\" font-family=\"sans-serif\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  axes(o, left, "Attention, layer " + std::to_string(plot.layer), "batch", "attention");
  for (const auto& c : plot.curves) {
    const char* colour = kPalette[c.k % std::size(kPalette)];
    polyline(o, left, c.batch, c.value, colour);
    const double ly = left.y0 + 16 + 16.0 * static_cast<double>(c.k);
    o << "<text x=\"" << left.x0 + left.w - 8 << "\" y=\"" << ly << "\" text-anchor=\"end\" "
      << "font-size=\"11\" fill=\"" << colour << "\">a_" << c.k + 1;
    if (c.k < plot.labels.size()) o << " (" << plot.labels[c.k] << ')';
    o << "</text>\n";
  }

  axes(o, right, "Effective quantization, layer " + std::to_string(plot.layer), "w", "q(w)");
  o << "<line x1=\"" << right.px(right.xmin) << "\" y1=\"" << right.py(right.xmin) << "\" x2=\""
    << right.px(right.xmax) << "\" y2=\"" << right.py(right.xmax)
    << "\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>\n";
  for (std::size_t i = 0; i < plot.staircases.size(); ++i) {
    const auto& s = plot.staircases[i];
    const char* colour = kPalette[i % std::size(kPalette)];
    polyline(o, right, s.w, s.q, colour);
    o << "<text x=\"" << right.x0 + 8 << "\" y=\"" << right.y0 + 16 + 16.0 * static_cast<double>(i)
      << "\" font-size=\"11\" fill=\"" << colour << "\">epoch " << s.epoch << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string render_points_csv(const PlotData& plot) {
  std::ostringstream o;
  o << "series,epoch,x,y\n";
  char buf[64];
  for (const auto& c : plot.curves)
    for (std::size_t i = 0; i < c.batch.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g", c.batch[i], c.value[i]);
      o << "a_" << c.k + 1 << ",," << buf << '\n';
    }
  for (const auto& s : plot.staircases)
    for (std::size_t i = 0; i < s.w.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g", s.w[i], s.q[i]);
      o << "staircase," << s.epoch << ',' << buf << '\n';
    }
  return o.str();
}

}  // namespace dqa
