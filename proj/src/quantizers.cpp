// SPDX-License-Identifier: Apache-2.0

#include "dqa/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dqa/error.hpp"

namespace dqa {

std::string to_string(QuantizerKind kind) {
  switch (kind) {
    case QuantizerKind::MinMax: return "minmax";
    case QuantizerKind::Sawb: return "sawb";
    case QuantizerKind::Bwn: return "bwn";
    case QuantizerKind::Twn: return "twn";
  }
  return "?";
}

QuantizerKind parse_quantizer_kind(const std::string& name) {
  if (name == "minmax") return QuantizerKind::MinMax;
  if (name == "sawb") return QuantizerKind::Sawb;
  if (name == "bwn") return QuantizerKind::Bwn;
  if (name == "twn") return QuantizerKind::Twn;
  throw ValidationError("unknown quantizer kind '" + name + "'");
}

void QuantizerSpec::validate() const {
  switch (kind) {
    case QuantizerKind::MinMax:
    case QuantizerKind::Sawb:
      if (bits < 1 || bits > 16)
        throw ValidationError(to_string(kind) + " bitwidth must be in [1, 16], got " +
                              std::to_string(bits));
      break;
    case QuantizerKind::Bwn:
      if (bits != 1) throw ValidationError("bwn uses exactly 1 bit");
      break;
    case QuantizerKind::Twn:
      if (bits != 2) throw ValidationError("twn uses exactly 2 bits");
      break;
  }
  if (calibration) {
    const auto& c = *calibration;
    if ((kind == QuantizerKind::MinMax || kind == QuantizerKind::Sawb) && !(c.low < c.high))
      throw ValidationError("calibrated range must satisfy low < high");
    if (kind == QuantizerKind::Sawb && !(c.high > 0.0))
      throw ValidationError("sawb clip must be positive");
    if (c.beta < 0.0 || c.delta < 0.0) throw ValidationError("beta and delta must be non-negative");
  }
}

std::string QuantizerSpec::label() const {
  if (kind == QuantizerKind::Bwn || kind == QuantizerKind::Twn) return to_string(kind);
  return to_string(kind) + ":" + std::to_string(bits);
}

QuantizerSpec QuantizerSpec::parse(const std::string& label) {
  const auto colon = label.find(':');
  const std::string name = label.substr(0, colon);
  QuantizerSpec spec;
  spec.kind = parse_quantizer_kind(name);
  if (spec.kind == QuantizerKind::Bwn || spec.kind == QuantizerKind::Twn) {
    spec.bits = spec.kind == QuantizerKind::Bwn ? 1 : 2;
    if (colon != std::string::npos && std::stoi(label.substr(colon + 1)) != spec.bits)
      throw ValidationError("'" + label + "': " + name + " has a fixed bitwidth");
  } else {
    if (colon == std::string::npos) throw ValidationError("'" + label + "' needs a bitwidth, e.g. " +
                                                          name + ":2");
    const std::string digits = label.substr(colon + 1);
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit))
      throw ValidationError("'" + label + "': bitwidth is not an integer");
    spec.bits = std::stoi(digits);
  }
  spec.validate();
  return spec;
}

namespace {

// Index of the nearest level; ties to the larger one. `levels` strictly increasing.
std::size_t nearest_index(double x, std::span<const double> levels) {
  auto it = std::lower_bound(levels.begin(), levels.end(), x);
  if (it == levels.end()) return levels.size() - 1;
  std::size_t hi = static_cast<std::size_t>(it - levels.begin());
  if (hi == 0) return 0;
  const std::size_t lo = hi - 1;
  return std::abs(x - levels[lo]) < std::abs(x - levels[hi]) ? lo : hi;
}

std::vector<double> uniform_levels(double q_low, double q_high, int n) {
  const std::size_t count = std::size_t{1} << n;
  std::vector<double> levels(count);
  const double step = (q_high - q_low) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) levels[i] = q_low + static_cast<double>(i) * step;
  levels.back() = q_high;
  return levels;
}

double mean_abs(const Tensor& w) {
  double s = 0.0;
  for (double v : w.data()) s += std::abs(v);
  return s / static_cast<double>(w.size());
}

void require_nonempty(const Tensor& w, const char* op) {
  if (w.size() == 0) throw ValidationError(std::string(op) + ": empty input");
}

QuantizationResult nearest_from_levels(const Tensor& w, std::vector<double> levels,
                                       const Calibration& calibration) {
  QuantizationResult r{Tensor(w.shape()), Tensor(w.shape(), 1.0), std::move(levels), calibration};
  for (std::size_t i = 0; i < w.size(); ++i) r.values[i] = r.levels[nearest_index(w[i], r.levels)];
  return r;
}

std::vector<double> symmetric_levels(double beta, bool with_zero) {
  if (beta == 0.0) return {0.0};
  if (with_zero) return {-beta, 0.0, beta};
  return {-beta, beta};
}

}  // namespace

QuantizationResult uniform_quantize(const Tensor& x, double q_low, double q_high, int n) {
  if (!(q_low < q_high))
    throw ValidationError("uniform_quantize: need q_low < q_high, got [" + std::to_string(q_low) +
                          ", " + std::to_string(q_high) + "]");
  if (n < 1 || n > 16) throw ValidationError("uniform_quantize: bitwidth must be in [1, 16]");
  QuantizationResult r{Tensor(x.shape()), Tensor(x.shape()), uniform_levels(q_low, q_high, n),
                       Calibration{q_low, q_high, 0.0, 0.0}};
  const auto& levels = r.levels;
  const std::size_t last = levels.size() - 1;
  const double step = (q_high - q_low) / static_cast<double>(last);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double c = std::clamp(v, q_low, q_high);
    r.pass_mask[i] = (v >= q_low && v <= q_high) ? 1.0 : 0.0;
    // Round half away from zero on the (non-negative) level index.
    const double pos = std::floor((c - q_low) / step + 0.5);
    std::size_t idx = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(last)));
    // The closed-form index can be off by one near midpoints; settle on distances.
    while (idx < last && std::abs(c - levels[idx + 1]) <= std::abs(c - levels[idx])) ++idx;
    while (idx > 0 && std::abs(c - levels[idx - 1]) < std::abs(c - levels[idx])) --idx;
    r.values[i] = levels[idx];
  }
  return r;
}

std::pair<double, double> minmax_levels(const Tensor& w, int n) {
  require_nonempty(w, "minmax_levels");
  if (n < 1) throw ValidationError("minmax_levels: bitwidth must be positive");
  const auto [lo, hi] = std::minmax_element(w.data().begin(), w.data().end());
  if (!(*lo < *hi))
    throw DegenerateRangeError("minmax_levels: all weights equal " + std::to_string(*lo));
  return {*lo, *hi};
}

std::pair<double, double> widen_degenerate_range(double x) {
  const double eps = std::max(1e-8, 1e-8 * std::abs(x));
  return {x - eps, x + eps};
}

SawbCalibration sawb_calibrate(const Tensor& w, int n, int grid) {
  require_nonempty(w, "sawb_calibrate");
  if (grid < 2) throw ValidationError("sawb_calibrate: grid must have at least 2 points");
  double max_abs = 0.0;
  for (double v : w.data()) max_abs = std::max(max_abs, std::abs(v));
  if (max_abs == 0.0) {
    const double eps = std::numeric_limits<double>::epsilon();
    return {eps, 0.0, true};
  }
  SawbCalibration best{0.0, std::numeric_limits<double>::infinity(), false};
  for (int i = 1; i <= grid; ++i) {
    const double clip = max_abs * static_cast<double>(i) / static_cast<double>(grid);
    const auto q = uniform_quantize(w, -clip, clip, n);
    double err = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double d = w[j] - q.values[j];
      err += d * d;
    }
    err /= static_cast<double>(w.size());
    if (err < best.msqe) best = {clip, err, false};
  }
  return best;
}

QuantizationResult sawb_quantize(const Tensor& w, int n, double clip) {
  if (!(clip > 0.0)) throw ValidationError("sawb_quantize: clip must be positive");
  return uniform_quantize(w, -clip, clip, n);
}

QuantizationResult bwn_quantize(const Tensor& w) {
  require_nonempty(w, "bwn_quantize");
  const double beta = mean_abs(w);
  QuantizationResult r{Tensor(w.shape()), Tensor(w.shape(), 1.0), symmetric_levels(beta, false),
                       Calibration{-beta, beta, beta, 0.0}};
  for (std::size_t i = 0; i < w.size(); ++i) r.values[i] = w[i] >= 0.0 ? beta : -beta;
  return r;
}

QuantizationResult twn_quantize(const Tensor& w) {
  require_nonempty(w, "twn_quantize");
  const double delta = 0.7 * mean_abs(w);
  double s = 0.0;
  std::size_t count = 0;
  for (double v : w.data())
    if (std::abs(v) > delta) {
      s += std::abs(v);
      ++count;
    }
  const double beta = count ? s / static_cast<double>(count) : 0.0;
  // delta selects beta; assignment itself is nearest-level over {-beta, 0, beta}.
  return nearest_from_levels(w, symmetric_levels(beta, true), Calibration{-beta, beta, beta, delta});
}

double brute_force_quantize(double x, std::span<const double> levels) {
  if (levels.empty()) throw ValidationError("brute_force_quantize: empty level set");
  double best = levels[0];
  double best_d = std::abs(x - levels[0]);
  for (std::size_t i = 1; i < levels.size(); ++i) {
    const double d = std::abs(x - levels[i]);
    if (d < best_d || (d == best_d && levels[i] > best)) {
      best = levels[i];
      best_d = d;
    }
  }
  return best;
}

std::vector<double> level_set(const QuantizerSpec& spec, const Calibration& c) {
  switch (spec.kind) {
    case QuantizerKind::MinMax:
    case QuantizerKind::Sawb: return uniform_levels(c.low, c.high, spec.bits);
    case QuantizerKind::Bwn: return symmetric_levels(c.beta, false);
    case QuantizerKind::Twn: return symmetric_levels(c.beta, true);
  }
  return {};
}

QuantizationResult quantize(const Tensor& w, const QuantizerSpec& spec, int sawb_grid) {
  spec.validate();
  require_nonempty(w, "quantize");
  if (spec.calibration) {
    const auto& c = *spec.calibration;
    switch (spec.kind) {
      case QuantizerKind::MinMax:
      case QuantizerKind::Sawb: return uniform_quantize(w, c.low, c.high, spec.bits);
      case QuantizerKind::Bwn:
      case QuantizerKind::Twn: return nearest_from_levels(w, level_set(spec, c), c);
    }
  }
  switch (spec.kind) {
    case QuantizerKind::MinMax: {
      std::pair<double, double> range;
      try {
        range = minmax_levels(w, spec.bits);
      } catch (const DegenerateRangeError&) {
        range = widen_degenerate_range(w[0]);
      }
      return uniform_quantize(w, range.first, range.second, spec.bits);
    }
    case QuantizerKind::Sawb: {
      const auto cal = sawb_calibrate(w, spec.bits, sawb_grid);
      return sawb_quantize(w, spec.bits, cal.clip);
    }
    case QuantizerKind::Bwn: return bwn_quantize(w);
    case QuantizerKind::Twn: return twn_quantize(w);
  }
  throw ValidationError("unknown quantizer kind");
}

}  // namespace dqa
