// SPDX-License-Identifier: Apache-2.0
//
// Weight quantizers: min-max, SAWB, binary (BWN) and ternary (TWN).
//
// Every quantizer maps each weight to the nearest member of a finite level set.
// Ties go to the larger level; on the uniform grids this is round-half-away-
// from-zero applied to the level index counted from the lowest level.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dqa/tensor.hpp"

namespace dqa {

enum class QuantizerKind { MinMax, Sawb, Bwn, Twn };

std::string to_string(QuantizerKind kind);
QuantizerKind parse_quantizer_kind(const std::string& name);

/// Frozen calibration. Uniform kinds use [low, high]; BWN/TWN use beta
/// (TWN also records the threshold delta that selected beta).
struct Calibration {
  double low = 0.0;
  double high = 0.0;
  double beta = 0.0;
  double delta = 0.0;

  bool operator==(const Calibration&) const = default;
};

struct QuantizerSpec {
  QuantizerKind kind = QuantizerKind::MinMax;
  int bits = 2;
  std::optional<Calibration> calibration;

  static QuantizerSpec minmax(int bits) { return {QuantizerKind::MinMax, bits, std::nullopt}; }
  static QuantizerSpec sawb(int bits) { return {QuantizerKind::Sawb, bits, std::nullopt}; }
  static QuantizerSpec bwn() { return {QuantizerKind::Bwn, 1, std::nullopt}; }
  static QuantizerSpec twn() { return {QuantizerKind::Twn, 2, std::nullopt}; }

  /// Throws ValidationError for inconsistent kind/bits/calibration.
  void validate() const;
  /// "minmax:2", "sawb:2", "bwn", "twn".
  std::string label() const;
  static QuantizerSpec parse(const std::string& label);

  bool operator==(const QuantizerSpec&) const = default;
};

struct QuantizationResult {
  Tensor values;
  Tensor pass_mask;
  std::vector<double> levels;  // strictly increasing
  Calibration calibration;
};

/// Nearest of the 2^n equally spaced levels in [q_low, q_high]. The mask is 1
/// where q_low <= x <= q_high.
QuantizationResult uniform_quantize(const Tensor& x, double q_low, double q_high, int n);

/// (min(w), max(w)); throws DegenerateRangeError if they coincide.
std::pair<double, double> minmax_levels(const Tensor& w, int n);

/// Degenerate-range widening used by quantize(): [x - eps, x + eps].
std::pair<double, double> widen_degenerate_range(double x);

struct SawbCalibration {
  double clip = 0.0;
  double msqe = 0.0;
  bool degenerate = false;  // all-zero input; clip is a machine-epsilon sentinel
};

/// Clip minimizing the mean-square quantization error over the linear grid
/// max|w|·i/grid, i = 1..grid. Ties go to the smaller clip.
SawbCalibration sawb_calibrate(const Tensor& w, int n, int grid = 100);

QuantizationResult sawb_quantize(const Tensor& w, int n, double clip);

/// beta·sign(w), beta = mean|w|, sign(0) = +1.
QuantizationResult bwn_quantize(const Tensor& w);

/// Levels {-beta, 0, beta} with beta = mean of |w_i| over |w_i| > 0.7·mean|w|.
QuantizationResult twn_quantize(const Tensor& w);

/// argmin over levels of |x - q|, ties to the larger level.
double brute_force_quantize(double x, std::span<const double> levels);

/// Level set realized by a spec with a given calibration.
std::vector<double> level_set(const QuantizerSpec& spec, const Calibration& calibration);

/// Dispatch. Uses spec.calibration when present, otherwise calibrates from w.
QuantizationResult quantize(const Tensor& w, const QuantizerSpec& spec, int sawb_grid = 100);

}  // namespace dqa
