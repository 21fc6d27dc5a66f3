// SPDX-License-Identifier: Apache-2.0
//
// Attention trajectories and effective quantization staircases rendered as
// standalone SVG 1.1, with the plotted points also kept as data.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dqa/persistence.hpp"
#include "dqa/train.hpp"

namespace dqa {

struct AttentionCurve {
  std::size_t k = 0;  // 0-based quantizer slot
  std::vector<double> batch;
  std::vector<double> value;
};

struct Staircase {
  int epoch = 0;
  std::vector<double> w;
  std::vector<double> q;
};

struct PlotData {
  std::size_t layer = 0;
  std::vector<std::string> labels;  // quantizer labels, one per slot
  std::vector<AttentionCurve> curves;
  std::vector<Staircase> staircases;
};

/// Effective mixture q(w) = sum_k weight_k·Q_k(w) of one layer at one epoch,
/// swept over `points` inputs in [w_min, w_max].
Staircase effective_staircase(std::span<const CalibrationRecord> layer_records, std::size_t points);

/// Distinct values of `q`, merging values closer than tol·(max - min).
std::size_t count_levels(std::span<const double> q, double tol = 1e-6);

/// Epochs to draw by default: first, quarter, half, last (deduplicated).
std::vector<int> default_plot_epochs(std::span<const CalibrationRecord> records, std::size_t layer);

/// Throws ValidationError when the metrics have no attention columns, the
/// layer is out of range, or the layer has no attention.
PlotData build_plot(const MetricsTable& metrics, std::span<const CalibrationRecord> calibrations,
                    std::size_t layer, std::span<const int> epochs = {}, std::size_t points = 801);

std::string render_svg(const PlotData& plot);
/// Columns: series,epoch,x,y. Series are a_1..a_K (x = batch) and
/// staircase (x = w, y = q).
std::string render_points_csv(const PlotData& plot);

}  // namespace dqa
