// SPDX-License-Identifier: Apache-2.0
//
// Datasets: synthetic generators, IDX and CSV loaders, train-split standardization.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dqa/tensor.hpp"

namespace dqa {

enum class Split { Train, Val };

/// Per-feature standardization statistics and the split they came from.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> sd;
  Split source = Split::Train;

  bool empty() const { return mean.empty(); }
  bool operator==(const NormStats&) const = default;
};

struct Dataset {
  Tensor features;  // [N×D] or [N×C×H×W]
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  Split split = Split::Train;
  NormStats stats;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  std::size_t feature_count() const { return features.size() / size(); }
  /// Rows at `indices`, stacked in that order.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> batch_labels(std::span<const std::size_t> indices) const;
  void validate() const;
};

struct DatasetSplit {
  Dataset train;
  Dataset val;
};

enum class SyntheticKind { TwoMoons, Blobs, XorRings };

std::string to_string(SyntheticKind kind);
SyntheticKind parse_synthetic_kind(const std::string& name);

/// Balanced two-class synthetic set, split 80/20 by a seeded permutation and
/// standardized with train statistics. n >= 4, noise >= 0.
DatasetSplit gen_synthetic(SyntheticKind kind, std::size_t n, double noise, std::uint64_t seed);

/// Seeded permutation split; the val part gets `val_fraction` of the rows.
DatasetSplit split_dataset(const Dataset& all, double val_fraction, std::uint64_t seed);

NormStats compute_stats(const Dataset& train);
void apply_stats(Dataset& data, const NormStats& stats);
/// Computes statistics on train and applies them to both splits.
void standardize(DatasetSplit& data);

/// IDX image/label pair (magic 0x803 / 0x801, big-endian). Pixels scaled to
/// [0, 1]; features shaped [N×1×H×W].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Header row required; non-label columns become features in header order.
Dataset load_csv(const std::filesystem::path& path, const std::string& label_column);
/// Writes features as f0..f{D-1} plus the label column, round-trip exact.
void save_csv(const Dataset& data, const std::filesystem::path& path,
              const std::string& label_column = "label");

}  // namespace dqa
