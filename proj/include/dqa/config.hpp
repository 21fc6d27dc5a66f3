// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: line-oriented `section.key = value` text with `#`
// comments. Every key has a default; unknown keys are rejected.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dqa/data.hpp"
#include "dqa/qnn.hpp"
#include "dqa/train.hpp"

namespace dqa {

struct DataConfig {
  std::string kind = "two_moons";  // two_moons | blobs | xor_rings | idx | csv
  std::size_t n = 1000;
  double noise = 0.2;
  std::string images;  // idx
  std::string labels;  // idx
  std::string path;    // csv
  std::string label_column = "label";
  double val_fraction = 0.2;  // idx / csv

  bool operator==(const DataConfig&) const = default;
};

struct ModelConfig {
  std::vector<std::size_t> hidden{16};
  std::vector<std::size_t> conv_channels;
  std::size_t conv_kernel = 3;
  bool exempt_first_last = false;

  bool operator==(const ModelConfig&) const = default;
};

struct QuantizerConfig {
  std::vector<QuantizerSpec> list{QuantizerSpec::minmax(2), QuantizerSpec::minmax(4),
                                  QuantizerSpec::minmax(8)};
  std::vector<double> penalties;  // empty: 1, 4, 16, ...
  int sawb_grid = 100;

  bool operator==(const QuantizerConfig&) const = default;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  std::string output_dir = "runs/experiment";
  DataConfig data;
  ModelConfig model;
  QuantizerConfig quantizers;
  TrainPlan train;  // train.seed mirrors the top-level seed

  /// Penalties actually used (defaults filled in).
  std::vector<double> effective_penalties() const;
  bool operator==(const ExperimentConfig& other) const;
};

/// Parses and validates; throws ConfigError listing every problem found.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::filesystem::path& path);
/// Full dump of every key, parseable by parse_config_text.
std::string serialize_config(const ExperimentConfig& config);
/// Throws ConfigError listing every violated constraint.
void validate_config(const ExperimentConfig& config);

/// Loads or generates the configured dataset (train split standardized).
DatasetSplit load_dataset(const ExperimentConfig& config);
/// Conv layers, then dense hidden layers (ReLU), then the output layer, with
/// weight modes assigned from the method.
Network build_network(const ExperimentConfig& config, const Shape& sample_shape,
                      std::size_t classes);
/// Same dataset selection and layer topology (weights excluded).
bool same_topology(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace dqa
