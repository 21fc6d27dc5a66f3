// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats: training checkpoints, hard-quantized model artifacts,
// metrics and calibration CSVs, run summaries.
//
// Binary containers are little-endian: 4-byte magic, 1-byte format version,
// payload, trailing CRC-32 over everything before it. Writes go to a temporary
// file that is fsynced and renamed into place.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dqa/qnn.hpp"
#include "dqa/train.hpp"

namespace dqa {

inline constexpr std::uint8_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kModelVersion = 1;

std::uint32_t crc32(std::span<const unsigned char> bytes);

/// Writes bytes to `path` via temp file + fsync + rename.
void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

struct Checkpoint {
  std::string config_text;  // effective experiment config
  Network network;
  TrainProgress progress;
  std::uint64_t seed = 0;   // shuffle stream = f(seed, epochs_done)
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
/// Throws LoadError on bad magic, version or CRC, FormatError on truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_model(const HardModel& model, const std::filesystem::path& path);
HardModel load_model(const std::filesystem::path& path);

/// Column header for a run whose DQA layers have K quantizers (K = 0: none).
std::string metrics_header(std::size_t k);
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRecord> records,
                       bool append = false);

/// One parsed metrics row.
struct MetricsRow {
  int epoch = 0;
  std::uint64_t batch = 0;
  double loss = 0.0;
  double reg = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  std::optional<double> temperature;
  std::size_t layer = 0;
  std::vector<double> attention;
  int argmax = 0;
  std::optional<double> omega;
};

struct MetricsTable {
  std::size_t k = 0;  // attention columns
  std::vector<MetricsRow> rows;
};

MetricsTable read_metrics_csv(const std::filesystem::path& path);

void write_calibration_csv(const std::filesystem::path& path,
                           std::span<const CalibrationRecord> records, bool append = false);
std::vector<CalibrationRecord> read_calibration_csv(const std::filesystem::path& path);

void write_summary(const std::filesystem::path& path,
                   const std::vector<std::pair<std::string, std::string>>& entries);
std::map<std::string, std::string> read_summary(const std::filesystem::path& path);

}  // namespace dqa
