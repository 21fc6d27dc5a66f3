// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train, eval, export, plot, compare.
//
// Exit codes:
//   0  success
//   1  usage error, invalid argument or I/O failure
//   2  configuration error
//   3  training aborted on a non-finite loss
//   4  checkpoint or model artifact failed to load

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dqa/config.hpp"
#include "dqa/train.hpp"

namespace dqa {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitConfig = 2,
  kExitNan = 3,
  kExitLoad = 4,
};

/// Files a training run leaves in its output directory.
struct RunFiles {
  std::filesystem::path dir;
  std::filesystem::path metrics() const { return dir / "metrics.csv"; }
  std::filesystem::path calibration() const { return dir / "quantizers.csv"; }
  std::filesystem::path checkpoint() const { return dir / "checkpoint.bin"; }
  std::filesystem::path summary() const { return dir / "summary.txt"; }
  std::filesystem::path config() const { return dir / "effective.cfg"; }
  std::filesystem::path invocation() const { return dir / "invocation.txt"; }
};

struct RunOptions {
  bool resume = false;                  // continue from the directory's checkpoint
  std::optional<int> stop_after_epoch;  // simulate an interrupted run
  std::string invocation;               // echoed to invocation.txt
  std::ostream* log = nullptr;          // progress lines; null for silence
};

struct RunSummary {
  ExperimentConfig config;
  int epochs_done = 0;
  bool finished = false;
  double final_train_acc = 0.0;
  double final_val_acc = 0.0;
  double final_loss = 0.0;
  double temperature = 0.0;
  std::vector<int> bits;  // exported bitwidth per layer, 0 for full precision
  std::optional<double> omega;
};

/// Trains `config` into `dir`, flushing metrics, calibrations and the
/// checkpoint at every epoch boundary, then writes summary.txt.
/// Throws ConfigError, NanLossError, LoadError like the layers below.
RunSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& dir,
                          const RunOptions& options = {});

struct CompareRow {
  std::string name;
  std::string method;
  std::string quantizers;
  std::vector<double> val_acc;  // per seed
  double mean = 0.0;
  double sd = 0.0;  // population
};

/// Runs every config over seeds base..base+n-1, each in its own subdirectory.
std::vector<CompareRow> run_compare(const std::vector<ExperimentConfig>& configs,
                                    const std::filesystem::path& out, int seeds,
                                    std::uint64_t seed_base = 1, std::ostream* log = nullptr);
std::string compare_csv(const std::vector<CompareRow>& rows);
std::string compare_text(const std::vector<CompareRow>& rows);

/// Each returns an exit code and reports diagnostics on `err`.
int cmd_train(const std::filesystem::path& config, const std::optional<std::filesystem::path>& out,
              std::optional<std::uint64_t> seed, std::optional<std::string> method, bool resume,
              const std::string& invocation, std::ostream& out_stream, std::ostream& err);
int cmd_eval(const std::optional<std::filesystem::path>& checkpoint,
             const std::optional<std::filesystem::path>& model,
             const std::optional<std::filesystem::path>& config, std::ostream& out,
             std::ostream& err);
int cmd_export(const std::filesystem::path& checkpoint, const std::filesystem::path& out,
               std::ostream& out_stream, std::ostream& err);
int cmd_plot(const std::filesystem::path& metrics, const std::filesystem::path& out, int layer,
             const std::optional<std::filesystem::path>& calibration, const std::vector<int>& epochs,
             std::ostream& out_stream, std::ostream& err);
int cmd_compare(const std::vector<std::filesystem::path>& configs, const std::filesystem::path& out,
                int seeds, std::uint64_t seed_base, std::ostream& out_stream, std::ostream& err);

/// Full argument parsing and dispatch.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace dqa
