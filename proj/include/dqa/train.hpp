// SPDX-License-Identifier: Apache-2.0
//
// Batch-wise training loop for full-precision, fixed-quantizer, DQA and
// Binary-Relax networks, plus evaluation.
//
// Per batch b = 1..B: T(b) = T(0)·psi^b, forward all layers, loss = task loss +
// sum of layer regularizers, backward, one SGD step on weights, biases and
// attention logits. Learning-rate drops and the Binary-Relax omega growth
// happen at epoch boundaries.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dqa/attention.hpp"
#include "dqa/data.hpp"
#include "dqa/qnn.hpp"

namespace dqa {

enum class Method { FullPrecision, Fixed, Dqa, BinaryRelax };

std::string to_string(Method method);
Method parse_method(const std::string& name);

struct LrSchedule {
  double initial = 0.05;
  double drop = 0.1;
  int period = 20;  // epochs

  /// initial·drop^floor(epoch/period).
  double at(int epoch) const;
};

struct TrainPlan {
  int epochs = 60;
  int batch_size = 32;
  LrSchedule lr;
  double momentum = 0.9;
  double t_initial = 100.0;
  double t_final = 0.03;
  double lambda = 5.0;
  std::uint64_t seed = 1;
  Method method = Method::Dqa;
  int log_every = 10;  // batches; the last batch of each epoch is always logged

  void validate() const;
  std::uint64_t batches_per_epoch(std::size_t dataset_size) const;
  std::uint64_t total_batches(std::size_t dataset_size) const;
};

/// One logged observation. Per-layer vectors are empty for layers without DQA.
struct MetricsRecord {
  int epoch = 0;
  std::uint64_t batch = 0;  // global batch index b, 1..B
  double loss = 0.0;        // task + reg
  double task_loss = 0.0;
  double reg = 0.0;
  double train_acc = 0.0;   // running accuracy over the epoch so far
  double val_acc = 0.0;
  double temperature = 0.0;
  double lr = 0.0;
  std::optional<double> omega;  // BR only
  std::vector<std::vector<double>> attention;
  std::vector<int> argmax;  // 1-based; 0 for layers without attention

  bool operator==(const MetricsRecord&) const = default;
};

/// Frozen quantizer state of one layer at the end of an epoch, enough to
/// redraw its effective quantization function.
struct CalibrationRecord {
  int epoch = 0;
  std::size_t layer = 0;
  std::size_t index = 0;  // quantizer slot k (0-based)
  QuantizerSpec spec;     // calibration filled in
  double weight = 0.0;    // attention (DQA) or mixing weight (BR/fixed)
  double w_min = 0.0;
  double w_max = 0.0;

  bool operator==(const CalibrationRecord&) const = default;
};

/// Everything besides the network needed to continue a run exactly.
struct TrainProgress {
  int epochs_done = 0;
  std::uint64_t batches_done = 0;
  SgdState sgd;
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Raised when the loss stops being finite. Carries the last state.
class NanLossError : public std::runtime_error {
 public:
  NanLossError(const std::string& what, MetricsRecord last)
      : std::runtime_error(what), last_(std::move(last)) {}
  const MetricsRecord& last() const noexcept { return last_; }

 private:
  MetricsRecord last_;
};

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  std::vector<CalibrationRecord> calibrations;
  TrainProgress progress;
};

struct TrainOptions {
  /// Stop after this many completed epochs (for interrupted runs).
  std::optional<int> stop_after_epoch;
  /// Called after every completed epoch with everything recorded so far.
  std::function<void(const Network&, const TrainResult&)> on_epoch_end;
};

/// Runs (or resumes, when `resume` is given) the plan on `data.train`, logging
/// validation accuracy on `data.val`.
TrainResult train(Network& net, const DatasetSplit& data, const TrainPlan& plan,
                  const TrainProgress* resume = nullptr, const TrainOptions& options = {});

/// Forward-only top-1 accuracy and mean cross-entropy at the stored temperature.
EvalResult evaluate(const Network& net, const Dataset& data);

/// Builds the mode for every layer from the method and quantizer list.
/// `exempt` marks layers kept at full precision.
void assign_modes(Network& net, Method method, const std::vector<QuantizerSpec>& quantizers,
                  const std::vector<double>& penalties, double lambda,
                  const std::vector<bool>& exempt = {});

}  // namespace dqa
