// SPDX-License-Identifier: Apache-2.0
//
// Quantized layers, networks, SGD and hard export.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dqa/attention.hpp"
#include "dqa/quantizers.hpp"
#include "dqa/random.hpp"
#include "dqa/tensor.hpp"

namespace dqa {

enum class LayerKind { Dense, Conv2d };
enum class Activation { None, Relu };

struct FullPrecision {
  bool operator==(const FullPrecision&) const = default;
};

struct FixedQuantizer {
  QuantizerSpec spec;
  bool operator==(const FixedQuantizer&) const = default;
};

struct DqaMixture {
  std::vector<QuantizerSpec> specs;
  AttentionState attention;
  /// When non-empty, used instead of softmax(alpha / T).
  std::vector<double> frozen_attention;
};

struct BinaryRelax {
  std::vector<QuantizerSpec> specs;
  double omega = 1.0;
  bool operator==(const BinaryRelax&) const = default;
};

using WeightMode = std::variant<FullPrecision, FixedQuantizer, DqaMixture, BinaryRelax>;

std::string mode_name(const WeightMode& mode);

/// Dense: weights [in×out], y = x·q + b. Conv2d: weights [out×in×k×k], valid
/// convolution. Biases stay full precision.
struct QuantizedLayer {
  LayerKind kind = LayerKind::Dense;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  Activation activation = Activation::None;
  Tensor weights;
  Tensor bias;
  WeightMode mode = FullPrecision{};

  static QuantizedLayer dense(std::size_t in, std::size_t out, Activation act, Rng& rng);
  static QuantizedLayer conv2d(std::size_t in_channels, std::size_t out_channels,
                               std::size_t kernel, Activation act, Rng& rng);

  std::size_t weight_count() const { return weights.size(); }
};

struct LayerForward {
  Var output;
  std::optional<Var> reg;                    // DQA only
  std::vector<double> attention;             // DQA only
  std::vector<QuantizationResult> quantized; // one per quantizer in use
};

/// y = f(x; q) with q chosen by the layer's weight mode. With `training`, the
/// weights, bias and attention logits are bound as tape parameters.
LayerForward layer_forward(QuantizedLayer& layer, Var x, double temperature, bool training,
                           int sawb_grid = 100);

struct Network {
  Shape input_shape;  // per sample, e.g. {2} or {1, 28, 28}
  std::size_t classes = 2;
  std::vector<QuantizedLayer> layers;
  double temperature = 1.0;  // last temperature used by training
  int sawb_grid = 100;

  /// S: weight elements over all layers, biases excluded.
  std::size_t total_weights() const;
  /// Re-syncs S in every DQA attention state after the topology changes.
  void refresh_total_weights();

  struct Forward {
    Var logits;
    Var reg;  // sum of layer regularizers (constant 0 without DQA)
    std::vector<LayerForward> layers;
  };
  Forward forward(Tape& tape, const Tensor& batch, bool training);
  /// Read-only inference at the stored temperature.
  Tensor predict(const Tensor& batch) const;

  std::vector<Tensor*> parameters();
  void zero_grad();
};

struct SgdState {
  double lr = 0.05;
  double momentum = 0.9;
  std::vector<Tensor> velocity;
};

/// v <- momentum·v + grad; p <- p - lr·v, using each parameter's grad slot.
void sgd_step(std::span<Tensor* const> params, SgdState& state);

struct HardLayer {
  LayerKind kind = LayerKind::Dense;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  Activation activation = Activation::None;
  Shape weight_shape;
  bool quantized = false;
  QuantizerSpec spec;                 // valid when quantized
  std::vector<double> levels;         // frozen level table
  std::vector<std::uint32_t> codes;   // index into levels per weight
  std::vector<double> raw_weights;    // full-precision layers only
  Tensor bias;

  Tensor decode_weights() const;
};

struct HardModel {
  Shape input_shape;
  std::size_t classes = 2;
  std::vector<HardLayer> layers;
  std::vector<std::string> warnings;  // not persisted

  /// Full-precision network whose weights are the decoded levels.
  Network to_network() const;
  /// Achieved bitwidth per layer, 0 for full-precision layers.
  std::vector<int> bitwidths() const;
  bool operator==(const HardModel& other) const;
};

/// Argmax attention quantizer per DQA layer (first quantizer for BR), the
/// layer's own quantizer for fixed layers, raw weights for full precision.
HardModel export_hard(const Network& net);

/// argmax of the attention a layer would use at temperature T (0 for non-DQA).
std::size_t selected_quantizer(const QuantizedLayer& layer, double temperature);

}  // namespace dqa
