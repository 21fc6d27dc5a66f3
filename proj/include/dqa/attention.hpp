// SPDX-License-Identifier: Apache-2.0
//
// Attention over K weight quantizers.
//
// Each layer keeps soft attention logits alpha. Before every forward pass the
// logits are rescaled to unit population standard deviation (persistently, off
// the tape), then a = softmax(alpha / T) weights the K quantized copies of the
// layer weights. A regularizer lambda·g'a / S pulls attention toward the
// cheapest (lowest-bitwidth) quantizer while T cools exponentially.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dqa/quantizers.hpp"
#include "dqa/tensor.hpp"

namespace dqa {

/// Decay rate psi with t_initial·psi^B == t_final.
double derive_decay(double t_initial, double t_final, std::uint64_t total_batches);

struct TemperatureSchedule {
  double t_initial = 100.0;
  double t_final = 0.03;
  std::uint64_t total_batches = 1;
  double decay = 0.0;

  static TemperatureSchedule make(double t_initial, double t_final, std::uint64_t total_batches);

  /// T(b) = t_initial·decay^b. Past the end it clamps to t_final and sets
  /// *overran when given.
  double at(std::uint64_t batch, bool* overran = nullptr) const;
};

/// alpha_k = (sum of the other bitwidths) / (sum of all bitwidths).
std::vector<double> init_alpha(std::span<const int> bits);

/// Penalty vector 1, 4, 16, ... (4^k).
std::vector<double> default_penalties(std::size_t k);

/// alpha / sd(alpha), population sd. Skipped when sd < 1e-12.
std::vector<double> normalize_alpha(std::span<const double> alpha);

/// softmax(alpha / T).
std::vector<double> attention_weights(std::span<const double> alpha, double temperature);
Var attention_weights(Var alpha, double temperature);

/// q = Q'a for Q given as a [K×M] tensor.
Tensor mix_quantized(const Tensor& rows, std::span<const double> a);
/// Differentiable q = sum_k a_k·rows[k]; all rows share one shape.
Var mix_quantized(Var a, std::span<const Var> rows);

double regularizer(std::span<const double> a, std::span<const double> penalties, double lambda,
                   std::size_t total_weights);
Var regularizer(Var a, std::span<const double> penalties, double lambda, std::size_t total_weights);

struct AttentionState {
  Tensor alpha;                    // [K] soft attention logits
  std::vector<double> penalties;   // g
  double lambda = 5.0;
  std::size_t total_weights = 1;   // S over the whole network
  std::vector<int> bits;           // n_1 < n_2 < ... < n_K

  static AttentionState make(std::vector<int> bits, std::vector<double> penalties, double lambda,
                             std::size_t total_weights);
  std::size_t size() const { return bits.size(); }
  void validate() const;
};

struct DqaForward {
  Var output;
  Var reg;
  std::vector<double> attention;
  std::vector<QuantizationResult> quantized;
};

/// One DQA layer pass: normalize alpha, attention weights, K quantizations of w
/// with STE, mixture, transfer function and the layer regularizer.
///
/// With `training` the normalized alpha is written back into the state and
/// bound as a parameter; otherwise a normalized copy enters as a constant.
/// `frozen_attention`, when non-empty, replaces softmax(alpha/T).
DqaForward dqa_layer_forward(Var x, Var w, std::span<const QuantizerSpec> specs,
                             AttentionState& state, double temperature,
                             const std::function<Var(Var input, Var mixed)>& transfer,
                             bool training = true, std::span<const double> frozen_attention = {},
                             int sawb_grid = 100);

}  // namespace dqa
