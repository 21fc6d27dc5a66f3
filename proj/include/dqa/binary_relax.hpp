// SPDX-License-Identifier: Apache-2.0
//
// Binary-Relax baseline mixing: q = (omega·Q_1 + Q_2 + ... + Q_K) / (omega + K - 1),
// with omega starting at 1 and multiplied by 1.02 after every epoch.

#pragma once

#include <span>
#include <vector>

#include "dqa/tensor.hpp"

namespace dqa {

inline constexpr double kBinaryRelaxGrowth = 1.02;

/// Plain mixture of equal-length rows; rows[0] is the low-bit target.
std::vector<double> br_mix(std::span<const std::vector<double>> rows, double omega);
/// Differentiable version over rows of equal shape.
Var br_mix(std::span<const Var> rows, double omega);

/// Weight the mixture puts on each row.
std::vector<double> br_weights(std::size_t k, double omega);

inline double br_omega_update(double omega) { return kBinaryRelaxGrowth * omega; }

}  // namespace dqa
