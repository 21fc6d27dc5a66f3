// SPDX-License-Identifier: Apache-2.0

#include "dqa/binary_relax.hpp"

#include <string>

#include "dqa/error.hpp"

namespace dqa {

namespace {

void check_omega(double omega) {
  if (!(omega > 0.0)) throw ValidationError("binary relax: omega must be positive");
}

}  // namespace

std::vector<double> br_mix(std::span<const std::vector<double>> rows, double omega) {
  check_omega(omega);
  if (rows.empty()) throw DimensionError("br_mix: no rows");
  const std::size_t m = rows[0].size();
  for (const auto& r : rows)
    if (r.size() != m)
      throw DimensionError("br_mix: row lengths " + std::to_string(m) + " and " +
                           std::to_string(r.size()) + " differ");
  const double denom = omega + static_cast<double>(rows.size() - 1);
  std::vector<double> q(m);
  for (std::size_t j = 0; j < m; ++j) {
    double s = omega * rows[0][j];
    for (std::size_t k = 1; k < rows.size(); ++k) s += rows[k][j];
    q[j] = s / denom;
  }
  return q;
}

std::vector<double> br_weights(std::size_t k, double omega) {
  check_omega(omega);
  const double denom = omega + static_cast<double>(k - 1);
  std::vector<double> w(k, 1.0 / denom);
  if (k) w[0] = omega / denom;
  return w;
}

Var br_mix(std::span<const Var> rows, double omega) {
  check_omega(omega);
  if (rows.empty()) throw DimensionError("br_mix: no rows");
  const Shape shape = rows[0].shape();
  std::vector<std::size_t> inputs;
  for (const auto& r : rows) {
    if (r.shape() != shape)
      throw DimensionError("br_mix: row shapes " + shape_str(shape) + " and " +
                           shape_str(r.shape()) + " differ");
    inputs.push_back(r.id());
  }
  const double denom = omega + static_cast<double>(rows.size() - 1);
  Tensor q(shape);
  for (std::size_t j = 0; j < q.size(); ++j) {
    double s = omega * rows[0].value()[j];
    for (std::size_t k = 1; k < rows.size(); ++k) s += rows[k].value()[j];
    q[j] = s / denom;
  }
  return rows[0].tape().record(std::move(q), inputs, [inputs, omega, denom](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!t.requires_grad(inputs[k])) continue;
      const double f = (k == 0 ? omega : 1.0) / denom;
      auto& gr = t.grad(inputs[k]);
      for (std::size_t j = 0; j < g.size(); ++j) gr[j] += g[j] * f;
    }
  });
}

}  // namespace dqa
