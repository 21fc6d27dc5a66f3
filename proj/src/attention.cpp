// SPDX-License-Identifier: Apache-2.0

#include "dqa/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dqa/error.hpp"

namespace dqa {

double derive_decay(double t_initial, double t_final, std::uint64_t total_batches) {
  if (!(t_initial > 0.0) || !(t_final > 0.0))
    throw ValidationError("temperatures must be positive");
  if (!(t_final < t_initial))
    throw ValidationError("temperature schedule must cool: t_final (" + std::to_string(t_final) +
                          ") must be below t_initial (" + std::to_string(t_initial) + ")");
  if (total_batches < 1) throw ValidationError("temperature schedule needs at least one batch");
  const double psi = std::exp(std::log(t_final / t_initial) / static_cast<double>(total_batches));
  if (!(psi > 0.0 && psi < 1.0)) throw ValidationError("derived decay outside (0, 1)");
  return psi;
}

TemperatureSchedule TemperatureSchedule::make(double t_initial, double t_final,
                                              std::uint64_t total_batches) {
  return {t_initial, t_final, total_batches, derive_decay(t_initial, t_final, total_batches)};
}

double TemperatureSchedule::at(std::uint64_t batch, bool* overran) const {
  if (batch > total_batches) {
    if (overran) *overran = true;
    return t_final;
  }
  if (overran) *overran = false;
  return t_initial * std::pow(decay, static_cast<double>(batch));
}

std::vector<double> init_alpha(std::span<const int> bits) {
  if (bits.empty()) throw ValidationError("init_alpha: no quantizers");
  for (std::size_t k = 1; k < bits.size(); ++k)
    if (bits[k] <= bits[k - 1])
      throw ValidationError("init_alpha: bitwidths must be strictly increasing");
  const double total = std::accumulate(bits.begin(), bits.end(), 0.0);
  std::vector<double> alpha(bits.size());
  for (std::size_t k = 0; k < bits.size(); ++k) alpha[k] = (total - bits[k]) / total;
  return alpha;
}

std::vector<double> default_penalties(std::size_t k) {
  std::vector<double> g(k);
  double v = 1.0;
  for (auto& x : g) {
    x = v;
    v *= 4.0;
  }
  return g;
}

std::vector<double> normalize_alpha(std::span<const double> alpha) {
  std::vector<double> out(alpha.begin(), alpha.end());
  if (alpha.empty()) return out;
  const double n = static_cast<double>(alpha.size());
  const double mean = std::accumulate(alpha.begin(), alpha.end(), 0.0) / n;
  double var = 0.0;
  for (double v : alpha) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  if (sd < 1e-12) return out;
  for (auto& v : out) v /= sd;
  return out;
}

std::vector<double> attention_weights(std::span<const double> alpha, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("attention temperature must be positive");
  std::vector<double> scaled(alpha.size());
  for (std::size_t k = 0; k < alpha.size(); ++k) scaled[k] = alpha[k] / temperature;
  return softmax(scaled);
}

Var attention_weights(Var alpha, double temperature) {
  auto a = attention_weights(alpha.value().data(), temperature);
  const auto id = alpha.id();
  return alpha.tape().record(
      Tensor::vector(a), {id}, [id, temperature](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& av = t.value(self);
        double dot = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) dot += g[k] * av[k];
        auto& ga = t.grad(id);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += av[k] * (g[k] - dot) / temperature;
      });
}

Tensor mix_quantized(const Tensor& rows, std::span<const double> a) {
  if (rows.rank() != 2 || rows.dim(0) != a.size())
    throw DimensionError("mix_quantized: " + shape_str(rows.shape()) + " rows against " +
                         std::to_string(a.size()) + " attention weights");
  const std::size_t k = rows.dim(0), m = rows.dim(1);
  Tensor q({m});
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < m; ++j) q[j] += a[r] * rows[r * m + j];
  return q;
}

Var mix_quantized(Var a, std::span<const Var> rows) {
  const auto& av = a.value();
  if (av.rank() != 1 || rows.size() != av.size() || rows.empty())
    throw DimensionError("mix_quantized: " + std::to_string(rows.size()) + " rows against " +
                         shape_str(av.shape()) + " attention weights");
  const Shape shape = rows[0].shape();
  std::vector<std::size_t> inputs{a.id()};
  for (const auto& row : rows) {
    if (row.shape() != shape)
      throw DimensionError("mix_quantized: row shapes " + shape_str(shape) + " and " +
                           shape_str(row.shape()) + " differ");
    if (&row.tape() != &a.tape()) throw ValidationError("mix_quantized: rows on another tape");
    inputs.push_back(row.id());
  }
  Tensor q(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& rv = rows[r].value();
    for (std::size_t j = 0; j < q.size(); ++j) q[j] += av[r] * rv[j];
  }
  return a.tape().record(std::move(q), inputs, [inputs](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto ia = inputs[0];
    const auto& av = t.value(ia);
    for (std::size_t r = 0; r + 1 < inputs.size(); ++r) {
      const auto ir = inputs[r + 1];
      if (t.requires_grad(ia)) {
        const auto& rv = t.value(ir);
        double s = 0.0;
        for (std::size_t j = 0; j < g.size(); ++j) s += g[j] * rv[j];
        t.grad(ia)[r] += s;
      }
      if (t.requires_grad(ir)) {
        auto& gr = t.grad(ir);
        for (std::size_t j = 0; j < g.size(); ++j) gr[j] += g[j] * av[r];
      }
    }
  });
}

double regularizer(std::span<const double> a, std::span<const double> penalties, double lambda,
                   std::size_t total_weights) {
  if (a.size() != penalties.size())
    throw DimensionError("regularizer: " + std::to_string(a.size()) + " attention weights vs " +
                         std::to_string(penalties.size()) + " penalties");
  if (total_weights < 1) throw ValidationError("regularizer: network size must be positive");
  double dot = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) dot += penalties[k] * a[k];
  return lambda * dot / static_cast<double>(total_weights);
}

Var regularizer(Var a, std::span<const double> penalties, double lambda, std::size_t total_weights) {
  const double r = regularizer(a.value().data(), penalties, lambda, total_weights);
  std::vector<double> coeff(penalties.size());
  for (std::size_t k = 0; k < coeff.size(); ++k)
    coeff[k] = lambda * penalties[k] / static_cast<double>(total_weights);
  const auto id = a.id();
  return a.tape().record(Tensor({1}, {r}), {id}, [id, coeff](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    auto& ga = t.grad(id);
    for (std::size_t k = 0; k < coeff.size(); ++k) ga[k] += g * coeff[k];
  });
}

AttentionState AttentionState::make(std::vector<int> bits, std::vector<double> penalties,
                                    double lambda, std::size_t total_weights) {
  AttentionState s;
  s.alpha = Tensor::vector(init_alpha(bits));
  s.penalties = penalties.empty() ? default_penalties(bits.size()) : std::move(penalties);
  s.lambda = lambda;
  s.total_weights = total_weights;
  s.bits = std::move(bits);
  s.validate();
  return s;
}

void AttentionState::validate() const {
  const std::size_t k = bits.size();
  if (k == 0) throw ValidationError("attention over zero quantizers");
  if (alpha.size() != k || penalties.size() != k)
    throw DimensionError("attention state: " + std::to_string(k) + " quantizers, " +
                         std::to_string(alpha.size()) + " logits, " +
                         std::to_string(penalties.size()) + " penalties");
  for (std::size_t i = 1; i < k; ++i)
    if (bits[i] <= bits[i - 1])
      throw ValidationError("attention state: bitwidths must be strictly increasing");
  for (double g : penalties)
    if (g < 0.0) throw ValidationError("attention state: penalties must be non-negative");
  if (lambda < 0.0) throw ValidationError("attention state: lambda must be non-negative");
  if (total_weights < 1) throw ValidationError("attention state: network size must be positive");
}

DqaForward dqa_layer_forward(Var x, Var w, std::span<const QuantizerSpec> specs,
                             AttentionState& state, double temperature,
                             const std::function<Var(Var input, Var mixed)>& transfer,
                             bool training, std::span<const double> frozen_attention,
                             int sawb_grid) {
  Tape& tape = x.tape();
  if (specs.size() != state.size())
    throw DimensionError("dqa layer: " + std::to_string(specs.size()) + " quantizers but " +
                         std::to_string(state.size()) + " attention entries");
  for (std::size_t k = 0; k < specs.size(); ++k)
    if (specs[k].bits != state.bits[k])
      throw ValidationError("dqa layer: quantizer bitwidths disagree with attention state");

  const auto normalized = normalize_alpha(state.alpha.data());
  Var a;
  if (!frozen_attention.empty()) {
    if (frozen_attention.size() != specs.size())
      throw DimensionError("dqa layer: frozen attention has wrong length");
    a = tape.constant(Tensor::vector(std::vector<double>(frozen_attention.begin(),
                                                         frozen_attention.end())));
  } else if (training) {
    std::copy(normalized.begin(), normalized.end(), state.alpha.data().begin());
    a = attention_weights(tape.parameter(state.alpha), temperature);
  } else {
    a = attention_weights(tape.constant(Tensor::vector(normalized)), temperature);
  }

  DqaForward out;
  out.attention = a.value().values();
  std::vector<Var> rows;
  rows.reserve(specs.size());
  for (const auto& spec : specs) {
    auto qr = quantize(w.value(), spec, sawb_grid);
    rows.push_back(ste(w, qr.values, qr.pass_mask));
    out.quantized.push_back(std::move(qr));
  }
  Var mixed = mix_quantized(a, rows);
  out.output = transfer(x, mixed);
  out.reg = regularizer(a, state.penalties, state.lambda, state.total_weights);
  return out;
}

}  // namespace dqa
