// SPDX-License-Identifier: Apache-2.0

#include "dqa/qnn.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "dqa/binary_relax.hpp"
#include "dqa/error.hpp"

namespace dqa {

std::string mode_name(const WeightMode& mode) {
  struct {
    std::string operator()(const FullPrecision&) const { return "fp"; }
    std::string operator()(const FixedQuantizer&) const { return "fixed"; }
    std::string operator()(const DqaMixture&) const { return "dqa"; }
    std::string operator()(const BinaryRelax&) const { return "br"; }
  } visitor;
  return std::visit(visitor, mode);
}

namespace {

void glorot_fill(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.data()) v = rng.uniform(-limit, limit);
}

Var transfer(const QuantizedLayer& layer, Var x, Var q, Var b) {
  Var y;
  if (layer.kind == LayerKind::Dense) {
    if (x.value().rank() != 2 || x.shape()[1] != layer.in)
      throw DimensionError("dense layer expects [N×" + std::to_string(layer.in) + "] input, got " +
                           shape_str(x.shape()));
    y = matmul(x, q);
  } else {
    if (x.value().rank() != 4 || x.shape()[1] != layer.in)
      throw DimensionError("conv layer expects [N×" + std::to_string(layer.in) +
                           "×H×W] input, got " + shape_str(x.shape()));
    y = conv2d(x, q);
  }
  y = add_bias(y, b);
  return layer.activation == Activation::Relu ? relu(y) : y;
}

}  // namespace

QuantizedLayer QuantizedLayer::dense(std::size_t in, std::size_t out, Activation act, Rng& rng) {
  QuantizedLayer l;
  l.kind = LayerKind::Dense;
  l.in = in;
  l.out = out;
  l.activation = act;
  l.weights = Tensor({in, out});
  l.bias = Tensor({out});
  glorot_fill(l.weights, in, out, rng);
  return l;
}

QuantizedLayer QuantizedLayer::conv2d(std::size_t in_channels, std::size_t out_channels,
                                      std::size_t kernel, Activation act, Rng& rng) {
  QuantizedLayer l;
  l.kind = LayerKind::Conv2d;
  l.in = in_channels;
  l.out = out_channels;
  l.kernel = kernel;
  l.activation = act;
  l.weights = Tensor({out_channels, in_channels, kernel, kernel});
  l.bias = Tensor({out_channels});
  glorot_fill(l.weights, in_channels * kernel * kernel, out_channels * kernel * kernel, rng);
  return l;
}

LayerForward layer_forward(QuantizedLayer& layer, Var x, double temperature, bool training,
                           int sawb_grid) {
  Tape& tape = x.tape();
  Var w = training ? tape.parameter(layer.weights) : tape.constant(layer.weights);
  Var b = training ? tape.parameter(layer.bias) : tape.constant(layer.bias);
  LayerForward out;
  auto apply = [&](Var input, Var q) { return transfer(layer, input, q, b); };

  if (std::holds_alternative<FullPrecision>(layer.mode)) {
    out.output = apply(x, w);
  } else if (auto* fixed = std::get_if<FixedQuantizer>(&layer.mode)) {
    auto qr = quantize(layer.weights, fixed->spec, sawb_grid);
    Var q = ste(w, qr.values, qr.pass_mask);
    out.quantized.push_back(std::move(qr));
    out.output = apply(x, q);
  } else if (auto* dqa = std::get_if<DqaMixture>(&layer.mode)) {
    auto f = dqa_layer_forward(x, w, dqa->specs, dqa->attention, temperature, apply, training,
                               dqa->frozen_attention, sawb_grid);
    out.output = f.output;
    out.reg = f.reg;
    out.attention = std::move(f.attention);
    out.quantized = std::move(f.quantized);
  } else {
    auto& br = std::get<BinaryRelax>(layer.mode);
    std::vector<Var> rows;
    for (const auto& spec : br.specs) {
      auto qr = quantize(layer.weights, spec, sawb_grid);
      rows.push_back(ste(w, qr.values, qr.pass_mask));
      out.quantized.push_back(std::move(qr));
    }
    out.output = apply(x, br_mix(rows, br.omega));
  }
  return out;
}

std::size_t Network::total_weights() const {
  std::size_t s = 0;
  for (const auto& l : layers) s += l.weight_count();
  return s;
}

void Network::refresh_total_weights() {
  const std::size_t s = total_weights();
  for (auto& l : layers)
    if (auto* d = std::get_if<DqaMixture>(&l.mode)) d->attention.total_weights = s;
}

Network::Forward Network::forward(Tape& tape, const Tensor& batch, bool training) {
  Shape expected{batch.dim(0)};
  expected.insert(expected.end(), input_shape.begin(), input_shape.end());
  if (batch.shape() != expected)
    throw DimensionError("network expects input " + shape_str(expected) + ", got " +
                         shape_str(batch.shape()));
  Forward out;
  Var h = tape.constant(batch);
  Var reg = tape.constant(Tensor({1}));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::Dense && h.value().rank() > 2) {
      const std::size_t n = h.shape()[0];
      h = reshape(h, {n, h.value().size() / n});
    }
    auto lf = layer_forward(layers[i], h, temperature, training, sawb_grid);
    h = lf.output;
    if (lf.reg) reg = add(reg, *lf.reg);
    out.layers.push_back(std::move(lf));
  }
  if (h.value().rank() != 2 || h.shape()[1] != classes)
    throw DimensionError("network output " + shape_str(h.shape()) + " does not match " +
                         std::to_string(classes) + " classes");
  out.logits = h;
  out.reg = reg;
  return out;
}

Tensor Network::predict(const Tensor& batch) const {
  Tape tape;
  // training=false never writes to the layers.
  auto f = const_cast<Network*>(this)->forward(tape, batch, false);
  return f.logits.value();
}

std::vector<Tensor*> Network::parameters() {
  std::vector<Tensor*> ps;
  for (auto& l : layers) {
    ps.push_back(&l.weights);
    ps.push_back(&l.bias);
    if (auto* d = std::get_if<DqaMixture>(&l.mode)) ps.push_back(&d->attention.alpha);
  }
  return ps;
}

void Network::zero_grad() {
  for (auto* p : parameters()) {
    p->grad();
    p->zero_grad();
  }
}

void sgd_step(std::span<Tensor* const> params, SgdState& state) {
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (auto* p : params) state.velocity.emplace_back(p->shape());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& v = state.velocity[i];
    if (v.shape() != p.shape())
      throw DimensionError("sgd: velocity " + shape_str(v.shape()) + " vs parameter " +
                           shape_str(p.shape()));
    const auto g = p.grad();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = state.momentum * v[j] + g[j];
      p[j] -= state.lr * v[j];
    }
  }
}

Tensor HardLayer::decode_weights() const {
  if (!quantized) return Tensor(weight_shape, raw_weights);
  std::vector<double> w(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) w[i] = levels.at(codes[i]);
  return Tensor(weight_shape, std::move(w));
}

Network HardModel::to_network() const {
  Network net;
  net.input_shape = input_shape;
  net.classes = classes;
  for (const auto& h : layers) {
    QuantizedLayer l;
    l.kind = h.kind;
    l.in = h.in;
    l.out = h.out;
    l.kernel = h.kernel;
    l.activation = h.activation;
    l.weights = h.decode_weights();
    l.bias = h.bias;
    l.mode = FullPrecision{};
    net.layers.push_back(std::move(l));
  }
  return net;
}

std::vector<int> HardModel::bitwidths() const {
  std::vector<int> bits;
  for (const auto& l : layers) bits.push_back(l.quantized ? l.spec.bits : 0);
  return bits;
}

bool HardModel::operator==(const HardModel& o) const {
  if (input_shape != o.input_shape || classes != o.classes || layers.size() != o.layers.size())
    return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& a = layers[i];
    const auto& b = o.layers[i];
    if (a.kind != b.kind || a.in != b.in || a.out != b.out || a.kernel != b.kernel ||
        a.activation != b.activation || a.weight_shape != b.weight_shape ||
        a.quantized != b.quantized || a.levels != b.levels || a.codes != b.codes ||
        a.raw_weights != b.raw_weights || !(a.bias == b.bias))
      return false;
    if (a.quantized && !(a.spec == b.spec)) return false;
  }
  return true;
}

std::size_t selected_quantizer(const QuantizedLayer& layer, double temperature) {
  const auto* d = std::get_if<DqaMixture>(&layer.mode);
  if (!d) return 0;
  const auto a = d->frozen_attention.empty()
                     ? attention_weights(normalize_alpha(d->attention.alpha.data()), temperature)
                     : d->frozen_attention;
  return static_cast<std::size_t>(std::max_element(a.begin(), a.end()) - a.begin());
}

HardModel export_hard(const Network& net) {
  HardModel model;
  model.input_shape = net.input_shape;
  model.classes = net.classes;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    HardLayer h;
    h.kind = l.kind;
    h.in = l.in;
    h.out = l.out;
    h.kernel = l.kernel;
    h.activation = l.activation;
    h.weight_shape = l.weights.shape();
    h.bias = l.bias;

    std::optional<QuantizerSpec> spec;
    if (const auto* f = std::get_if<FixedQuantizer>(&l.mode)) {
      spec = f->spec;
    } else if (const auto* d = std::get_if<DqaMixture>(&l.mode)) {
      const std::size_t k = selected_quantizer(l, net.temperature);
      const auto a = d->frozen_attention.empty()
                         ? attention_weights(normalize_alpha(d->attention.alpha.data()),
                                             net.temperature)
                         : d->frozen_attention;
      if (a[k] < 0.9)
        model.warnings.push_back("layer " + std::to_string(i) + ": attention not converged (max a = " +
                                 std::to_string(a[k]) + "), exporting argmax anyway");
      spec = d->specs[k];
    } else if (const auto* br = std::get_if<BinaryRelax>(&l.mode)) {
      spec = br->specs.front();
    }

    if (!spec) {
      h.quantized = false;
      h.raw_weights = l.weights.values();
      model.warnings.push_back("layer " + std::to_string(i) +
                               ": full-precision layer exported unquantized");
    } else {
      const auto qr = quantize(l.weights, *spec, net.sawb_grid);
      h.quantized = true;
      h.spec = *spec;
      h.spec.calibration = qr.calibration;
      h.levels = qr.levels;
      h.codes.resize(qr.values.size());
      for (std::size_t j = 0; j < qr.values.size(); ++j) {
        const auto it = std::lower_bound(h.levels.begin(), h.levels.end(), qr.values[j]);
        if (it == h.levels.end() || *it != qr.values[j])
          throw ValidationError("export: quantized value is not a member of its level set");
        h.codes[j] = static_cast<std::uint32_t>(it - h.levels.begin());
      }
    }
    model.layers.push_back(std::move(h));
  }
  return model;
}

}  // namespace dqa
