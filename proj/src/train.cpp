// SPDX-License-Identifier: Apache-2.0

#include "dqa/train.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "dqa/binary_relax.hpp"
#include "dqa/error.hpp"
#include "dqa/random.hpp"

namespace dqa {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5f5f0001;

}  // namespace

std::string to_string(Method method) {
  switch (method) {
    case Method::FullPrecision: return "fp";
    case Method::Fixed: return "fixed";
    case Method::Dqa: return "dqa";
    case Method::BinaryRelax: return "br";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  if (name == "fp") return Method::FullPrecision;
  if (name == "fixed") return Method::Fixed;
  if (name == "dqa") return Method::Dqa;
  if (name == "br") return Method::BinaryRelax;
  throw ValidationError("unknown method '" + name + "' (expected fp, fixed, dqa or br)");
}

double LrSchedule::at(int epoch) const {
  return initial * std::pow(drop, static_cast<double>(epoch / period));
}

void TrainPlan::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be positive");
  if (batch_size < 1) throw ValidationError("batch size must be positive");
  if (!(lr.initial > 0.0)) throw ValidationError("learning rate must be positive");
  if (!(lr.drop > 0.0)) throw ValidationError("learning-rate drop factor must be positive");
  if (lr.period < 1) throw ValidationError("learning-rate drop period must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must be in [0, 1)");
  if (lambda < 0.0) throw ValidationError("lambda must be non-negative");
  if (log_every < 1) throw ValidationError("log interval must be positive");
  derive_decay(t_initial, t_final, 1);
}

std::uint64_t TrainPlan::batches_per_epoch(std::size_t dataset_size) const {
  const auto bs = static_cast<std::uint64_t>(batch_size);
  return (dataset_size + bs - 1) / bs;
}

std::uint64_t TrainPlan::total_batches(std::size_t dataset_size) const {
  return static_cast<std::uint64_t>(epochs) * batches_per_epoch(dataset_size);
}

void assign_modes(Network& net, Method method, const std::vector<QuantizerSpec>& quantizers,
                  const std::vector<double>& penalties, double lambda,
                  const std::vector<bool>& exempt) {
  if (method != Method::FullPrecision && quantizers.empty())
    throw ValidationError(to_string(method) + " needs at least one quantizer");
  if (method == Method::BinaryRelax && quantizers.size() < 2)
    throw ValidationError("br needs at least two quantizers");
  std::vector<int> bits;
  for (const auto& q : quantizers) bits.push_back(q.bits);
  const std::size_t s = net.total_weights();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    auto& layer = net.layers[i];
    if (i < exempt.size() && exempt[i]) {
      layer.mode = FullPrecision{};
      continue;
    }
    switch (method) {
      case Method::FullPrecision: layer.mode = FullPrecision{}; break;
      case Method::Fixed: layer.mode = FixedQuantizer{quantizers.front()}; break;
      case Method::Dqa:
        layer.mode = DqaMixture{quantizers, AttentionState::make(bits, penalties, lambda, s), {}};
        break;
      case Method::BinaryRelax: layer.mode = BinaryRelax{quantizers, 1.0}; break;
    }
  }
}

EvalResult evaluate(const Network& net, const Dataset& data) {
  if (data.size() == 0) throw ValidationError("evaluate: empty dataset");
  data.validate();
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  double loss = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t end = std::min(data.size(), start + kChunk);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    const Tensor logits = net.predict(data.batch(idx));
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto row = logits.data().subspan(i * c, c);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      const std::size_t label = data.labels[idx[i]];
      if (best == label) ++correct;
      const double mx = row[best];
      double z = 0.0;
      for (double v : row) z += std::exp(v - mx);
      loss += std::log(z) + mx - row[label];
    }
  }
  const double n = static_cast<double>(data.size());
  return {static_cast<double>(correct) / n, loss / n};
}

namespace {

std::optional<double> current_omega(const Network& net) {
  for (const auto& l : net.layers)
    if (const auto* br = std::get_if<BinaryRelax>(&l.mode)) return br->omega;
  return std::nullopt;
}

std::vector<CalibrationRecord> snapshot_calibrations(const Network& net, int epoch) {
  std::vector<CalibrationRecord> out;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    std::vector<QuantizerSpec> specs;
    std::vector<double> weights;
    if (const auto* f = std::get_if<FixedQuantizer>(&l.mode)) {
      specs = {f->spec};
      weights = {1.0};
    } else if (const auto* d = std::get_if<DqaMixture>(&l.mode)) {
      specs = d->specs;
      weights = d->frozen_attention.empty()
                    ? attention_weights(normalize_alpha(d->attention.alpha.data()), net.temperature)
                    : d->frozen_attention;
    } else if (const auto* br = std::get_if<BinaryRelax>(&l.mode)) {
      specs = br->specs;
      weights = br_weights(specs.size(), br->omega);
    }
    const auto [lo, hi] = std::minmax_element(l.weights.data().begin(), l.weights.data().end());
    for (std::size_t k = 0; k < specs.size(); ++k) {
      CalibrationRecord r;
      r.epoch = epoch;
      r.layer = i;
      r.index = k;
      r.spec = specs[k];
      r.spec.calibration = quantize(l.weights, specs[k], net.sawb_grid).calibration;
      r.weight = weights[k];
      r.w_min = *lo;
      r.w_max = *hi;
      out.push_back(r);
    }
  }
  return out;
}

}  // namespace

TrainResult train(Network& net, const DatasetSplit& data, const TrainPlan& plan,
                  const TrainProgress* resume, const TrainOptions& options) {
  plan.validate();
  data.train.validate();
  const std::size_t n = data.train.size();
  const std::uint64_t per_epoch = plan.batches_per_epoch(n);
  const auto schedule = TemperatureSchedule::make(plan.t_initial, plan.t_final, plan.total_batches(n));

  TrainResult result;
  result.progress = resume ? *resume : TrainProgress{0, 0, SgdState{plan.lr.at(0), plan.momentum, {}}};
  auto& progress = result.progress;
  auto params = net.parameters();
  const auto bs = static_cast<std::size_t>(plan.batch_size);
  bool warned_overrun = false;

  for (int epoch = progress.epochs_done; epoch < plan.epochs; ++epoch) {
    if (options.stop_after_epoch && epoch >= *options.stop_after_epoch) break;
    progress.sgd.lr = plan.lr.at(epoch);
    progress.sgd.momentum = plan.momentum;
    Rng shuffle(stream_seed(plan.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
    const auto perm = shuffle.permutation(n);
    std::size_t seen = 0, correct = 0;

    for (std::uint64_t bi = 0; bi < per_epoch; ++bi) {
      const std::uint64_t b = ++progress.batches_done;
      bool overran = false;
      net.temperature = schedule.at(b, &overran);
      if (overran && !warned_overrun) {
        std::cerr << "warning: training past the scheduled " << schedule.total_batches
                  << " batches; temperature held at " << schedule.t_final << '\n';
        warned_overrun = true;
      }
      const std::size_t start = static_cast<std::size_t>(bi) * bs;
      const std::size_t end = std::min(n, start + bs);
      const std::span<const std::size_t> idx(perm.data() + start, end - start);
      const auto labels = data.train.batch_labels(idx);

      Tape tape;
      auto fwd = net.forward(tape, data.train.batch(idx), true);
      Var task = softmax_cross_entropy(fwd.logits, labels);
      Var total = add(task, fwd.reg);

      MetricsRecord rec;
      rec.epoch = epoch;
      rec.batch = b;
      rec.task_loss = task.value()[0];
      rec.reg = fwd.reg.value()[0];
      rec.loss = total.value()[0];
      rec.temperature = net.temperature;
      rec.lr = progress.sgd.lr;
      rec.omega = current_omega(net);
      for (const auto& lf : fwd.layers) {
        rec.attention.push_back(lf.attention);
        rec.argmax.push_back(lf.attention.empty()
                                 ? 0
                                 : static_cast<int>(std::max_element(lf.attention.begin(),
                                                                     lf.attention.end()) -
                                                    lf.attention.begin()) + 1);
      }
      if (!std::isfinite(rec.loss)) {
        progress.batches_done -= 1;
        throw NanLossError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(b) + " (T = " + std::to_string(rec.temperature) +
                               ", lr = " + std::to_string(rec.lr) + ")",
                           rec);
      }

      const auto& logits = fwd.logits.value();
      const std::size_t c = logits.dim(1);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto row = logits.data().subspan(i * c, c);
        if (static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) ==
            labels[i])
          ++correct;
      }
      seen += labels.size();

      net.zero_grad();
      tape.backward(total);
      sgd_step(params, progress.sgd);

      if (b % static_cast<std::uint64_t>(plan.log_every) == 0 || bi + 1 == per_epoch) {
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        rec.val_acc = data.val.size() ? evaluate(net, data.val).accuracy : 0.0;
        result.metrics.push_back(std::move(rec));
      }
    }

    auto cal = snapshot_calibrations(net, epoch);
    result.calibrations.insert(result.calibrations.end(), cal.begin(), cal.end());
    for (auto& l : net.layers)
      if (auto* br = std::get_if<BinaryRelax>(&l.mode)) br->omega = br_omega_update(br->omega);
    progress.epochs_done = epoch + 1;
    if (options.on_epoch_end) options.on_epoch_end(net, result);
  }
  return result;
}

}  // namespace dqa
