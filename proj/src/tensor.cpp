// SPDX-License-Identifier: Apache-2.0

#include "dqa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dqa/error.hpp"

namespace dqa {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
  if (shape_numel(shape_) != data_.size())
    throw DimensionError("shape " + shape_str(shape_) + " does not hold " +
                         std::to_string(data_.size()) + " elements");
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::span<double> Tensor::grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0);
  return *grad_;
}

std::span<const double> Tensor::grad() const {
  if (!grad_) return {};
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size())
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

const Tensor& Var::value() const { return tape_->value(id_); }

std::span<const double> Var::grad() const { return tape_->grad_view(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, true, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor& param) {
  nodes_.push_back(Node{Tensor(param.shape(), param.values()), {}, {}, {}, true, &param});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardRule rule) {
  bool needs = false;
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw ValidationError("op input recorded after its output");
    needs = needs || nodes_[id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, std::move(inputs), needs ? std::move(rule) : BackwardRule{},
                        needs, nullptr});
  return Var(this, nodes_.size() - 1);
}

std::vector<double>& Tape::grad(std::size_t id) { return nodes_.at(id).grad; }

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ValidationError("loss lives on another tape");
  if (loss.value().size() != 1)
    throw ValidationError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  for (auto& n : nodes_) {
    if (n.requires_grad)
      n.grad.assign(n.value.size(), 0.0);
    else
      n.grad.clear();
  }
  rules_executed_ = 0;
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    if (nodes_[i].rule) {
      nodes_[i].rule(*this, i);
      ++rules_executed_;
    }
  }
  for (auto& n : nodes_) {
    if (!n.bound) continue;
    auto g = n.bound->grad();
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
  }
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ValidationError("operands live on different tapes");
  return a.tape();
}

void check_equal_or_scalar(Var a, Var b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb || a.value().size() == 1 || b.value().size() == 1) return;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(sa) + " and " +
                       shape_str(sb));
}

// Broadcast helper: element i of an operand that may be a single element.
inline double pick(const Tensor& t, std::size_t i) { return t.size() == 1 ? t[0] : t[i]; }

Shape broadcast_shape(Var a, Var b) {
  return a.value().size() >= b.value().size() ? a.shape() : b.shape();
}

// Adds g[i] (or their sum, for a broadcast scalar operand) into input's grad.
void accumulate_broadcast(Tape& tape, std::size_t input, std::span<const double> g, double sign) {
  if (!tape.requires_grad(input)) return;
  auto& gi = tape.grad(input);
  if (gi.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += sign * g[i];
  } else {
    double s = 0.0;
    for (double v : g) s += v;
    gi[0] += sign * s;
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw DimensionError("matmul: shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()) +
                         " do not agree");
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
    }
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& Av = t.value(ia);
    const auto& Bv = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * Bv[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = Av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  check_equal_or_scalar(a, b, "add");
  Tensor out(broadcast_shape(a, b));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pick(a.value(), i) + pick(b.value(), i);
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    accumulate_broadcast(t, ia, g, 1.0);
    accumulate_broadcast(t, ib, g, 1.0);
  });
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  check_equal_or_scalar(a, b, "sub");
  Tensor out(broadcast_shape(a, b));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pick(a.value(), i) - pick(b.value(), i);
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    accumulate_broadcast(t, ia, g, 1.0);
    accumulate_broadcast(t, ib, g, -1.0);
  });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  check_equal_or_scalar(a, b, "mul");
  Tensor out(broadcast_shape(a, b));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pick(a.value(), i) * pick(b.value(), i);
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    std::vector<double> tmp(g.size());
    if (t.requires_grad(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * pick(bv, i);
      accumulate_broadcast(t, ia, tmp, 1.0);
    }
    if (t.requires_grad(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * pick(av, i);
      accumulate_broadcast(t, ib, tmp, 1.0);
    }
  });
}

Var relu(Var x) {
  const auto& X = x.value();
  Tensor out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] > 0.0 || std::isnan(X[i]) ? X[i] : 0.0;
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(ix);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

Var scale(Var x, double factor) {
  const auto& X = x.value();
  Tensor out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] * factor;
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, factor](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
}

Var add_bias(Var x, Var b) {
  Tape& tape = same_tape(x, b);
  const auto& X = x.value();
  const auto& B = b.value();
  if ((X.rank() != 2 && X.rank() != 4) || B.rank() != 1 || X.dim(1) != B.dim(0))
    throw DimensionError("add_bias: input " + shape_str(X.shape()) + " and bias " +
                         shape_str(B.shape()) + " do not agree");
  const std::size_t n = X.dim(0), c = X.dim(1), inner = X.size() / (n * c);
  Tensor out = X;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t s = 0; s < inner; ++s) out[(i * c + ch) * inner + s] += B[ch];
  const auto ix = x.id(), ib = b.id();
  return tape.record(std::move(out), {ix, ib}, [ix, ib, n, c, inner](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ix)) {
      auto& gx = t.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t s = 0; s < inner; ++s) gb[ch] += g[(i * c + ch) * inner + s];
    }
  });
}

Var sum(Var x) {
  const auto& X = x.value();
  double s = 0.0;
  for (double v : X.data()) s += v;
  const auto ix = x.id();
  return x.tape().record(Tensor({1}, {s}), {ix}, [ix](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (auto& gx : t.grad(ix)) gx += g;
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var conv2d(Var x, Var w) {
  Tape& tape = same_tape(x, w);
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.rank() != 4 || W.rank() != 4 || X.dim(1) != W.dim(1) || W.dim(2) != W.dim(3) ||
      W.dim(2) > X.dim(2) || W.dim(3) > X.dim(3))
    throw DimensionError("conv2d: input " + shape_str(X.shape()) + " and kernel " +
                         shape_str(W.shape()) + " do not agree");
  const std::size_t n = X.dim(0), c = X.dim(1), h = X.dim(2), wd = X.dim(3);
  const std::size_t o = W.dim(0), k = W.dim(2);
  const std::size_t oh = h - k + 1, ow = wd - k + 1;
  Tensor out({n, o, oh, ow});
  auto xi = [=](std::size_t b, std::size_t ch, std::size_t r, std::size_t col) {
    return ((b * c + ch) * h + r) * wd + col;
  };
  auto wi = [=](std::size_t oc, std::size_t ch, std::size_t r, std::size_t col) {
    return ((oc * c + ch) * k + r) * k + col;
  };
  auto yi = [=](std::size_t b, std::size_t oc, std::size_t r, std::size_t col) {
    return ((b * o + oc) * oh + r) * ow + col;
  };
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t col = 0; col < ow; ++col) {
          double s = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t dr = 0; dr < k; ++dr)
              for (std::size_t dc = 0; dc < k; ++dc)
                s += X[xi(b, ch, r + dr, col + dc)] * W[wi(oc, ch, dr, dc)];
          out[yi(b, oc, r, col)] = s;
        }
  const auto ix = x.id(), iw = w.id();
  return tape.record(std::move(out), {ix, iw},
                     [=](Tape& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       const auto& Xv = t.value(ix);
                       const auto& Wv = t.value(iw);
                       double* gx = t.requires_grad(ix) ? t.grad(ix).data() : nullptr;
                       double* gw = t.requires_grad(iw) ? t.grad(iw).data() : nullptr;
                       for (std::size_t b = 0; b < n; ++b)
                         for (std::size_t oc = 0; oc < o; ++oc)
                           for (std::size_t r = 0; r < oh; ++r)
                             for (std::size_t col = 0; col < ow; ++col) {
                               const double gv = g[yi(b, oc, r, col)];
                               for (std::size_t ch = 0; ch < c; ++ch)
                                 for (std::size_t dr = 0; dr < k; ++dr)
                                   for (std::size_t dc = 0; dc < k; ++dc) {
                                     if (gx) gx[xi(b, ch, r + dr, col + dc)] += gv * Wv[wi(oc, ch, dr, dc)];
                                     if (gw) gw[wi(oc, ch, dr, dc)] += gv * Xv[xi(b, ch, r + dr, col + dc)];
                                   }
                             }
                     });
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (auto& v : out) v /= z;
  return out;
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const auto& L = logits.value();
  if (L.rank() != 2) throw DimensionError("softmax_cross_entropy: logits must be [B×C], got " +
                                          shape_str(L.shape()));
  const std::size_t b = L.dim(0), c = L.dim(1);
  if (labels.size() != b)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(b));
  Tensor probs({b, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c)
      throw ValidationError("label " + std::to_string(labels[i]) + " out of range [0, " +
                            std::to_string(c) + ")");
    const auto row = L.data().subspan(i * c, c);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = std::log(z) + mx;
    loss += log_z - row[labels[i]];
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - log_z);
  }
  loss /= static_cast<double>(b);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const auto il = logits.id();
  return logits.tape().record(
      Tensor({1}, {loss}), {il},
      [il, probs = std::move(probs), lab = std::move(lab), b, c](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0] / static_cast<double>(b);
        auto& gl = t.grad(il);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gl[i * c + j] += g * (probs[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
      });
}

Var ste(Var w, Tensor forward_value, Tensor pass_mask) {
  if (forward_value.shape() != w.shape() || pass_mask.shape() != w.shape())
    throw DimensionError("ste: weights " + shape_str(w.shape()) + ", forward value " +
                         shape_str(forward_value.shape()) + ", mask " +
                         shape_str(pass_mask.shape()) + " must agree");
  for (double m : pass_mask.data())
    if (m != 0.0 && m != 1.0) throw ValidationError("ste: pass mask entries must be 0 or 1");
  const auto iw = w.id();
  return w.tape().record(std::move(forward_value), {iw},
                         [iw, mask = std::move(pass_mask)](Tape& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto& gw = t.grad(iw);
                           for (std::size_t i = 0; i < g.size(); ++i) gw[i] += g[i] * mask[i];
                         });
}

}  // namespace dqa
