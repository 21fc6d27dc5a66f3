// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors and a minimal reverse-mode tape.
//
// A Tape is built fresh for every forward pass. Parameters owned by the caller
// are bound with Tape::parameter(); Tape::backward() accumulates into their
// grad slots. Quantization nodes enter the graph through ste(), which forwards
// a precomputed value and routes the upstream gradient through a 0/1 mask.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dqa {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  /// 1-D tensor from a list of values.
  static Tensor vector(std::initializer_list<double> values);
  static Tensor vector(std::vector<double> values);
  /// 2-D tensor from nested rows; all rows must have the same length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }

  bool has_grad() const noexcept { return grad_.has_value(); }
  /// Gradient slot; allocated (zeroed) on first access.
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad() noexcept { grad_.reset(); }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;

  std::size_t id() const noexcept { return id_; }
  Tape& tape() const { return *tape_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  /// Gradient of the last backward() wrt this node (empty before backward).
  std::span<const double> grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardRule = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Value with no gradient.
  Var constant(Tensor value);
  /// Leaf that receives a gradient on this tape only.
  Var leaf(Tensor value);
  /// Leaf bound to caller storage: backward() adds into param.grad().
  /// The parameter must outlive the backward call.
  Var parameter(Tensor& param);

  /// Records an op. The rule reads node(self).grad and adds into input grads.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardRule rule);

  /// Reverse sweep from a scalar node, seed gradient 1.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Backward rules executed by the most recent backward().
  std::size_t rules_executed() const noexcept { return rules_executed_; }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::vector<double>& grad(std::size_t id);
  std::span<const double> grad_view(std::size_t id) const { return nodes_.at(id).grad; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardRule rule;
    bool requires_grad = false;
    Tensor* bound = nullptr;
  };

  std::deque<Node> nodes_;  // stable references across push_back
  std::size_t rules_executed_ = 0;
};

// Differentiable ops. Operands must live on the same tape.

/// [M×K]·[K×N] -> [M×N].
Var matmul(Var a, Var b);
/// Elementwise with equal shapes, or one side a single-element tensor.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var relu(Var x);
Var scale(Var x, double factor);
/// Adds a per-channel bias: x is [N×C] or [N×C×H×W], b is [C].
Var add_bias(Var x, Var b);
Var sum(Var x);
Var reshape(Var x, Shape shape);
/// Valid (no padding, stride 1) convolution: x [N×C×H×W], w [O×C×k×k].
Var conv2d(Var x, Var w);
/// Mean over the batch of -log softmax(logits)[label].
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);
/// Forwards `forward_value`; backward passes upstream * pass_mask to w.
Var ste(Var w, Tensor forward_value, Tensor pass_mask);

/// Numerically stable softmax of a flat vector.
std::vector<double> softmax(std::span<const double> logits);

}  // namespace dqa
