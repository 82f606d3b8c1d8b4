#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every primitive applied to at least one recorded tensor.
// Tensors that were never watched by a tape are constants: primitives on
// constants compute values without recording anything.

#include <array>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace grouppose::ad {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tape;

class Tensor {
 public:
  Tensor() : Tensor(Shape{0}, {}) {}
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_->size(); }
  std::span<const double> data() const { return *data_; }
  std::vector<double> to_vector() const { return *data_; }

  double operator[](std::size_t i) const { return (*data_)[i]; }
  /// Row-major element access for rank-2 tensors.
  double at(std::size_t row, std::size_t col) const { return (*data_)[row * shape_.back() + col]; }
  /// Value of a single-element tensor.
  double item() const;

  bool recorded() const { return tape_ != nullptr; }
  NodeId node() const { return node_; }
  const Tape* tape() const { return tape_; }

  /// Same values, detached from any tape.
  Tensor detached() const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  NodeId node_ = kNoNode;
};

enum class Primitive {
  add,
  subtract,
  multiply,
  scale,
  matmul,
  relu,
  exp,
  log,
  softmax,
  concat,
  slice,
  sum,
  mean,
  abs,
  batch_norm_train,
  batch_norm_eval,
  broadcast,
  reshape,
};

inline constexpr std::array kAllPrimitives = {
    Primitive::add,     Primitive::subtract,         Primitive::multiply,
    Primitive::scale,   Primitive::matmul,           Primitive::relu,
    Primitive::exp,     Primitive::log,              Primitive::softmax,
    Primitive::concat,  Primitive::slice,            Primitive::sum,
    Primitive::mean,    Primitive::abs,              Primitive::batch_norm_train,
    Primitive::batch_norm_eval, Primitive::broadcast, Primitive::reshape,
};

std::string_view to_string(Primitive kind);

/// Read-only view of the gradients produced by Tape::backward.
class Gradients {
 public:
  /// Gradient with respect to a recorded tensor; zeros when the tensor did
  /// not influence the output.
  Tensor of(const Tensor& t) const;
  std::span<const double> raw(NodeId node) const;
  bool has(NodeId node) const { return node < grads_.size() && !grads_[node].empty(); }

 private:
  friend class Tape;
  std::vector<Shape> shapes_;
  std::vector<std::vector<double>> grads_;
};

/// The computation record. Not thread-safe; one tape per thread.
class Tape {
 public:
  /// Receives the output gradient and one accumulation buffer per input
  /// (nullptr for constant inputs). Buffers are pre-sized and must be
  /// added to, never overwritten.
  using BackwardFn =
      std::function<void(std::span<const double> grad_out, std::span<std::vector<double>* const> grad_in)>;

  struct Entry {
    Primitive kind;
    std::vector<NodeId> inputs;  // kNoNode marks a constant input
    NodeId output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a leaf (e.g. a parameter) so that gradients are tracked for it.
  Tensor watch(const Tensor& value);

  /// Gradients of a scalar output with respect to every recorded node.
  Gradients backward(const Tensor& output) const;

  std::size_t node_count() const { return shapes_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  /// Forward value of a node (shares storage with the recorded tensor).
  const Tensor& value(NodeId node) const { return values_.at(node); }

  /// Records one primitive application. Returns `value` attached to a new
  /// node if any input is recorded on a tape, else `value` unchanged.
  static Tensor record(Primitive kind, std::span<const Tensor> inputs, Tensor value, BackwardFn backward);

 private:
  NodeId new_node(const Tensor& value);

  std::vector<Shape> shapes_;
  std::vector<Tensor> values_;
  std::vector<Entry> entries_;
};

// ---- primitives -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softmax(const Tensor& a);  // over the last axis
Tensor concat(std::span<const Tensor> parts);  // along the last axis
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);  // last axis, [begin, end)
Tensor sum(const Tensor& a);  // all elements, scalar result
Tensor sum_last(const Tensor& a);  // reduces the last axis
Tensor mean(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, const Shape& shape);

inline constexpr double kBatchNormEpsilon = 1e-5;

struct BatchNormTrainResult {
  Tensor output;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased (divides by batch size)
};

/// Normalizes each column of a B x C input with batch statistics, then applies
/// gamma * x_hat + beta.
BatchNormTrainResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                      double eps = kBatchNormEpsilon);

/// Same affine map with fixed (constant) statistics.
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> running_mean, std::span<const double> running_var,
                       double eps = kBatchNormEpsilon);

/// Extra arguments for the non-tensor parameters of some primitives.
struct PrimitiveAttrs {
  double factor = 1.0;         // scale
  std::size_t begin = 0;       // slice
  std::size_t end = 0;         // slice
  bool last_axis = false;      // sum
  Shape shape;                 // broadcast, reshape
  double eps = kBatchNormEpsilon;  // batch norm
};

/// Generic dispatcher over the primitive set. Batch-norm-eval takes
/// (x, gamma, beta, running_mean, running_var); the statistics are treated as
/// constants.
Tensor apply_primitive(Primitive kind, std::span<const Tensor> inputs, const PrimitiveAttrs& attrs = {});

// ---- parameters -----------------------------------------------------------

enum class ParamGroup { selector, fusion, backbone };

std::string_view to_string(ParamGroup group);
ParamGroup param_group_from_string(std::string_view name);

/// A trainable tensor with its gradient accumulator.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, ParamGroup group, Tensor value);

  const std::string& name() const { return name_; }
  ParamGroup group() const { return group_; }
  const Tensor& value() const { return value_; }
  const Shape& shape() const { return value_.shape(); }
  std::span<const double> grad() const { return grad_; }

  /// Replaces the value; the shape must not change.
  void set_value(std::vector<double> data);

  /// Tensor used in a forward pass. With a tape the parameter is watched and
  /// the binding remembered for accumulate_grad; without one the value is
  /// used as a constant.
  Tensor bind(Tape* tape);

  void zero_grad();
  /// Adds the gradient of the last binding (no-op if it did not contribute).
  void accumulate_grad(const Gradients& grads);

 private:
  std::string name_;
  ParamGroup group_ = ParamGroup::backbone;
  Tensor value_;
  std::vector<double> grad_;
  Tensor bound_;
};

// ---- finite differences ---------------------------------------------------

/// Central-difference estimate (f(x + h e_i) - f(x - h e_i)) / (2h) of the
/// gradient of a scalar function. Throws NumericError if f is not finite at a
/// probe point.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& point,
                                  double h = 1e-5);

}  // namespace grouppose::ad
