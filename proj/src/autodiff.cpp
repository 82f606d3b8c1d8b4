#include "grouppose/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "grouppose/errors.hpp"

namespace grouppose::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

std::size_t last_dim(std::string_view op, const Tensor& a) {
  if (a.rank() == 0) {
    throw ShapeError(std::string(op) + ": requires rank >= 1, got a scalar");
  }
  return a.shape().back();
}

void check_finite(Primitive kind, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(to_string(kind)) + ": produced a non-finite value");
    }
  }
}

// Applies an elementwise unary function and its derivative (expressed in terms
// of the input x and output y).
template <typename F, typename DF>
Tensor unary(Primitive kind, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  Tensor value(a.shape(), std::move(out));
  const std::array inputs{a};
  return Tape::record(kind, inputs, value,
                      [a, value, df](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        if (gi[0] == nullptr) return;
                        auto& dst = *gi[0];
                        const auto x = a.data();
                        const auto y = value.data();
                        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * df(x[i], y[i]);
                      });
}

// Strides of `src` expressed in the index space of `target` (0 on broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& src, const Shape& target) {
  if (src.size() > target.size()) {
    throw ShapeError("broadcast: cannot broadcast " + shape_string(src) + " to lower rank " +
                     shape_string(target));
  }
  const std::size_t offset = target.size() - src.size();
  std::vector<std::size_t> strides(target.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = src.size(); i-- > 0;) {
    const std::size_t t = target[i + offset];
    if (src[i] == t) {
      strides[i + offset] = stride;
    } else if (src[i] != 1) {
      throw ShapeError("broadcast: cannot broadcast " + shape_string(src) + " to " + shape_string(target));
    }
    stride *= src[i];
  }
  return strides;
}

// Maps every flat index of `target` to the flat index of the broadcast source.
std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& target) {
  const auto strides = broadcast_strides(src, target);
  const std::size_t n = shape_size(target);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(target.size(), 0);
  std::size_t src_flat = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    index[flat] = src_flat;
    for (std::size_t axis = target.size(); axis-- > 0;) {
      ++counter[axis];
      src_flat += strides[axis];
      if (counter[axis] < target[axis]) break;
      src_flat -= strides[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  return index;
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::make_shared<const std::vector<double>>(std::move(data))) {
  if (shape_size(shape_) != data_->size()) {
    throw ShapeError("tensor: shape " + shape_string(shape_) + " holds " + std::to_string(shape_size(shape_)) +
                     " values, got " + std::to_string(data_->size()));
  }
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item: tensor of shape " + shape_string(shape_) + " is not a single value");
  }
  return (*data_)[0];
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = kNoNode;
  return t;
}

// ---- Tape -----------------------------------------------------------------

NodeId Tape::new_node(const Tensor& value) {
  shapes_.push_back(value.shape());
  values_.push_back(value.detached());
  return shapes_.size() - 1;
}

Tensor Tape::watch(const Tensor& value) {
  Tensor t = value.detached();
  t.tape_ = this;
  t.node_ = new_node(t);
  return t;
}

Tensor Tape::record(Primitive kind, std::span<const Tensor> inputs, Tensor value, BackwardFn backward) {
  check_finite(kind, value.data());
  Tape* tape = nullptr;
  for (const auto& in : inputs) {
    if (in.tape_ == nullptr) continue;
    if (tape != nullptr && tape != in.tape_) {
      throw ContractError(std::string(to_string(kind)) + ": inputs belong to different tapes");
    }
    tape = in.tape_;
  }
  if (tape == nullptr) return value;

  Entry entry{kind, {}, kNoNode, std::move(backward)};
  entry.inputs.reserve(inputs.size());
  for (const auto& in : inputs) entry.inputs.push_back(in.tape_ ? in.node_ : kNoNode);
  entry.output = tape->new_node(value);
  value.tape_ = tape;
  value.node_ = entry.output;
  tape->entries_.push_back(std::move(entry));
  return value;
}

Gradients Tape::backward(const Tensor& output) const {
  if (output.tape_ != this || output.node_ >= shapes_.size()) {
    throw ContractError("backward: output does not belong to this tape");
  }
  if (output.size() != 1) {
    throw ContractError("backward: output must be scalar, got shape " + shape_string(output.shape()));
  }
  Gradients grads;
  grads.shapes_ = shapes_;
  grads.grads_.resize(shapes_.size());
  grads.grads_[output.node_] = {1.0};

  std::vector<std::vector<double>*> buffers;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const auto& g = grads.grads_[it->output];
    if (g.empty()) continue;
    buffers.assign(it->inputs.size(), nullptr);
    for (std::size_t j = 0; j < it->inputs.size(); ++j) {
      const NodeId in = it->inputs[j];
      if (in == kNoNode) continue;
      auto& buf = grads.grads_[in];
      if (buf.empty()) buf.assign(shape_size(shapes_[in]), 0.0);
      buffers[j] = &buf;
    }
    it->backward(g, buffers);
  }
  return grads;
}

Tensor Gradients::of(const Tensor& t) const {
  if (t.node() < grads_.size() && !grads_[t.node()].empty()) {
    return Tensor(shapes_[t.node()], grads_[t.node()]);
  }
  return Tensor::zeros(t.shape());
}

std::span<const double> Gradients::raw(NodeId node) const {
  if (node >= grads_.size()) return {};
  return grads_[node];
}

// ---- primitives -----------------------------------------------------------

std::string_view to_string(Primitive kind) {
  switch (kind) {
    case Primitive::add: return "add";
    case Primitive::subtract: return "subtract";
    case Primitive::multiply: return "elementwise-multiply";
    case Primitive::scale: return "scalar-scale";
    case Primitive::matmul: return "matmul";
    case Primitive::relu: return "relu";
    case Primitive::exp: return "exp";
    case Primitive::log: return "log";
    case Primitive::softmax: return "softmax-over-last-axis";
    case Primitive::concat: return "concat-over-last-axis";
    case Primitive::slice: return "slice";
    case Primitive::sum: return "sum";
    case Primitive::mean: return "mean";
    case Primitive::abs: return "abs";
    case Primitive::batch_norm_train: return "batch-norm-train";
    case Primitive::batch_norm_eval: return "batch-norm-eval";
    case Primitive::broadcast: return "broadcast";
    case Primitive::reshape: return "reshape";
  }
  return "unknown";
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  const std::array inputs{a, b};
  return Tape::record(Primitive::add, inputs, Tensor(a.shape(), std::move(out)),
                      [](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        for (auto* dst : gi) {
                          if (dst == nullptr) continue;
                          for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += g[i];
                        }
                      });
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  require_same_shape("subtract", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  const std::array inputs{a, b};
  return Tape::record(Primitive::subtract, inputs, Tensor(a.shape(), std::move(out)),
                      [](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        if (gi[0])
                          for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                        if (gi[1])
                          for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
                      });
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  require_same_shape("multiply", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  const std::array inputs{a, b};
  return Tape::record(Primitive::multiply, inputs, Tensor(a.shape(), std::move(out)),
                      [a, b](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        if (gi[0])
                          for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * b[i];
                        if (gi[1])
                          for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * a[i];
                      });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  const std::array inputs{a};
  return Tape::record(Primitive::scale, inputs, Tensor(a.shape(), std::move(out)),
                      [factor](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        if (gi[0])
                          for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * factor;
                      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MatrixMap(out.data(), m, n).noalias() = ConstMatrixMap(a.data().data(), m, k) * ConstMatrixMap(b.data().data(), k, n);
  const std::array inputs{a, b};
  return Tape::record(
      Primitive::matmul, inputs, Tensor({a.dim(0), b.dim(1)}, std::move(out)),
      [a, b, m, k, n](std::span<const double> g, std::span<std::vector<double>* const> gi) {
        const ConstMatrixMap grad(g.data(), m, n);
        if (gi[0]) MatrixMap(gi[0]->data(), m, k).noalias() += grad * ConstMatrixMap(b.data().data(), k, n).transpose();
        if (gi[1]) MatrixMap(gi[1]->data(), k, n).noalias() += ConstMatrixMap(a.data().data(), m, k).transpose() * grad;
      });
}

Tensor relu(const Tensor& a) {
  return unary(
      Primitive::relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      Primitive::exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.data()) {
    if (!(x > 0.0)) throw DomainError("log: non-positive input " + std::to_string(x));
  }
  return unary(
      Primitive::log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      Primitive::abs, a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor softmax(const Tensor& a) {
  const std::size_t width = last_dim("softmax", a);
  if (width == 0) throw ShapeError("softmax: last axis is empty");
  const std::size_t rows = a.size() / width;
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * width;
    double* yr = out.data() + r * width;
    const double peak = *std::max_element(xr, xr + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      yr[j] = std::exp(xr[j] - peak);
      total += yr[j];
    }
    for (std::size_t j = 0; j < width; ++j) yr[j] /= total;
  }
  Tensor value(a.shape(), std::move(out));
  const std::array inputs{a};
  return Tape::record(Primitive::softmax, inputs, value,
                      [value, rows, width](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        if (gi[0] == nullptr) return;
                        const auto y = value.data();
                        for (std::size_t r = 0; r < rows; ++r) {
                          const std::size_t o = r * width;
                          double dot = 0.0;
                          for (std::size_t j = 0; j < width; ++j) dot += g[o + j] * y[o + j];
                          for (std::size_t j = 0; j < width; ++j) (*gi[0])[o + j] += y[o + j] * (g[o + j] - dot);
                        }
                      });
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape lead = parts[0].shape();
  last_dim("concat", parts[0]);
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    Shape s = parts[p].shape();
    if (s.empty()) throw ShapeError("concat: input " + std::to_string(p) + " is a scalar");
    widths.push_back(s.back());
    total += s.back();
    s.pop_back();
    if (s != lead) {
      throw ShapeError("concat: input " + std::to_string(p) + " has shape " + shape_string(parts[p].shape()) +
                       ", leading axes must match " + shape_string(parts[0].shape()));
    }
  }
  const std::size_t rows = shape_size(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src.data() + r * widths[p], widths[p], out.data() + r * total + offset);
    }
    offset += widths[p];
  }
  Shape shape = lead;
  shape.push_back(total);
  return Tape::record(Primitive::concat, parts, Tensor(shape, std::move(out)),
                      [widths, rows, total](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        std::size_t offset = 0;
                        for (std::size_t p = 0; p < widths.size(); ++p) {
                          if (gi[p]) {
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < widths[p]; ++j)
                                (*gi[p])[r * widths[p] + j] += g[r * total + offset + j];
                          }
                          offset += widths[p];
                        }
                      });
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t width = last_dim("slice", a);
  if (begin > end || end > width) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for last axis of " + shape_string(a.shape()));
  }
  const std::size_t rows = a.size() / std::max<std::size_t>(width, 1);
  const std::size_t count = end - begin;
  std::vector<double> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * width + begin, count, out.data() + r * count);
  }
  Shape shape = a.shape();
  shape.back() = count;
  const std::array inputs{a};
  return Tape::record(Primitive::slice, inputs, Tensor(shape, std::move(out)),
                      [rows, width, begin, count](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        if (gi[0] == nullptr) return;
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < count; ++j) (*gi[0])[r * width + begin + j] += g[r * count + j];
                      });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double x : a.data()) total += x;
  const std::array inputs{a};
  return Tape::record(Primitive::sum, inputs, Tensor::scalar(total),
                      [](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        if (gi[0])
                          for (double& d : *gi[0]) d += g[0];
                      });
}

Tensor sum_last(const Tensor& a) {
  const std::size_t width = last_dim("sum", a);
  const std::size_t rows = width == 0 ? 0 : a.size() / width;
  Shape shape = a.shape();
  shape.pop_back();
  std::vector<double> out(shape_size(shape), 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < width; ++j) out[r] += a[r * width + j];
  const std::array inputs{a};
  return Tape::record(Primitive::sum, inputs, Tensor(shape, std::move(out)),
                      [rows, width](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        if (gi[0] == nullptr) return;
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < width; ++j) (*gi[0])[r * width + j] += g[r];
                      });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  double total = 0.0;
  for (double x : a.data()) total += x;
  const double inv = 1.0 / static_cast<double>(a.size());
  const std::array inputs{a};
  return Tape::record(Primitive::mean, inputs, Tensor::scalar(total * inv),
                      [inv](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        if (gi[0])
                          for (double& d : *gi[0]) d += g[0] * inv;
                      });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const std::array inputs{a};
  const std::size_t n = shape_size(shape);
  const bool trailing = a.rank() <= shape.size() && std::equal(a.shape().begin(), a.shape().end(),
                                                               shape.end() - static_cast<std::ptrdiff_t>(a.rank()));
  if (trailing && a.size() > 0) {
    // Source repeats as a contiguous block.
    const std::size_t block = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; i += block) std::copy_n(a.data().data(), block, out.data() + i);
    return Tape::record(Primitive::broadcast, inputs, Tensor(shape, std::move(out)),
                        [block](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                          if (gi[0] == nullptr) return;
                          double* dst = gi[0]->data();
                          for (std::size_t i = 0; i < g.size(); i += block)
                            for (std::size_t j = 0; j < block; ++j) dst[j] += g[i + j];
                        });
  }
  const auto index = broadcast_index(a.shape(), shape);
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[index[i]];
  return Tape::record(Primitive::broadcast, inputs, Tensor(shape, std::move(out)),
                      [index](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        if (gi[0] == nullptr) return;
                        for (std::size_t i = 0; i < index.size(); ++i) (*gi[0])[index[i]] += g[i];
                      });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  const std::array inputs{a};
  return Tape::record(Primitive::reshape, inputs, Tensor(shape, a.to_vector()),
                      [](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        if (gi[0])
                          for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                      });
}

namespace {

std::size_t check_batch_norm_shapes(std::string_view op, const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": input must be B x C, got " + shape_string(x.shape()));
  const std::size_t c = x.dim(1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError(std::string(op) + ": affine parameters must have shape [" + std::to_string(c) + "], got " +
                     shape_string(gamma.shape()) + " and " + shape_string(beta.shape()));
  }
  return c;
}

}  // namespace

BatchNormTrainResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = check_batch_norm_shapes("batch-norm-train", x, gamma, beta);
  const std::size_t b = x.dim(0);
  if (b == 0) throw ShapeError("batch-norm-train: empty batch");
  BatchNormTrainResult result;
  result.batch_mean.assign(c, 0.0);
  result.batch_var.assign(c, 0.0);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t j = 0; j < c; ++j) result.batch_mean[j] += x[r * c + j];
  for (auto& m : result.batch_mean) m /= static_cast<double>(b);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x[r * c + j] - result.batch_mean[j];
      result.batch_var[j] += d * d;
    }
  for (auto& v : result.batch_var) v /= static_cast<double>(b);

  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(result.batch_var[j] + eps);
  std::vector<double> x_hat(x.size());
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      x_hat[i] = (x[i] - result.batch_mean[j]) * inv_std[j];
      out[i] = gamma[j] * x_hat[i] + beta[j];
    }

  const std::array inputs{x, gamma, beta};
  result.output = Tape::record(
      Primitive::batch_norm_train, inputs, Tensor(x.shape(), std::move(out)),
      [gamma, x_hat = std::move(x_hat), inv_std = std::move(inv_std), b, c](
          std::span<const double> g, std::span<std::vector<double>* const> gi) {
        std::vector<double> sum_g(c, 0.0);
        std::vector<double> sum_g_xhat(c, 0.0);
        for (std::size_t r = 0; r < b; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            sum_g[j] += g[r * c + j];
            sum_g_xhat[j] += g[r * c + j] * x_hat[r * c + j];
          }
        if (gi[0]) {
          const double inv_b = 1.0 / static_cast<double>(b);
          for (std::size_t r = 0; r < b; ++r)
            for (std::size_t j = 0; j < c; ++j) {
              const std::size_t i = r * c + j;
              (*gi[0])[i] += gamma[j] * inv_std[j] * inv_b *
                             (static_cast<double>(b) * g[i] - sum_g[j] - x_hat[i] * sum_g_xhat[j]);
            }
        }
        if (gi[1])
          for (std::size_t j = 0; j < c; ++j) (*gi[1])[j] += sum_g_xhat[j];
        if (gi[2])
          for (std::size_t j = 0; j < c; ++j) (*gi[2])[j] += sum_g[j];
      });
  return result;
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> running_mean, std::span<const double> running_var, double eps) {
  const std::size_t c = check_batch_norm_shapes("batch-norm-eval", x, gamma, beta);
  if (running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("batch-norm-eval: running statistics must have " + std::to_string(c) + " entries");
  }
  const std::size_t b = x.dim(0);
  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) {
    if (!(running_var[j] + eps > 0.0)) throw DomainError("batch-norm-eval: negative running variance");
    inv_std[j] = 1.0 / std::sqrt(running_var[j] + eps);
  }
  std::vector<double> x_hat(x.size());
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      x_hat[i] = (x[i] - running_mean[j]) * inv_std[j];
      out[i] = gamma[j] * x_hat[i] + beta[j];
    }
  const std::array inputs{x, gamma, beta};
  return Tape::record(Primitive::batch_norm_eval, inputs, Tensor(x.shape(), std::move(out)),
                      [gamma, x_hat = std::move(x_hat), inv_std = std::move(inv_std), b, c](
                          std::span<const double> g, std::span<std::vector<double>* const> gi) {
                        for (std::size_t r = 0; r < b; ++r)
                          for (std::size_t j = 0; j < c; ++j) {
                            const std::size_t i = r * c + j;
                            if (gi[0]) (*gi[0])[i] += g[i] * gamma[j] * inv_std[j];
                            if (gi[1]) (*gi[1])[j] += g[i] * x_hat[i];
                            if (gi[2]) (*gi[2])[j] += g[i];
                          }
                      });
}

Tensor apply_primitive(Primitive kind, std::span<const Tensor> inputs, const PrimitiveAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(to_string(kind)) + ": expects " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case Primitive::add: need(2); return add(inputs[0], inputs[1]);
    case Primitive::subtract: need(2); return subtract(inputs[0], inputs[1]);
    case Primitive::multiply: need(2); return multiply(inputs[0], inputs[1]);
    case Primitive::scale: need(1); return scale(inputs[0], attrs.factor);
    case Primitive::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case Primitive::relu: need(1); return relu(inputs[0]);
    case Primitive::exp: need(1); return exp(inputs[0]);
    case Primitive::log: need(1); return log(inputs[0]);
    case Primitive::softmax: need(1); return softmax(inputs[0]);
    case Primitive::concat: return concat(inputs);
    case Primitive::slice: need(1); return slice(inputs[0], attrs.begin, attrs.end);
    case Primitive::sum: need(1); return attrs.last_axis ? sum_last(inputs[0]) : sum(inputs[0]);
    case Primitive::mean: need(1); return mean(inputs[0]);
    case Primitive::abs: need(1); return abs(inputs[0]);
    case Primitive::batch_norm_train: need(3); return batch_norm_train(inputs[0], inputs[1], inputs[2], attrs.eps).output;
    case Primitive::batch_norm_eval:
      need(5);
      return batch_norm_eval(inputs[0], inputs[1], inputs[2], inputs[3].data(), inputs[4].data(), attrs.eps);
    case Primitive::broadcast: need(1); return broadcast_to(inputs[0], attrs.shape);
    case Primitive::reshape: need(1); return reshape(inputs[0], attrs.shape);
  }
  throw ContractError("apply_primitive: unknown primitive");
}

// ---- Parameter ------------------------------------------------------------

std::string_view to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::selector: return "selector";
    case ParamGroup::fusion: return "fusion";
    case ParamGroup::backbone: return "backbone";
  }
  return "unknown";
}

ParamGroup param_group_from_string(std::string_view name) {
  if (name == "selector") return ParamGroup::selector;
  if (name == "fusion") return ParamGroup::fusion;
  if (name == "backbone") return ParamGroup::backbone;
  throw FormatError("unknown parameter group '" + std::string(name) + "'");
}

Parameter::Parameter(std::string name, ParamGroup group, Tensor value)
    : name_(std::move(name)), group_(group), value_(value.detached()), grad_(value_.size(), 0.0) {}

void Parameter::set_value(std::vector<double> data) {
  value_ = Tensor(value_.shape(), std::move(data));
  bound_ = Tensor();
}

Tensor Parameter::bind(Tape* tape) {
  bound_ = tape ? tape->watch(value_) : value_;
  return bound_;
}

void Parameter::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

void Parameter::accumulate_grad(const Gradients& grads) {
  if (!bound_.recorded() || !grads.has(bound_.node())) return;
  const auto g = grads.raw(bound_.node());
  for (std::size_t i = 0; i < grad_.size(); ++i) grad_[i] += g[i];
}

// ---- finite differences ---------------------------------------------------

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& point, double h) {
  if (!(h > 0.0)) throw DomainError("finite_difference_gradient: step must be positive");
  std::vector<double> probe = point.to_vector();
  std::vector<double> grad(probe.size());
  auto eval = [&](std::size_t i) {
    const double v = f(Tensor(point.shape(), probe));
    if (!std::isfinite(v)) {
      throw NumericError("finite_difference_gradient: non-finite value at coordinate " + std::to_string(i));
    }
    return v;
  };
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = eval(i);
    probe[i] = orig - h;
    const double down = eval(i);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return Tensor(point.shape(), std::move(grad));
}

}  // namespace grouppose::ad
