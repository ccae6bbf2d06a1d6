#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xptlab/error.hpp"

namespace xptlab {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles. Plain value type; no views or strides.
class Tensor {
 public:
  Tensor() = default;
  /// Zero-filled tensor of the given shape. Every extent must be positive.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // 2-D helpers: rows is the leading extent, cols the product of the rest.
  std::size_t rows() const { return shape_.empty() ? 0 : shape_.front(); }
  std::size_t cols() const { return rows() == 0 ? 0 : size() / rows(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const {
    const std::size_t c = cols();
    return std::span<const double>(data_).subspan(r * c, c);
  }
  std::span<double> row(std::size_t r) {
    const std::size_t c = cols();
    return std::span<double>(data_).subspan(r * c, c);
  }

  /// Scalar value of a single-element tensor.
  double item() const;

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

using NodeId = std::size_t;
class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

enum class OpKind {
  kConstant,
  kVariable,
  kMatmul,
  kTranspose,
  kAdd,
  kAddRow,
  kMul,
  kScale,
  kSum,
  kSoftmax,
  kLayerNorm,
  kGelu,
  kCrossEntropy,
  kGatherRows,
  kAttention,
};

const char* op_name(OpKind kind);

/// What a node's backward closure sees. `grad_in[i]` is null when input i
/// needs no gradient; otherwise the closure accumulates into it.
struct BackwardContext {
  const Tensor& grad_out;
  const Tensor& output;
  std::span<const Tensor* const> inputs;
  std::span<Tensor* const> grad_in;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

/// Reverse-mode gradients, indexed by node id. Nodes that do not reach the
/// loss (or do not require grad) have no entry.
class Gradients {
 public:
  explicit Gradients(std::vector<std::optional<Tensor>> grads) : grads_(std::move(grads)) {}

  bool has(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }
  bool has(Var v) const { return has(v.id); }
  const Tensor* find(NodeId id) const { return has(id) ? &*grads_[id] : nullptr; }
  /// Throws ContractError when absent.
  const Tensor& at(Var v) const;

 private:
  std::vector<std::optional<Tensor>> grads_;
};

/// Append-only record of a computation. Insertion order is a topological
/// order, so backward is a single reverse sweep.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient (frozen weights, data).
  Var constant(Tensor value);
  /// Leaf that receives a gradient.
  Var variable(Tensor value);

  Var record(OpKind kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradients of a scalar loss w.r.t. every contributing node.
  Gradients backward(Var loss) const;
  /// Vector-Jacobian product: seeds `out` with `seed` instead of 1.
  Gradients backward(Var out, const Tensor& seed) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor value;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// ---- differentiable operations -------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
/// x[m×n] + b[n] broadcast over rows.
Var add_row(Var x, Var b);
/// Elementwise product, identical shapes.
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var softmax(Var x, std::size_t axis);
/// Normalizes over the last dimension, then applies gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Tanh approximation.
Var gelu(Var x);
/// Mean over rows of -log softmax(logits)[label].
Var cross_entropy_logits(Var logits, std::span<const int> labels);
/// Rows of `table` selected by `index`; backward scatter-adds.
Var gather_rows(Var table, std::span<const std::size_t> index);

// ---- plain (non-tape) kernels shared by ops and callers -------------------

/// C = A·B for row-major matrices.
Tensor matmul(const Tensor& a, const Tensor& b);
double gelu_value(double x);

// ---- finite-difference oracle ---------------------------------------------

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Largest relative disagreement between the tape gradient of `f` at `x`
/// and central differences with step `h`. The denominator is
/// max(|a|, |b|, 1e-8). `f` must be smooth around `x`; kinks (e.g. a max
/// switching branch inside the ±h window) are outside the contract.
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

double relative_error(double a, double b);

}  // namespace xptlab
