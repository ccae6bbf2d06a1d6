#include "xptlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace xptlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap as_matrix(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void accumulate(Tensor* dst, const Tensor& src) {
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  if (shape_.empty() || std::ranges::any_of(shape_, [](std::size_t d) { return d == 0; })) {
    throw DimensionError("tensor shape must be non-empty with positive extents, got " +
                         shape_str(shape_));
  }
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty() || std::ranges::any_of(shape_, [](std::size_t d) { return d == 0; })) {
    throw DimensionError("tensor shape must be non-empty with positive extents, got " +
                         shape_str(shape_));
  }
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::ranges::all_of(data_, [](double v) { return std::isfinite(v); });
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kVariable: return "variable";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kAdd: return "add";
    case OpKind::kAddRow: return "add_row";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kSum: return "sum";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kAttention: return "attention";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape->value(id); }

const Tensor& Gradients::at(Var v) const {
  if (!has(v)) throw ContractError("no gradient recorded for node " + std::to_string(v.id));
  return *grads_[v.id];
}

// ---- Tape -------------------------------------------------------------------

Var Tape::constant(Tensor value) {
  nodes_.push_back({OpKind::kConstant, {}, std::move(value), nullptr, false});
  return {this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back({OpKind::kVariable, {}, std::move(value), nullptr, true});
  return {this, nodes_.size() - 1};
}

Var Tape::record(OpKind kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward) {
  bool needs = false;
#ifndef NDEBUG
  bool inputs_finite = true;
#endif
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) throw ContractError("tape input refers to a future node");
    needs = needs || nodes_[in].requires_grad;
#ifndef NDEBUG
    inputs_finite = inputs_finite && nodes_[in].value.all_finite();
#endif
  }
#ifndef NDEBUG
  if (inputs_finite && !value.all_finite()) {
    throw InvariantError(std::string("non-finite output from ") + op_name(kind) + " on finite inputs");
  }
#endif
  nodes_.push_back({kind, std::move(inputs), std::move(value), needs ? std::move(backward) : nullptr, needs});
  return {this, nodes_.size() - 1};
}

Gradients Tape::backward(Var loss) const {
  if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
  if (value(loss.id).size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape()));
  }
  Tensor seed(value(loss.id).shape());
  seed[0] = 1.0;
  return backward(loss, seed);
}

Gradients Tape::backward(Var out, const Tensor& seed) const {
  if (out.tape != this) throw ContractError("backward: output belongs to another tape");
  require_same_shape(value(out.id), seed, "backward seed");
  std::vector<std::optional<Tensor>> grads(out.id + 1);
  if (!nodes_[out.id].requires_grad) return Gradients(std::move(grads));
  grads[out.id] = seed;

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (NodeId id = out.id + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!grads[id] || !node.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (NodeId in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].requires_grad) {
        if (!grads[in]) grads[in] = Tensor(nodes_[in].value.shape());
        in_grads.push_back(&*grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardContext{*grads[id], node.value, in_values, in_grads});
  }
  return Gradients(std::move(grads));
}

// ---- kernels ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor c({a.rows(), b.cols()});
  as_matrix(c).noalias() = as_matrix(a) * as_matrix(b);
  return c;
}

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

// ---- differentiable ops -------------------------------------------------------

Var matmul(Var a, Var b) {
  Tensor out = matmul(a.value(), b.value());
  return a.tape->record(OpKind::kMatmul, {a.id, b.id}, std::move(out), [](const BackwardContext& ctx) {
    const auto g = as_matrix(ctx.grad_out);
    if (ctx.grad_in[0]) as_matrix(*ctx.grad_in[0]).noalias() += g * as_matrix(*ctx.inputs[1]).transpose();
    if (ctx.grad_in[1]) as_matrix(*ctx.grad_in[1]).noalias() += as_matrix(*ctx.inputs[0]).transpose() * g;
  });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  require_matrix(x, "transpose");
  Tensor out({x.cols(), x.rows()});
  as_matrix(out) = as_matrix(x).transpose();
  return a.tape->record(OpKind::kTranspose, {a.id}, std::move(out), [](const BackwardContext& ctx) {
    as_matrix(*ctx.grad_in[0]) += as_matrix(ctx.grad_out).transpose();
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  accumulate(&out, b.value());
  return a.tape->record(OpKind::kAdd, {a.id, b.id}, std::move(out), [](const BackwardContext& ctx) {
    for (Tensor* g : ctx.grad_in) {
      if (g) accumulate(g, ctx.grad_out);
    }
  });
}

Var add_row(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_row: bias " + shape_str(bv.shape()) + " does not fit rows of " +
                         shape_str(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return x.tape->record(OpKind::kAddRow, {x.id, b.id}, std::move(out), [](const BackwardContext& ctx) {
    if (ctx.grad_in[0]) accumulate(ctx.grad_in[0], ctx.grad_out);
    if (Tensor* gb = ctx.grad_in[1]) {
      for (std::size_t r = 0; r < ctx.grad_out.rows(); ++r) {
        auto row = ctx.grad_out.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) (*gb)[c] += row[c];
      }
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(OpKind::kMul, {a.id, b.id}, std::move(out), [](const BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out;
    for (int k = 0; k < 2; ++k) {
      if (Tensor* gi = ctx.grad_in[k]) {
        const Tensor& other = *ctx.inputs[1 - k];
        for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i] * other[i];
      }
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return a.tape->record(OpKind::kScale, {a.id}, std::move(out), [s](const BackwardContext& ctx) {
    Tensor& gi = *ctx.grad_in[0];
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += s * ctx.grad_out[i];
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.tape->record(OpKind::kSum, {a.id}, Tensor::scalar(total), [](const BackwardContext& ctx) {
    const double g = ctx.grad_out[0];
    for (double& v : ctx.grad_in[0]->data()) v += g;
  });
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) {
    throw ContractError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(xv.shape()));
  }
  const std::size_t len = xv.shape()[axis];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < xv.rank(); ++d) inner *= xv.shape()[d];
  const std::size_t outer = xv.size() / (len * inner);

  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = xv[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  return x.tape->record(OpKind::kSoftmax, {x.id}, std::move(out), [outer, len, inner](const BackwardContext& ctx) {
    const Tensor& y = ctx.output;
    const Tensor& g = ctx.grad_out;
    Tensor& gx = *ctx.grad_in[0];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t j = base + k * inner;
          gx[j] += y[j] * (g[j] - dot);
        }
      }
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t d = xv.shape().back();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.value().shape()) + "/" +
                         shape_str(bias.value().shape()) + " vs input " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.size() / d;
  Tensor out(xv.shape());
  // Per-row normalized values and inverse std, reused by backward.
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mean) * is;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  return x.tape->record(
      OpKind::kLayerNorm, {x.id, gain.id, bias.id}, std::move(out),
      [xhat, inv_std, n, d](const BackwardContext& ctx) {
        const Tensor& g = ctx.grad_out;
        const Tensor& gv = *ctx.inputs[1];
        if (Tensor* gg = ctx.grad_in[1]) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) (*gg)[c] += g[r * d + c] * (*xhat)[r * d + c];
        }
        if (Tensor* gb = ctx.grad_in[2]) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) (*gb)[c] += g[r * d + c];
        }
        if (Tensor* gx = ctx.grad_in[0]) {
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_dh = 0.0;
            double mean_dh_h = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = g[r * d + c] * gv[c];
              mean_dh += dh;
              mean_dh_h += dh * (*xhat)[r * d + c];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            const double is = (*inv_std)[r];
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = g[r * d + c] * gv[c];
              (*gx)[r * d + c] += is * (dh - mean_dh - (*xhat)[r * d + c] * mean_dh_h);
            }
          }
        }
      });
}

Var gelu(Var x) {
  const Tensor& xv = x.value();
  const auto in = Eigen::Map<const Eigen::ArrayXd>(xv.data().data(), static_cast<Eigen::Index>(xv.size()));
  // tanh(u) = 1 - 2/(exp(2u)+1); the vectorized exp is much cheaper than std::tanh.
  auto t = std::make_shared<Eigen::ArrayXd>(1.0 - 2.0 / ((2.0 * kGeluC * (in + 0.044715 * in.cube())).exp() + 1.0));
  Tensor out(xv.shape());
  Eigen::Map<Eigen::ArrayXd>(out.data().data(), static_cast<Eigen::Index>(out.size())) = 0.5 * in * (1.0 + *t);
  return x.tape->record(OpKind::kGelu, {x.id}, std::move(out), [t](const BackwardContext& ctx) {
    const Tensor& xv = *ctx.inputs[0];
    const auto n = static_cast<Eigen::Index>(xv.size());
    const auto v = Eigen::Map<const Eigen::ArrayXd>(xv.data().data(), n);
    const auto g = Eigen::Map<const Eigen::ArrayXd>(ctx.grad_out.data().data(), n);
    auto gx = Eigen::Map<Eigen::ArrayXd>(ctx.grad_in[0]->data().data(), n);
    const Eigen::ArrayXd du = kGeluC * (1.0 + 3.0 * 0.044715 * v.square());
    gx += g * (0.5 * (1.0 + *t) + 0.5 * v * (1.0 - t->square()) * du);
  });
}

Var cross_entropy_logits(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  require_matrix(z, "cross_entropy_logits");
  const std::size_t batch = z.rows();
  const std::size_t classes = z.cols();
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy_logits: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(batch) + " rows");
  }
  auto probs = std::make_shared<Tensor>(z.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw IndexError("cross_entropy_logits: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    auto row = z.row(r);
    const double mx = *std::ranges::max_element(row);
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    loss += lse - row[y];
    auto p = probs->row(r);
    for (std::size_t c = 0; c < classes; ++c) p[c] = std::exp(row[c] - lse);
  }
  loss /= static_cast<double>(batch);
  std::vector<int> labels_copy(labels.begin(), labels.end());
  return logits.tape->record(
      OpKind::kCrossEntropy, {logits.id}, Tensor::scalar(loss),
      [probs, labels_copy = std::move(labels_copy)](const BackwardContext& ctx) {
        const double g = ctx.grad_out[0] / static_cast<double>(probs->rows());
        Tensor& gz = *ctx.grad_in[0];
        for (std::size_t r = 0; r < probs->rows(); ++r) {
          auto p = probs->row(r);
          auto out = gz.row(r);
          for (std::size_t c = 0; c < p.size(); ++c) out[c] += g * p[c];
          out[labels_copy[r]] -= g;
        }
      });
}

Var gather_rows(Var table, std::span<const std::size_t> index) {
  const Tensor& t = table.value();
  const std::size_t width = t.cols();
  if (index.empty()) throw ContractError("gather_rows: empty index");
  Shape shape = t.shape();
  shape[0] = index.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= t.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(index[i]) + " outside table of " +
                       std::to_string(t.rows()) + " rows");
    }
    std::ranges::copy(t.row(index[i]), out.row(i).begin());
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return table.tape->record(OpKind::kGatherRows, {table.id}, std::move(out),
                            [idx = std::move(idx), width](const BackwardContext& ctx) {
                              Tensor& gt = *ctx.grad_in[0];
                              for (std::size_t i = 0; i < idx.size(); ++i) {
                                auto src = ctx.grad_out.row(i);
                                auto dst = gt.row(idx[i]);
                                for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
                              }
                            });
}

// ---- finite differences ---------------------------------------------------------

double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0 && h <= 1e-2)) throw ContractError("finite_diff_check: h must lie in (0, 1e-2]");
  Tape tape;
  Var xv = tape.variable(x);
  Var loss = f(tape, xv);
  const Gradients grads = tape.backward(loss);
  const Tensor* analytic = grads.find(xv.id);

  auto eval = [&](const Tensor& at) {
    Tape t;
    return f(t, t.variable(at)).value().item();
  };

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = eval(probe);
    probe[i] = orig - h;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double tape_grad = analytic ? (*analytic)[i] : 0.0;
    worst = std::max(worst, relative_error(numeric, tape_grad));
  }
  return worst;
}

}  // namespace xptlab
