#include "gemcl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gemcl/error.hpp"
#include "gemcl/kernels.hpp"
#include "gemcl/special.hpp"

namespace gemcl::ad {
namespace {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> strides_for(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

bool make_broadcast(const Shape& a, const Shape& b, Broadcast& bc) {
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  bc.stride_a.assign(rank, 0);
  bc.stride_b.assign(rank, 0);
  const auto sa = strides_for(a);
  const auto sb = strides_for(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t oa = rank - a.size();
    const std::size_t ob = rank - b.size();
    const std::size_t da = i >= oa ? a[i - oa] : 1;
    const std::size_t db = i >= ob ? b[i - ob] : 1;
    if (da != db && da != 1 && db != 1) return false;
    bc.out[i] = std::max(da, db);
    if (i >= oa && da != 1) bc.stride_a[i] = sa[i - oa];
    if (i >= ob && db != 1) bc.stride_b[i] = sb[i - ob];
  }
  return true;
}

// f(out_index, a_index, b_index) for every output element, row-major.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t rank = bc.out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t total = shape_size(bc.out);
  const std::size_t inner = bc.out[rank - 1];
  const std::size_t ia_step = bc.stride_a[rank - 1];
  const std::size_t ib_step = bc.stride_b[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t o = 0; o < total; o += inner) {
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t d = 0; d + 1 < rank; ++d) {
      ia += idx[d] * bc.stride_a[d];
      ib += idx[d] * bc.stride_b[d];
    }
    for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      if (++idx[d] < bc.out[d]) break;
      idx[d] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdims) {
  Shape out = shape;
  if (keepdims) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Square: return "square";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Softplus: return "softplus";
    case Op::Reciprocal: return "reciprocal";
    case Op::Sqrt: return "sqrt";
    case Op::Relu: return "relu";
    case Op::Lgamma: return "lgamma";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::ExpandDims: return "expand_dims";
    case Op::Sum: return "sum";
    case Op::SumAxis: return "sum_axis";
    case Op::Mean: return "mean";
    case Op::MeanAxis: return "mean_axis";
    case Op::Max: return "max";
    case Op::MaxAxis: return "max_axis";
    case Op::Concat: return "concat";
    case Op::GatherRows: return "gather_rows";
    case Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Construction

void Graph::check_owner(Var v) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) {
    throw Error("variable does not belong to this graph");
  }
}

Var Graph::push(Node node) {
  for (std::size_t in : node.inputs) {
    if (nodes_[in].requires_grad) node.requires_grad = true;
  }
  nodes_.push_back(std::move(node));
  evaluated_ = false;
  return Var(this, nodes_.size() - 1);
}

Var Graph::input(const std::string& name) {
  for (const Node& n : nodes_) {
    if (n.op == Op::Input && n.name == name) {
      throw Error("duplicate graph input '" + name + "'");
    }
  }
  Node n;
  n.op = Op::Input;
  n.name = name;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::constant(Tensor value) {
  if (!value.all_finite()) throw Error("constant tensor contains non-finite values");
  Node n;
  n.op = Op::Constant;
  n.shape = value.shape();
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::unary(Op op, Var a, double scalar) {
  check_owner(a);
  Node n;
  n.op = op;
  n.inputs = {a.id()};
  n.scalar = scalar;
  return push(std::move(n));
}

Var Graph::binary(Op op, Var a, Var b) {
  check_owner(a);
  check_owner(b);
  Node n;
  n.op = op;
  n.inputs = {a.id(), b.id()};
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) { return binary(Op::Add, a, b); }
Var Graph::sub(Var a, Var b) { return binary(Op::Sub, a, b); }
Var Graph::mul(Var a, Var b) { return binary(Op::Mul, a, b); }
Var Graph::div(Var a, Var b) { return binary(Op::Div, a, b); }
Var Graph::neg(Var a) { return unary(Op::Neg, a); }
Var Graph::scale(Var a, double c) { return unary(Op::Scale, a, c); }
Var Graph::add_scalar(Var a, double c) { return unary(Op::AddScalar, a, c); }
Var Graph::square(Var a) { return unary(Op::Square, a); }
Var Graph::exp(Var a) { return unary(Op::Exp, a); }
Var Graph::log(Var a) { return unary(Op::Log, a); }
Var Graph::softplus(Var a) { return unary(Op::Softplus, a); }
Var Graph::reciprocal(Var a) { return unary(Op::Reciprocal, a); }
Var Graph::sqrt(Var a) { return unary(Op::Sqrt, a); }
Var Graph::relu(Var a) { return unary(Op::Relu, a); }
Var Graph::lgamma(Var a) { return unary(Op::Lgamma, a); }
Var Graph::matmul(Var a, Var b) { return binary(Op::MatMul, a, b); }
Var Graph::transpose(Var a) { return unary(Op::Transpose, a); }
Var Graph::sum(Var a) { return unary(Op::Sum, a); }
Var Graph::mean(Var a) { return unary(Op::Mean, a); }
Var Graph::max(Var a) { return unary(Op::Max, a); }

Var Graph::reshape(Var a, Shape shape) {
  check_owner(a);
  Node n;
  n.op = Op::Reshape;
  n.inputs = {a.id()};
  n.indices = std::move(shape);
  return push(std::move(n));
}

Var Graph::expand_dims(Var a, std::size_t axis) {
  Var v = unary(Op::ExpandDims, a);
  nodes_[v.id()].axis = axis;
  return v;
}

Var Graph::sum(Var a, std::size_t axis, bool keepdims) {
  Var v = unary(Op::SumAxis, a);
  nodes_[v.id()].axis = axis;
  nodes_[v.id()].keepdims = keepdims;
  return v;
}

Var Graph::mean(Var a, std::size_t axis, bool keepdims) {
  Var v = unary(Op::MeanAxis, a);
  nodes_[v.id()].axis = axis;
  nodes_[v.id()].keepdims = keepdims;
  return v;
}

Var Graph::max(Var a, std::size_t axis, bool keepdims) {
  Var v = unary(Op::MaxAxis, a);
  nodes_[v.id()].axis = axis;
  nodes_[v.id()].keepdims = keepdims;
  return v;
}

Var Graph::concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw Error("concat of zero tensors");
  Node n;
  n.op = Op::Concat;
  n.axis = axis;
  for (Var p : parts) {
    check_owner(p);
    n.inputs.push_back(p.id());
  }
  return push(std::move(n));
}

Var Graph::gather_rows(Var a, std::vector<std::size_t> rows) {
  check_owner(a);
  if (rows.empty()) throw Error("gather_rows with no rows");
  Node n;
  n.op = Op::GatherRows;
  n.inputs = {a.id()};
  n.indices = std::move(rows);
  return push(std::move(n));
}

Var Graph::softmax_cross_entropy(Var logits, std::vector<std::size_t> labels) {
  check_owner(logits);
  if (labels.empty()) throw Error("softmax_cross_entropy with no labels");
  Node n;
  n.op = Op::SoftmaxCrossEntropy;
  n.inputs = {logits.id()};
  n.indices = std::move(labels);
  return push(std::move(n));
}

void Graph::mark_output(const std::string& name, Var v) {
  check_owner(v);
  outputs_.emplace_back(name, v.id());
}

std::vector<std::string> Graph::input_names() const {
  std::vector<std::string> names;
  for (const Node& n : nodes_) {
    if (n.op == Op::Input) names.push_back(n.name);
  }
  return names;
}

const Tensor& Graph::value(Var v) const {
  check_owner(v);
  if (!evaluated_) throw Error("graph has not been evaluated");
  return nodes_[v.id()].value;
}

const Tensor& Graph::adjoint(Var v) const {
  check_owner(v);
  return nodes_[v.id()].adjoint;
}

// ---------------------------------------------------------------------------
// Forward

void Graph::shape_fail(std::size_t id, const std::string& what) const {
  throw ShapeError("node " + std::to_string(id) + " (" + op_name(nodes_[id].op) +
                   "): " + what);
}

NamedTensors Graph::forward(const NamedTensors& inputs) {
  evaluated_ = false;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    eval_node(i, inputs);
    if (!nodes_[i].value.all_finite()) {
      throw Error("node " + std::to_string(i) + " (" + op_name(nodes_[i].op) +
                  ") produced a non-finite value");
    }
  }
  evaluated_ = true;
  NamedTensors out;
  for (const auto& [name, id] : outputs_) out[name] = nodes_[id].value;
  return out;
}

void Graph::eval_node(std::size_t id, const NamedTensors& inputs) {
  Node& n = nodes_[id];
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };

  switch (n.op) {
    case Op::Input: {
      auto it = inputs.find(n.name);
      if (it == inputs.end()) {
        throw Error("node " + std::to_string(id) + ": input '" + n.name + "' is not bound");
      }
      n.value = it->second;
      break;
    }
    case Op::Constant:
      break;

    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (n.op == Op::Add && a.shape() == b.shape()) {
        n.value = Tensor(a.shape());
        kernels::add(a.data(), b.data(), n.value.data());
        break;
      }
      if (n.op == Op::Mul && a.shape() == b.shape()) {
        n.value = Tensor(a.shape());
        kernels::mul(a.data(), b.data(), n.value.data());
        break;
      }
      Broadcast bc;
      if (!make_broadcast(a.shape(), b.shape(), bc)) {
        shape_fail(id, "cannot broadcast " + shape_string(a.shape()) + " with " +
                           shape_string(b.shape()));
      }
      n.value = Tensor(bc.out);
      double* out = n.value.data().data();
      const double* pa = a.data().data();
      const double* pb = b.data().data();
      switch (n.op) {
        case Op::Add:
          for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] + pb[j]; });
          break;
        case Op::Sub:
          for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] - pb[j]; });
          break;
        case Op::Mul:
          for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] * pb[j]; });
          break;
        default:
          for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] / pb[j]; });
          break;
      }
      break;
    }

    case Op::Neg:
    case Op::Scale:
    case Op::AddScalar:
    case Op::Square:
    case Op::Exp:
    case Op::Log:
    case Op::Softplus:
    case Op::Reciprocal:
    case Op::Sqrt:
    case Op::Relu:
    case Op::Lgamma: {
      const Tensor& a = in(0);
      n.value = Tensor(a.shape());
      const double c = n.scalar;
      auto src = a.data();
      auto dst = n.value.data();
      for (std::size_t i = 0; i < src.size(); ++i) {
        const double x = src[i];
        double y = 0.0;
        switch (n.op) {
          case Op::Neg: y = -x; break;
          case Op::Scale: y = c * x; break;
          case Op::AddScalar: y = x + c; break;
          case Op::Square: y = x * x; break;
          case Op::Exp: y = std::exp(x); break;
          case Op::Log: y = std::log(x); break;
          case Op::Softplus: y = softplus_value(x); break;
          case Op::Reciprocal: y = 1.0 / x; break;
          case Op::Sqrt: y = std::sqrt(x); break;
          case Op::Relu: y = x > 0.0 ? x : 0.0; break;
          case Op::Lgamma: y = special::lgamma(x); break;
          default: break;
        }
        dst[i] = y;
      }
      break;
    }

    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() < 1 || a.rank() > 2 || b.rank() < 1 || b.rank() > 2) {
        shape_fail(id, "operands must be rank 1 or 2, got " + shape_string(a.shape()) +
                           " x " + shape_string(b.shape()));
      }
      const std::size_t m = a.rank() == 2 ? a.dim(0) : 1;
      const std::size_t k = a.rank() == 2 ? a.dim(1) : a.dim(0);
      const std::size_t kb = b.dim(0);
      const std::size_t nn = b.rank() == 2 ? b.dim(1) : 1;
      if (k != kb) {
        shape_fail(id, "inner dimensions differ: " + shape_string(a.shape()) + " x " +
                           shape_string(b.shape()));
      }
      Shape out;
      if (a.rank() == 2) out.push_back(m);
      if (b.rank() == 2) out.push_back(nn);
      n.value = Tensor(out);
      kernels::gemm(a.data().data(), b.data().data(), n.value.data().data(), m, k, nn);
      break;
    }

    case Op::Transpose: {
      const Tensor& a = in(0);
      if (a.rank() != 2) shape_fail(id, "transpose needs rank 2, got " + shape_string(a.shape()));
      n.value = Tensor(Shape{a.cols(), a.rows()});
      for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) n.value.at(c, r) = a.at(r, c);
      }
      break;
    }

    case Op::Reshape: {
      const Tensor& a = in(0);
      if (shape_size(n.indices) != a.size()) {
        shape_fail(id, "cannot reshape " + shape_string(a.shape()) + " to " +
                           shape_string(n.indices));
      }
      n.value = a.reshaped(n.indices);
      break;
    }

    case Op::ExpandDims: {
      const Tensor& a = in(0);
      if (n.axis > a.rank()) {
        shape_fail(id, "axis " + std::to_string(n.axis) + " out of range for " + shape_string(a.shape()));
      }
      Shape shape = a.shape();
      shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(n.axis), 1);
      n.value = a.reshaped(std::move(shape));
      break;
    }

    case Op::Sum:
      n.value = Tensor::scalar(kernels::sum(in(0).data()));
      break;
    case Op::Mean:
      n.value = Tensor::scalar(kernels::sum(in(0).data()) / static_cast<double>(in(0).size()));
      break;
    case Op::Max: {
      auto d = in(0).data();
      n.value = Tensor::scalar(*std::max_element(d.begin(), d.end()));
      break;
    }

    case Op::SumAxis:
    case Op::MeanAxis:
    case Op::MaxAxis: {
      const Tensor& a = in(0);
      if (n.axis >= a.rank()) {
        shape_fail(id, "axis " + std::to_string(n.axis) + " out of range for " +
                           shape_string(a.shape()));
      }
      const AxisSplit s = split_axis(a.shape(), n.axis);
      n.value = Tensor(reduced_shape(a.shape(), n.axis, n.keepdims));
      auto src = a.data();
      auto dst = n.value.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t base = o * s.n * s.inner + j;
          double acc = n.op == Op::MaxAxis ? src[base] : 0.0;
          for (std::size_t r = 0; r < s.n; ++r) {
            const double v = src[base + r * s.inner];
            if (n.op == Op::MaxAxis) {
              acc = std::max(acc, v);
            } else {
              acc += v;
            }
          }
          if (n.op == Op::MeanAxis) acc /= static_cast<double>(s.n);
          dst[o * s.inner + j] = acc;
        }
      }
      break;
    }

    case Op::Concat: {
      const Tensor& first = in(0);
      if (n.axis >= first.rank()) {
        shape_fail(id, "axis " + std::to_string(n.axis) + " out of range for " +
                           shape_string(first.shape()));
      }
      Shape out = first.shape();
      out[n.axis] = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Shape& s = in(k).shape();
        bool ok = s.size() == out.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) {
          if (d != n.axis && s[d] != first.shape()[d]) ok = false;
        }
        if (!ok) {
          shape_fail(id, "part " + std::to_string(k) + " has shape " + shape_string(s) +
                             ", incompatible with " + shape_string(first.shape()));
        }
        out[n.axis] += s[n.axis];
      }
      n.value = Tensor(out);
      const AxisSplit whole = split_axis(out, n.axis);
      auto dst = n.value.data();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const AxisSplit part = split_axis(in(k).shape(), n.axis);
        auto src = in(k).data();
        const std::size_t chunk = part.n * part.inner;
        for (std::size_t o = 0; o < whole.outer; ++o) {
          std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                      dst.begin() + static_cast<std::ptrdiff_t>(o * whole.n * whole.inner + offset));
        }
        offset += chunk;
      }
      break;
    }

    case Op::GatherRows: {
      const Tensor& a = in(0);
      if (a.rank() < 1) shape_fail(id, "gather_rows needs rank >= 1");
      const std::size_t row = a.size() / a.dim(0);
      Shape out = a.shape();
      out[0] = n.indices.size();
      n.value = Tensor(out);
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        if (n.indices[r] >= a.dim(0)) {
          shape_fail(id, "row index " + std::to_string(n.indices[r]) + " out of range for " +
                             shape_string(a.shape()));
        }
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(n.indices[r] * row), row,
                    n.value.data().begin() + static_cast<std::ptrdiff_t>(r * row));
      }
      break;
    }

    case Op::SoftmaxCrossEntropy: {
      const Tensor& z = in(0);
      if (z.rank() != 2 || z.rows() != n.indices.size()) {
        shape_fail(id, "logits " + shape_string(z.shape()) + " do not match " +
                           std::to_string(n.indices.size()) + " labels");
      }
      double total = 0.0;
      for (std::size_t r = 0; r < z.rows(); ++r) {
        if (n.indices[r] >= z.cols()) {
          shape_fail(id, "label " + std::to_string(n.indices[r]) + " out of range for " +
                             std::to_string(z.cols()) + " classes");
        }
        auto row = z.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (double v : row) s += std::exp(v - mx);
        total += mx + std::log(s) - row[n.indices[r]];
      }
      n.value = Tensor::scalar(total / static_cast<double>(z.rows()));
      break;
    }
  }
  n.shape = n.value.shape();
}

// ---------------------------------------------------------------------------
// Backward

NamedTensors Graph::backward(const Tensor& seed) {
  if (nodes_.empty()) throw Error("backward on an empty graph");
  return backward(Var(this, nodes_.size() - 1), seed);
}

NamedTensors Graph::backward(Var output, const Tensor& seed) {
  check_owner(output);
  if (!evaluated_) throw Error("backward called before forward");
  const std::size_t out_id = output.id();
  if (seed.shape() != nodes_[out_id].value.shape()) {
    throw ShapeError("seed shape " + shape_string(seed.shape()) + " differs from output shape " +
                     shape_string(nodes_[out_id].value.shape()));
  }
  for (std::size_t i = 0; i <= out_id; ++i) {
    Node& n = nodes_[i];
    n.adjoint = n.requires_grad ? Tensor(n.value.shape()) : Tensor();
  }
  for (std::size_t i = out_id + 1; i < nodes_.size(); ++i) nodes_[i].adjoint = Tensor();
  if (nodes_[out_id].requires_grad) nodes_[out_id].adjoint = seed;

  for (std::size_t i = out_id + 1; i-- > 0;) {
    if (nodes_[i].requires_grad && nodes_[i].op != Op::Input) backprop_node(i);
  }

  NamedTensors grads;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op != Op::Input) continue;
    grads[n.name] = i <= out_id ? n.adjoint : Tensor(n.value.shape());
  }
  return grads;
}

void Graph::backprop_node(std::size_t id) {
  Node& n = nodes_[id];
  const Tensor& g = n.adjoint;
  auto needs = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
  auto grad_in = [&](std::size_t k) -> Tensor& { return nodes_[n.inputs[k]].adjoint; };
  auto val_in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };

  switch (n.op) {
    case Op::Input:
    case Op::Constant:
      break;

    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      const Tensor& a = val_in(0);
      const Tensor& b = val_in(1);
      Broadcast bc;
      make_broadcast(a.shape(), b.shape(), bc);
      const double* pg = g.data().data();
      const double* pa = a.data().data();
      const double* pb = b.data().data();
      if (needs(0)) {
        double* ga = grad_in(0).data().data();
        switch (n.op) {
          case Op::Add:
          case Op::Sub:
            for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t) { ga[i] += pg[o]; });
            break;
          case Op::Mul:
            for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += pg[o] * pb[j]; });
            break;
          default:
            for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += pg[o] / pb[j]; });
            break;
        }
      }
      if (needs(1)) {
        double* gb = grad_in(1).data().data();
        switch (n.op) {
          case Op::Add:
            for_each_broadcast(bc, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] += pg[o]; });
            break;
          case Op::Sub:
            for_each_broadcast(bc, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] -= pg[o]; });
            break;
          case Op::Mul:
            for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += pg[o] * pa[i]; });
            break;
          default:
            for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
              gb[j] -= pg[o] * pa[i] / (pb[j] * pb[j]);
            });
            break;
        }
      }
      break;
    }

    case Op::Neg:
    case Op::Scale:
    case Op::AddScalar:
    case Op::Square:
    case Op::Exp:
    case Op::Log:
    case Op::Softplus:
    case Op::Reciprocal:
    case Op::Sqrt:
    case Op::Relu:
    case Op::Lgamma: {
      if (!needs(0)) break;
      auto x = val_in(0).data();
      auto y = n.value.data();
      auto gi = grad_in(0).data();
      auto go = g.data();
      const double c = n.scalar;
      for (std::size_t i = 0; i < x.size(); ++i) {
        double d = 0.0;
        switch (n.op) {
          case Op::Neg: d = -1.0; break;
          case Op::Scale: d = c; break;
          case Op::AddScalar: d = 1.0; break;
          case Op::Square: d = 2.0 * x[i]; break;
          case Op::Exp: d = y[i]; break;
          case Op::Log: d = 1.0 / x[i]; break;
          case Op::Softplus: d = sigmoid(x[i]); break;
          case Op::Reciprocal: d = -y[i] * y[i]; break;
          case Op::Sqrt: d = y[i] > 0.0 ? 0.5 / y[i] : 0.0; break;
          case Op::Relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
          case Op::Lgamma: d = special::digamma(x[i]); break;
          default: break;
        }
        gi[i] += go[i] * d;
      }
      break;
    }

    case Op::MatMul: {
      const Tensor& a = val_in(0);
      const Tensor& b = val_in(1);
      const std::size_t m = a.rank() == 2 ? a.dim(0) : 1;
      const std::size_t k = a.rank() == 2 ? a.dim(1) : a.dim(0);
      const std::size_t nn = b.rank() == 2 ? b.dim(1) : 1;
      // dA = dC B^T, dB = A^T dC
      if (needs(0)) {
        kernels::gemm_nt(g.data().data(), b.data().data(), grad_in(0).data().data(), m, nn, k,
                         true);
      }
      if (needs(1)) {
        kernels::gemm_tn(a.data().data(), g.data().data(), grad_in(1).data().data(), m, k, nn,
                         true);
      }
      break;
    }

    case Op::Transpose: {
      if (!needs(0)) break;
      Tensor& gi = grad_in(0);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < g.cols(); ++c) gi.at(c, r) += g.at(r, c);
      }
      break;
    }

    case Op::Reshape:
    case Op::ExpandDims: {
      if (!needs(0)) break;
      kernels::add(grad_in(0).data(), g.data(), grad_in(0).data());
      break;
    }

    case Op::Sum:
    case Op::Mean: {
      if (!needs(0)) break;
      double s = g.item();
      if (n.op == Op::Mean) s /= static_cast<double>(val_in(0).size());
      for (double& v : grad_in(0).data()) v += s;
      break;
    }

    case Op::Max: {
      if (!needs(0)) break;
      auto x = val_in(0).data();
      const auto it = std::max_element(x.begin(), x.end());
      grad_in(0)[static_cast<std::size_t>(it - x.begin())] += g.item();
      break;
    }

    case Op::SumAxis:
    case Op::MeanAxis:
    case Op::MaxAxis: {
      if (!needs(0)) break;
      const Tensor& a = val_in(0);
      const AxisSplit s = split_axis(a.shape(), n.axis);
      auto x = a.data();
      auto gi = grad_in(0).data();
      auto go = g.data();
      const double scale = n.op == Op::MeanAxis ? 1.0 / static_cast<double>(s.n) : 1.0;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t base = o * s.n * s.inner + j;
          const double gv = go[o * s.inner + j];
          if (n.op == Op::MaxAxis) {
            std::size_t best = 0;
            for (std::size_t r = 1; r < s.n; ++r) {
              if (x[base + r * s.inner] > x[base + best * s.inner]) best = r;
            }
            gi[base + best * s.inner] += gv;
          } else {
            for (std::size_t r = 0; r < s.n; ++r) gi[base + r * s.inner] += gv * scale;
          }
        }
      }
      break;
    }

    case Op::Concat: {
      const AxisSplit whole = split_axis(n.value.shape(), n.axis);
      auto go = g.data();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const AxisSplit part = split_axis(val_in(k).shape(), n.axis);
        const std::size_t chunk = part.n * part.inner;
        if (needs(k)) {
          auto gi = grad_in(k).data();
          for (std::size_t o = 0; o < whole.outer; ++o) {
            const std::size_t src = o * whole.n * whole.inner + offset;
            for (std::size_t t = 0; t < chunk; ++t) gi[o * chunk + t] += go[src + t];
          }
        }
        offset += chunk;
      }
      break;
    }

    case Op::GatherRows: {
      if (!needs(0)) break;
      const std::size_t row = val_in(0).size() / val_in(0).dim(0);
      auto gi = grad_in(0).data();
      auto go = g.data();
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        kernels::add(gi.subspan(n.indices[r] * row, row), go.subspan(r * row, row),
                     gi.subspan(n.indices[r] * row, row));
      }
      break;
    }

    case Op::SoftmaxCrossEntropy: {
      if (!needs(0)) break;
      const Tensor& z = val_in(0);
      Tensor& gi = grad_in(0);
      const double scale = g.item() / static_cast<double>(z.rows());
      for (std::size_t r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (double v : row) s += std::exp(v - mx);
        auto grow = gi.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
          double p = std::exp(row[c] - mx) / s;
          if (c == n.indices[r]) p -= 1.0;
          grow[c] += scale * p;
        }
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Operators

Var operator+(Var a, Var b) { return a.graph().add(a, b); }
Var operator-(Var a, Var b) { return a.graph().sub(a, b); }
Var operator*(Var a, Var b) { return a.graph().mul(a, b); }
Var operator/(Var a, Var b) { return a.graph().div(a, b); }
Var operator-(Var a) { return a.graph().neg(a); }
Var operator+(Var a, double c) { return a.graph().add_scalar(a, c); }
Var operator+(double c, Var a) { return a.graph().add_scalar(a, c); }
Var operator-(Var a, double c) { return a.graph().add_scalar(a, -c); }
Var operator-(double c, Var a) { return a.graph().add_scalar(a.graph().neg(a), c); }
Var operator*(Var a, double c) { return a.graph().scale(a, c); }
Var operator*(double c, Var a) { return a.graph().scale(a, c); }
Var operator/(Var a, double c) { return a.graph().scale(a, 1.0 / c); }
Var operator/(double c, Var a) { return a.graph().scale(a.graph().reciprocal(a), c); }

// ---------------------------------------------------------------------------

double grad_check(const GraphBuilder& build, const NamedTensors& point, double step) {
  if (!(step > 0.0)) throw Error("grad_check step must be positive");
  Graph graph;
  const Var out = build(graph);
  graph.forward(point);
  if (graph.value(out).size() != 1) {
    throw ShapeError("grad_check needs a scalar-valued function, got shape " +
                     shape_string(graph.value(out).shape()));
  }
  const NamedTensors analytic = graph.backward(out, Tensor(graph.value(out).shape(), 1.0));

  NamedTensors probe = point;
  double worst = 0.0;
  for (auto& [name, tensor] : probe) {
    const auto it = analytic.find(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double orig = tensor[i];
      tensor[i] = orig + step;
      graph.forward(probe);
      const double fp = graph.value(out)[0];
      tensor[i] = orig - step;
      graph.forward(probe);
      const double fm = graph.value(out)[0];
      tensor[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double exact = it == analytic.end() ? 0.0 : it->second[i];
      worst = std::max(worst, std::fabs(exact - numeric) / std::max(1e-8, std::fabs(numeric)));
    }
  }
  return worst;
}

}  // namespace gemcl::ad
