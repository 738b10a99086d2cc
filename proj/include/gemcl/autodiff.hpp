#pragma once

// Reverse-mode automatic differentiation over a static computation graph.
//
// A Graph is built once from named input placeholders, constants and
// primitive operations. forward() binds the inputs and evaluates every node
// in insertion order; backward() propagates a seed from one node back to the
// inputs. Node inputs always refer to earlier nodes, so insertion order is a
// topological order.
//
// Element-wise binary operations broadcast with NumPy rules (shapes are
// right-aligned; each dimension must match or be 1).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gemcl/tensor.hpp"

namespace gemcl::ad {

class Graph;

// Handle to a node in a Graph.
class Var {
 public:
  Var() = default;
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

enum class Op : std::uint8_t {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  AddScalar,
  Square,
  Exp,
  Log,
  Softplus,
  Reciprocal,
  Sqrt,
  Relu,
  Lgamma,
  MatMul,
  Transpose,
  Reshape,
  ExpandDims,
  Sum,
  SumAxis,
  Mean,
  MeanAxis,
  Max,
  MaxAxis,
  Concat,
  GatherRows,
  SoftmaxCrossEntropy,
};

const char* op_name(Op op);

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves.
  Var input(const std::string& name);
  Var constant(Tensor value);
  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  // Element-wise, broadcasting.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);

  // Element-wise unary.
  Var neg(Var a);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var square(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var softplus(Var a);
  Var reciprocal(Var a);
  // d/dx sqrt(x) at x == 0 is taken as 0.
  Var sqrt(Var a);
  // max(x, 0); derivative 0 at x <= 0.
  Var relu(Var a);
  Var lgamma(Var a);

  // Rank-2 (m x k)(k x n); either side may be rank 1 (vector).
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var reshape(Var a, Shape shape);
  // Inserts a size-1 axis at `axis` (0 <= axis <= rank).
  Var expand_dims(Var a, std::size_t axis);

  // Reductions. Axis reductions drop the axis unless keepdims.
  Var sum(Var a);
  Var sum(Var a, std::size_t axis, bool keepdims = false);
  Var mean(Var a);
  Var mean(Var a, std::size_t axis, bool keepdims = false);
  // Gradient flows to the first maximal element.
  Var max(Var a);
  Var max(Var a, std::size_t axis, bool keepdims = false);

  Var concat(std::span<const Var> parts, std::size_t axis);
  // Selects slices along axis 0.
  Var gather_rows(Var a, std::vector<std::size_t> rows);

  // Mean over rows of −log softmax(logits[i])[labels[i]]; logits is M x C.
  Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels);

  void mark_output(const std::string& name, Var v);

  // Binds inputs by name and evaluates all nodes. Returns the marked outputs.
  // Throws ShapeError naming the node on shape mismatch and Error naming the
  // node index when a value becomes non-finite.
  NamedTensors forward(const NamedTensors& inputs);

  // Contracts d(output)/d(input) with seed for every named input. Adjoints
  // are reset on every call.
  NamedTensors backward(Var output, const Tensor& seed);
  // Seeds the most recently added node.
  NamedTensors backward(const Tensor& seed);

  const Tensor& value(Var v) const;
  const Tensor& adjoint(Var v) const;
  bool evaluated() const { return evaluated_; }
  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string> input_names() const;
  Op op(Var v) const { return nodes_.at(v.id()).op; }

 private:
  struct Node {
    Op op = Op::Constant;
    std::vector<std::size_t> inputs;
    std::string name;
    double scalar = 0.0;
    std::size_t axis = 0;
    bool keepdims = false;
    std::vector<std::size_t> indices;
    Shape shape;
    bool requires_grad = false;
    Tensor value;
    Tensor adjoint;
  };

  Var push(Node node);
  Var unary(Op op, Var a, double scalar = 0.0);
  Var binary(Op op, Var a, Var b);
  void check_owner(Var v) const;
  void eval_node(std::size_t id, const NamedTensors& inputs);
  void backprop_node(std::size_t id);
  [[noreturn]] void shape_fail(std::size_t id, const std::string& what) const;

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> outputs_;
  bool evaluated_ = false;
};

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double c);
Var operator+(double c, Var a);
Var operator-(Var a, double c);
Var operator-(double c, Var a);
Var operator*(Var a, double c);
Var operator*(double c, Var a);
Var operator/(Var a, double c);
Var operator/(double c, Var a);

using GraphBuilder = std::function<Var(Graph&)>;

// Maximum over every coordinate of every input in `point` of
// |analytic − numeric| / max(1e−8, |numeric|), with central differences of
// width 2·step. The builder must return a scalar-valued node.
double grad_check(const GraphBuilder& build, const NamedTensors& point, double step);

}  // namespace gemcl::ad
