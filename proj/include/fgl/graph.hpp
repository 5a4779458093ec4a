#pragma once
// Reverse-mode autodiff over a static op graph. Nodes are appended in
// evaluation order (parents always precede children), shapes are fixed and
// validated at build time, and leaves are bound to tensors at execution time.
//
// Broadcasting is deliberately absent except scalar*tensor; rank changes go
// through explicit ops (repeat_rows, slice, concat_last).
#include <map>
#include <string>
#include <vector>

#include "fgl/tensor.hpp"

namespace fgl {

using NodeId = int;

enum class Op : uint8_t {
  leaf,
  add,
  sub,
  mul,        // elementwise
  divide,     // elementwise
  scalar_mul, // constant * tensor
  matmul,     // 2-D only
  transpose,  // 2-D only
  concat_last,
  slice,      // any axis, static (start, len)
  mean,       // full reduction -> (1)
  sum,        // full reduction -> (1)
  softmax,    // 2-D, along last dim
  layernorm,  // 2-D, along last dim, pre-affine, eps 1e-5
  gelu,       // exact erf form
  sqerr,      // elementwise (a-b)^2
  frob,       // Frobenius norm -> (1)
  repeat_rows,// (1 x d) -> (n x d)
  exp_,
  sqrt_,      // elementwise; zero subgradient at 0
  minimum,    // elementwise min; ties take the first argument's gradient
  clamp,      // static [lo, hi]; zero gradient outside
};

struct Node {
  Op op = Op::leaf;
  NodeId a = -1, b = -1;
  Shape shape;
  double c0 = 0.0, c1 = 0.0;     // scalar_mul factor / clamp bounds
  int axis = 0, start = 0, len = 0;  // slice attrs / repeat_rows count in len
  int leaf_index = -1;           // leaves only
};

constexpr double kLayerNormEps = 1e-5;

// Leaf tensors are passed by pointer; the graph never owns numeric state.
using Bindings = std::map<std::string, const Tensor*>;

class Graph {
public:
  NodeId leaf(const std::string& name, Shape shape);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId divide(NodeId a, NodeId b);
  NodeId scalar_mul(NodeId a, double c);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId concat_last(NodeId a, NodeId b);
  NodeId slice(NodeId a, int axis, int start, int len);
  NodeId mean(NodeId a);
  NodeId sum(NodeId a);
  NodeId softmax(NodeId a);
  NodeId layernorm(NodeId a);
  NodeId gelu(NodeId a);
  NodeId sqerr(NodeId a, NodeId b);
  NodeId frob(NodeId a);
  NodeId repeat_rows(NodeId a, int n);
  NodeId exp(NodeId a);
  NodeId sqrt(NodeId a);
  NodeId minimum(NodeId a, NodeId b);
  NodeId clamp(NodeId a, double lo, double hi);

  int size() const { return int(nodes_.size()); }
  const Node& node(NodeId id) const { return nodes_[size_t(id)]; }
  const Shape& shape_of(NodeId id) const { return nodes_[size_t(id)].shape; }
  const std::vector<std::pair<std::string, NodeId>>& leaves() const { return leaves_; }

private:
  NodeId push(Node n);
  NodeId check(NodeId id) const;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, NodeId>> leaves_;
};

// Reusable workspace for one graph: values and adjoints per node.
class Tape {
public:
  explicit Tape(const Graph& g) : g_(&g) {}

  // Evaluates every node; returns the value of `out`.
  const Tensor& forward(const Bindings& bindings, NodeId out);
  // Seeds d(out) and accumulates adjoints down to the leaves. `out` must be
  // scalar unless an explicit seed is given. Requires a prior forward().
  void backward(NodeId out, const Tensor* seed_grad = nullptr);

  const Tensor& value(NodeId id) const { return V(id); }
  const Tensor& grad(NodeId id) const { return grad_[size_t(id)]; }
  // Gradients keyed by leaf name.
  std::map<std::string, Tensor> leaf_grads() const;

private:
  // leaves alias their bound tensor, interior nodes own their value
  const Tensor& V(NodeId id) const {
    const Tensor* p = leafv_[size_t(id)];
    return p ? *p : val_[size_t(id)];
  }
  const Graph* g_;
  std::vector<Tensor> val_, grad_;
  std::vector<const Tensor*> leafv_;
  bool have_forward_ = false;
  NodeId fwd_out_ = -1;
};

Tensor forward(const Graph& g, const Bindings& bindings, NodeId out);
std::map<std::string, Tensor> backward(const Graph& g, const Bindings& bindings, NodeId out,
                                       const Tensor* seed_grad = nullptr);

// Max over all leaf entries of |analytic - central_fd| / max(|analytic|, |fd|, 1e-8).
double grad_check(const Graph& g, const Bindings& bindings, NodeId out, double fd_step);

}  // namespace fgl
