#include "fgl/graph.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace fgl {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

MapC as_mat(const Tensor& t) { return MapC(t.data.data(), t.shape.d[0], t.shape.d[1]); }
MapM as_mat(Tensor& t) { return MapM(t.data.data(), t.shape.d[0], t.shape.d[1]); }

// padded 3-D view dims: (p0, p1, p2) with leading dims = 1 for rank < 3
void padded_dims(const Shape& s, int64_t p[3]) {
  p[0] = p[1] = p[2] = 1;
  for (int i = 0; i < s.rank; i++) p[3 - s.rank + i] = s.d[i];
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

// ------------------------------ graph building ------------------------------

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return NodeId(nodes_.size() - 1);
}

NodeId Graph::check(NodeId id) const {
  if (id < 0 || id >= size()) throw std::invalid_argument("bad node id");
  return id;
}

NodeId Graph::leaf(const std::string& name, Shape shape) {
  for (auto& [nm, id] : leaves_)
    if (nm == name) throw std::invalid_argument("duplicate leaf name: " + name);
  Node n;
  n.op = Op::leaf;
  n.shape = shape;
  n.leaf_index = int(leaves_.size());
  NodeId id = push(n);
  leaves_.emplace_back(name, id);
  return id;
}

static void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b)
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
}

NodeId Graph::add(NodeId a, NodeId b) {
  require_same(shape_of(check(a)), shape_of(check(b)), "add");
  Node n{Op::add, a, b, shape_of(a)};
  return push(n);
}

NodeId Graph::sub(NodeId a, NodeId b) {
  require_same(shape_of(check(a)), shape_of(check(b)), "sub");
  Node n{Op::sub, a, b, shape_of(a)};
  return push(n);
}

NodeId Graph::mul(NodeId a, NodeId b) {
  require_same(shape_of(check(a)), shape_of(check(b)), "mul");
  Node n{Op::mul, a, b, shape_of(a)};
  return push(n);
}

NodeId Graph::divide(NodeId a, NodeId b) {
  require_same(shape_of(check(a)), shape_of(check(b)), "divide");
  Node n{Op::divide, a, b, shape_of(a)};
  return push(n);
}

NodeId Graph::scalar_mul(NodeId a, double c) {
  Node n{Op::scalar_mul, check(a), -1, shape_of(a)};
  n.c0 = c;
  return push(n);
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Shape& sa = shape_of(check(a));
  const Shape& sb = shape_of(check(b));
  if (sa.rank != 2 || sb.rank != 2)
    throw std::invalid_argument("matmul: rank-2 operands required");
  if (sa.d[1] != sb.d[0])
    throw std::invalid_argument("matmul: inner dims differ " + sa.str() + " vs " + sb.str());
  Node n{Op::matmul, a, b, Shape{sa.d[0], sb.d[1]}};
  return push(n);
}

NodeId Graph::transpose(NodeId a) {
  const Shape& s = shape_of(check(a));
  if (s.rank != 2) throw std::invalid_argument("transpose: rank-2 required");
  Node n{Op::transpose, a, -1, Shape{s.d[1], s.d[0]}};
  return push(n);
}

NodeId Graph::concat_last(NodeId a, NodeId b) {
  const Shape& sa = shape_of(check(a));
  const Shape& sb = shape_of(check(b));
  if (sa.rank != sb.rank) throw std::invalid_argument("concat_last: rank mismatch");
  for (int i = 0; i + 1 < sa.rank; i++)
    if (sa.d[i] != sb.d[i]) throw std::invalid_argument("concat_last: leading dims differ");
  Shape out = sa;
  out.d[out.rank - 1] = sa.d[sa.rank - 1] + sb.d[sb.rank - 1];
  Node n{Op::concat_last, a, b, out};
  return push(n);
}

NodeId Graph::slice(NodeId a, int axis, int start, int len) {
  const Shape& s = shape_of(check(a));
  if (axis < 0 || axis >= s.rank) throw std::invalid_argument("slice: bad axis");
  if (len <= 0 || start < 0 || start + len > s.d[axis])
    throw std::invalid_argument("slice: window out of range");
  Shape out = s;
  out.d[axis] = len;
  Node n{Op::slice, a, -1, out};
  n.axis = axis;
  n.start = start;
  n.len = len;
  return push(n);
}

NodeId Graph::mean(NodeId a) {
  Node n{Op::mean, check(a), -1, Shape{1}};
  return push(n);
}

NodeId Graph::sum(NodeId a) {
  Node n{Op::sum, check(a), -1, Shape{1}};
  return push(n);
}

NodeId Graph::softmax(NodeId a) {
  const Shape& s = shape_of(check(a));
  if (s.rank != 2) throw std::invalid_argument("softmax: rank-2 required");
  Node n{Op::softmax, a, -1, s};
  return push(n);
}

NodeId Graph::layernorm(NodeId a) {
  const Shape& s = shape_of(check(a));
  if (s.rank != 2) throw std::invalid_argument("layernorm: rank-2 required");
  Node n{Op::layernorm, a, -1, s};
  return push(n);
}

NodeId Graph::gelu(NodeId a) {
  Node n{Op::gelu, check(a), -1, shape_of(a)};
  return push(n);
}

NodeId Graph::sqerr(NodeId a, NodeId b) {
  require_same(shape_of(check(a)), shape_of(check(b)), "sqerr");
  Node n{Op::sqerr, a, b, shape_of(a)};
  return push(n);
}

NodeId Graph::frob(NodeId a) {
  Node n{Op::frob, check(a), -1, Shape{1}};
  return push(n);
}

NodeId Graph::repeat_rows(NodeId a, int count) {
  const Shape& s = shape_of(check(a));
  if (s.rank != 2 || s.d[0] != 1) throw std::invalid_argument("repeat_rows: input must be (1 x d)");
  if (count < 1) throw std::invalid_argument("repeat_rows: count must be >= 1");
  Node n{Op::repeat_rows, a, -1, Shape{count, s.d[1]}};
  n.len = count;
  return push(n);
}

NodeId Graph::exp(NodeId a) {
  Node n{Op::exp_, check(a), -1, shape_of(a)};
  return push(n);
}

NodeId Graph::sqrt(NodeId a) {
  Node n{Op::sqrt_, check(a), -1, shape_of(a)};
  return push(n);
}

NodeId Graph::minimum(NodeId a, NodeId b) {
  require_same(shape_of(check(a)), shape_of(check(b)), "minimum");
  Node n{Op::minimum, a, b, shape_of(a)};
  return push(n);
}

NodeId Graph::clamp(NodeId a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  Node n{Op::clamp, check(a), -1, shape_of(a)};
  n.c0 = lo;
  n.c1 = hi;
  return push(n);
}

// ------------------------------ forward -------------------------------------

const Tensor& Tape::forward(const Bindings& bindings, NodeId out) {
  if (out < 0 || out >= g_->size()) throw std::invalid_argument("forward: bad output node");
  val_.resize(size_t(g_->size()));
  leafv_.assign(size_t(g_->size()), nullptr);

  for (NodeId i = 0; i <= out; i++) {
    const Node& n = g_->node(i);
    if (n.op == Op::leaf) {
      const std::string& name = g_->leaves()[size_t(n.leaf_index)].first;
      auto it = bindings.find(name);
      if (it == bindings.end() || it->second == nullptr)
        throw std::invalid_argument("forward: unbound leaf '" + name + "'");
      if (it->second->shape != n.shape)
        throw std::invalid_argument("forward: leaf '" + name + "' shape " + it->second->shape.str() +
                                    " does not match declared " + n.shape.str());
      leafv_[size_t(i)] = it->second;
      continue;
    }

    Tensor& y = val_[size_t(i)];
    if (y.shape != n.shape) y = Tensor(n.shape);
    const Tensor& A = V(n.a);
    const int64_t N = n.shape.numel();

    switch (n.op) {
      case Op::add: {
        const Tensor& B = V(n.b);
        for (int64_t k = 0; k < N; k++) y.data[k] = A.data[k] + B.data[k];
        break;
      }
      case Op::sub: {
        const Tensor& B = V(n.b);
        for (int64_t k = 0; k < N; k++) y.data[k] = A.data[k] - B.data[k];
        break;
      }
      case Op::mul: {
        const Tensor& B = V(n.b);
        for (int64_t k = 0; k < N; k++) y.data[k] = A.data[k] * B.data[k];
        break;
      }
      case Op::divide: {
        const Tensor& B = V(n.b);
        for (int64_t k = 0; k < N; k++) y.data[k] = A.data[k] / B.data[k];
        break;
      }
      case Op::scalar_mul:
        for (int64_t k = 0; k < N; k++) y.data[k] = n.c0 * A.data[k];
        break;
      case Op::matmul:
        as_mat(y).noalias() = as_mat(A) * as_mat(V(n.b));
        break;
      case Op::transpose:
        as_mat(y).noalias() = as_mat(A).transpose();
        break;
      case Op::concat_last: {
        const Tensor& B = V(n.b);
        const int64_t rows = n.shape.rows();
        const int64_t ca = A.shape.cols(), cb = B.shape.cols(), cy = n.shape.cols();
        for (int64_t r = 0; r < rows; r++) {
          const double* pa = A.data.data() + r * ca;
          const double* pb = B.data.data() + r * cb;
          double* py = y.data.data() + r * cy;
          for (int64_t k = 0; k < ca; k++) py[k] = pa[k];
          for (int64_t k = 0; k < cb; k++) py[ca + k] = pb[k];
        }
        break;
      }
      case Op::slice: {
        int64_t p[3], q[3];
        padded_dims(A.shape, p);
        padded_dims(n.shape, q);
        const int pax = 3 - A.shape.rank + n.axis;
        int64_t off[3] = {0, 0, 0};
        off[pax] = n.start;
        for (int64_t i0 = 0; i0 < q[0]; i0++)
          for (int64_t i1 = 0; i1 < q[1]; i1++)
            for (int64_t i2 = 0; i2 < q[2]; i2++)
              y.data[(i0 * q[1] + i1) * q[2] + i2] =
                  A.data[((i0 + off[0]) * p[1] + (i1 + off[1])) * p[2] + (i2 + off[2])];
        break;
      }
      case Op::mean: {
        double s = 0;
        for (double v : A.data) s += v;
        y.data[0] = s / double(A.numel());
        break;
      }
      case Op::sum: {
        double s = 0;
        for (double v : A.data) s += v;
        y.data[0] = s;
        break;
      }
      case Op::softmax: {
        const int64_t rows = A.shape.d[0], cols = A.shape.d[1];
        for (int64_t r = 0; r < rows; r++) {
          const double* x = A.data.data() + r * cols;
          double* o = y.data.data() + r * cols;
          double mx = x[0];
          for (int64_t k = 1; k < cols; k++) mx = std::max(mx, x[k]);
          double s = 0;
          for (int64_t k = 0; k < cols; k++) {
            o[k] = std::exp(x[k] - mx);
            s += o[k];
          }
          for (int64_t k = 0; k < cols; k++) o[k] /= s;
        }
        break;
      }
      case Op::layernorm: {
        const int64_t rows = A.shape.d[0], cols = A.shape.d[1];
        for (int64_t r = 0; r < rows; r++) {
          const double* x = A.data.data() + r * cols;
          double* o = y.data.data() + r * cols;
          double m = 0;
          for (int64_t k = 0; k < cols; k++) m += x[k];
          m /= double(cols);
          double v = 0;
          for (int64_t k = 0; k < cols; k++) v += (x[k] - m) * (x[k] - m);
          v /= double(cols);
          const double inv = 1.0 / std::sqrt(v + kLayerNormEps);
          for (int64_t k = 0; k < cols; k++) o[k] = (x[k] - m) * inv;
        }
        break;
      }
      case Op::gelu:
        for (int64_t k = 0; k < N; k++) {
          const double x = A.data[k];
          y.data[k] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
        }
        break;
      case Op::sqerr: {
        const Tensor& B = V(n.b);
        for (int64_t k = 0; k < N; k++) {
          const double d = A.data[k] - B.data[k];
          y.data[k] = d * d;
        }
        break;
      }
      case Op::frob: {
        double s = 0;
        for (double v : A.data) s += v * v;
        y.data[0] = std::sqrt(s);
        break;
      }
      case Op::repeat_rows: {
        const int64_t cols = A.shape.d[1];
        for (int64_t r = 0; r < n.len; r++)
          for (int64_t k = 0; k < cols; k++) y.data[r * cols + k] = A.data[k];
        break;
      }
      case Op::exp_:
        for (int64_t k = 0; k < N; k++) y.data[k] = std::exp(A.data[k]);
        break;
      case Op::sqrt_:
        for (int64_t k = 0; k < N; k++) y.data[k] = std::sqrt(A.data[k]);
        break;
      case Op::minimum: {
        const Tensor& B = V(n.b);
        for (int64_t k = 0; k < N; k++) y.data[k] = std::min(A.data[k], B.data[k]);
        break;
      }
      case Op::clamp:
        for (int64_t k = 0; k < N; k++) y.data[k] = std::min(std::max(A.data[k], n.c0), n.c1);
        break;
      case Op::leaf:
        break;
    }
  }
  have_forward_ = true;
  fwd_out_ = out;
  return V(out);
}

// ------------------------------ backward ------------------------------------

void Tape::backward(NodeId out, const Tensor* seed_grad) {
  if (!have_forward_ || out > fwd_out_)
    throw std::logic_error("backward: forward() has not covered this output");
  grad_.assign(size_t(fwd_out_ + 1), Tensor());
  for (NodeId i = 0; i <= out; i++) grad_[size_t(i)] = Tensor(g_->node(i).shape);

  if (seed_grad) {
    if (seed_grad->shape != g_->shape_of(out))
      throw std::invalid_argument("backward: seed gradient shape mismatch");
    grad_[size_t(out)] = *seed_grad;
  } else {
    if (g_->shape_of(out).numel() != 1)
      throw std::invalid_argument("backward: output is not scalar and no seed gradient given");
    grad_[size_t(out)].data[0] = 1.0;
  }

  for (NodeId i = out; i >= 0; i--) {
    const Node& n = g_->node(i);
    if (n.op == Op::leaf) continue;
    const Tensor& G = grad_[size_t(i)];
    const Tensor& A = V(n.a);
    Tensor& dA = grad_[size_t(n.a)];
    const int64_t N = n.shape.numel();

    switch (n.op) {
      case Op::add: {
        Tensor& dB = grad_[size_t(n.b)];
        for (int64_t k = 0; k < N; k++) {
          dA.data[k] += G.data[k];
          dB.data[k] += G.data[k];
        }
        break;
      }
      case Op::sub: {
        Tensor& dB = grad_[size_t(n.b)];
        for (int64_t k = 0; k < N; k++) {
          dA.data[k] += G.data[k];
          dB.data[k] -= G.data[k];
        }
        break;
      }
      case Op::mul: {
        const Tensor& B = V(n.b);
        Tensor& dB = grad_[size_t(n.b)];
        for (int64_t k = 0; k < N; k++) {
          dA.data[k] += G.data[k] * B.data[k];
          dB.data[k] += G.data[k] * A.data[k];
        }
        break;
      }
      case Op::divide: {
        const Tensor& B = V(n.b);
        Tensor& dB = grad_[size_t(n.b)];
        for (int64_t k = 0; k < N; k++) {
          dA.data[k] += G.data[k] / B.data[k];
          dB.data[k] -= G.data[k] * A.data[k] / (B.data[k] * B.data[k]);
        }
        break;
      }
      case Op::scalar_mul:
        for (int64_t k = 0; k < N; k++) dA.data[k] += n.c0 * G.data[k];
        break;
      case Op::matmul: {
        const Tensor& B = V(n.b);
        Tensor& dB = grad_[size_t(n.b)];
        as_mat(dA).noalias() += as_mat(G) * as_mat(B).transpose();
        as_mat(dB).noalias() += as_mat(A).transpose() * as_mat(G);
        break;
      }
      case Op::transpose:
        as_mat(dA).noalias() += as_mat(G).transpose();
        break;
      case Op::concat_last: {
        const Tensor& B = V(n.b);
        Tensor& dB = grad_[size_t(n.b)];
        const int64_t rows = n.shape.rows();
        const int64_t ca = A.shape.cols(), cb = B.shape.cols(), cy = n.shape.cols();
        for (int64_t r = 0; r < rows; r++) {
          const double* pg = G.data.data() + r * cy;
          double* pa = dA.data.data() + r * ca;
          double* pb = dB.data.data() + r * cb;
          for (int64_t k = 0; k < ca; k++) pa[k] += pg[k];
          for (int64_t k = 0; k < cb; k++) pb[k] += pg[ca + k];
        }
        break;
      }
      case Op::slice: {
        int64_t p[3], q[3];
        padded_dims(A.shape, p);
        padded_dims(n.shape, q);
        const int pax = 3 - A.shape.rank + n.axis;
        int64_t off[3] = {0, 0, 0};
        off[pax] = n.start;
        for (int64_t i0 = 0; i0 < q[0]; i0++)
          for (int64_t i1 = 0; i1 < q[1]; i1++)
            for (int64_t i2 = 0; i2 < q[2]; i2++)
              dA.data[((i0 + off[0]) * p[1] + (i1 + off[1])) * p[2] + (i2 + off[2])] +=
                  G.data[(i0 * q[1] + i1) * q[2] + i2];
        break;
      }
      case Op::mean: {
        const double g = G.data[0] / double(A.numel());
        for (int64_t k = 0; k < A.numel(); k++) dA.data[k] += g;
        break;
      }
      case Op::sum: {
        const double g = G.data[0];
        for (int64_t k = 0; k < A.numel(); k++) dA.data[k] += g;
        break;
      }
      case Op::softmax: {
        const Tensor& Y = val_[size_t(i)];
        const int64_t rows = n.shape.d[0], cols = n.shape.d[1];
        for (int64_t r = 0; r < rows; r++) {
          const double* y = Y.data.data() + r * cols;
          const double* g = G.data.data() + r * cols;
          double* da = dA.data.data() + r * cols;
          double dot = 0;
          for (int64_t k = 0; k < cols; k++) dot += g[k] * y[k];
          for (int64_t k = 0; k < cols; k++) da[k] += y[k] * (g[k] - dot);
        }
        break;
      }
      case Op::layernorm: {
        const Tensor& Y = val_[size_t(i)];
        const int64_t rows = n.shape.d[0], cols = n.shape.d[1];
        for (int64_t r = 0; r < rows; r++) {
          const double* x = A.data.data() + r * cols;
          const double* y = Y.data.data() + r * cols;
          const double* g = G.data.data() + r * cols;
          double* da = dA.data.data() + r * cols;
          double m = 0;
          for (int64_t k = 0; k < cols; k++) m += x[k];
          m /= double(cols);
          double v = 0;
          for (int64_t k = 0; k < cols; k++) v += (x[k] - m) * (x[k] - m);
          v /= double(cols);
          const double inv = 1.0 / std::sqrt(v + kLayerNormEps);
          double gm = 0, gym = 0;
          for (int64_t k = 0; k < cols; k++) {
            gm += g[k];
            gym += g[k] * y[k];
          }
          gm /= double(cols);
          gym /= double(cols);
          for (int64_t k = 0; k < cols; k++) da[k] += inv * (g[k] - gm - y[k] * gym);
        }
        break;
      }
      case Op::gelu:
        for (int64_t k = 0; k < N; k++) {
          const double x = A.data[k];
          const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
          dA.data[k] += G.data[k] * (cdf + x * pdf);
        }
        break;
      case Op::sqerr: {
        const Tensor& B = V(n.b);
        Tensor& dB = grad_[size_t(n.b)];
        for (int64_t k = 0; k < N; k++) {
          const double d2 = 2.0 * (A.data[k] - B.data[k]) * G.data[k];
          dA.data[k] += d2;
          dB.data[k] -= d2;
        }
        break;
      }
      case Op::frob: {
        const double y = val_[size_t(i)].data[0];
        if (y > 0) {
          const double g = G.data[0] / y;
          for (int64_t k = 0; k < A.numel(); k++) dA.data[k] += g * A.data[k];
        }
        break;
      }
      case Op::repeat_rows: {
        const int64_t cols = A.shape.d[1];
        for (int64_t r = 0; r < n.len; r++)
          for (int64_t k = 0; k < cols; k++) dA.data[k] += G.data[r * cols + k];
        break;
      }
      case Op::exp_: {
        const Tensor& Y = val_[size_t(i)];
        for (int64_t k = 0; k < N; k++) dA.data[k] += G.data[k] * Y.data[k];
        break;
      }
      case Op::sqrt_: {
        const Tensor& Y = val_[size_t(i)];
        for (int64_t k = 0; k < N; k++)
          if (Y.data[k] > 0.0) dA.data[k] += G.data[k] * 0.5 / Y.data[k];
        break;
      }
      case Op::minimum: {
        const Tensor& B = V(n.b);
        Tensor& dB = grad_[size_t(n.b)];
        for (int64_t k = 0; k < N; k++) {
          if (A.data[k] <= B.data[k])
            dA.data[k] += G.data[k];
          else
            dB.data[k] += G.data[k];
        }
        break;
      }
      case Op::clamp:
        for (int64_t k = 0; k < N; k++)
          if (A.data[k] >= n.c0 && A.data[k] <= n.c1) dA.data[k] += G.data[k];
        break;
      case Op::leaf:
        break;
    }
  }
}

std::map<std::string, Tensor> Tape::leaf_grads() const {
  std::map<std::string, Tensor> out;
  for (auto& [name, id] : g_->leaves()) {
    if (size_t(id) < grad_.size() && grad_[size_t(id)].numel() > 0)
      out[name] = grad_[size_t(id)];
    else
      out[name] = Tensor(g_->shape_of(id));
  }
  return out;
}

// ------------------------------ free functions ------------------------------

Tensor forward(const Graph& g, const Bindings& bindings, NodeId out) {
  Tape t(g);
  return t.forward(bindings, out);
}

std::map<std::string, Tensor> backward(const Graph& g, const Bindings& bindings, NodeId out,
                                       const Tensor* seed_grad) {
  Tape t(g);
  t.forward(bindings, out);
  t.backward(out, seed_grad);
  return t.leaf_grads();
}

double grad_check(const Graph& g, const Bindings& bindings, NodeId out, double fd_step) {
  if (g.shape_of(out).numel() != 1)
    throw std::invalid_argument("grad_check: output must be scalar");

  // analytic gradients at the binding point
  auto analytic = backward(g, bindings, out);

  // mutable copies of every bound leaf, re-bound by pointer
  std::map<std::string, Tensor> work;
  for (auto& [name, ptr] : bindings) work[name] = *ptr;
  Bindings bound;
  for (auto& [name, t] : work) bound[name] = &t;

  Tape tape(g);
  double worst = 0;
  for (auto& [name, id] : g.leaves()) {
    Tensor& t = work[name];
    const Tensor& a = analytic[name];
    for (int64_t k = 0; k < t.numel(); k++) {
      const double keep = t.data[size_t(k)];
      t.data[size_t(k)] = keep + fd_step;
      const double fp = tape.forward(bound, out).value();
      t.data[size_t(k)] = keep - fd_step;
      const double fm = tape.forward(bound, out).value();
      t.data[size_t(k)] = keep;
      const double fd = (fp - fm) / (2.0 * fd_step);
      const double an = a.data[size_t(k)];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace fgl
