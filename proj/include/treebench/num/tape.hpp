#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "treebench/errors.hpp"
#include "treebench/num/parameter.hpp"
#include "treebench/num/tensor.hpp"

namespace treebench::num {

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMulScalar,
  kAffine,
  kMatmul,
  kConcat,
  kSlice,
  kReshape,
  kSigmoid,
  kTanh,
  kRelu,
  kExp,
  kSoftmax,
  kLogSoftmax,
  kCumsum,
  kSum,
  kMean,
  kEmbedding,
  kCrossEntropy,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kAffine: return "affine";
    case Op::kMatmul: return "matmul";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kReshape: return "reshape";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kExp: return "exp";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kCumsum: return "cumulative_sum";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kEmbedding: return "embedding_lookup";
    case Op::kCrossEntropy: return "cross_entropy_with_logits";
  }
  return "?";
}

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
};

namespace detail {

// Iteration over 1-D lines of a rank<=2 tensor along `axis`.
struct Lines {
  std::size_t count, len, stride;
  std::size_t outer_stride;  // distance between consecutive line starts
};

inline Lines lines_along(const Shape& s, int axis) {
  if (s.rank() == 1) {
    if (axis != 0) throw ContractError("axis out of range for vector");
    return {1, s[0], 1, 0};
  }
  if (s.rank() == 2) {
    if (axis == 1) return {s[0], s[1], 1, s[1]};
    if (axis == 0) return {s[1], s[0], s[1], 1};
    throw ContractError("axis out of range for matrix");
  }
  throw ContractError("axis reduction on a scalar");
}

using ConstMat = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutMat = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstVec = Eigen::Map<const Eigen::VectorXd>;
using MutVec = Eigen::Map<Eigen::VectorXd>;

}  // namespace detail

// Define-by-run record of primitive applications for reverse-mode
// differentiation. Nodes are appended in execution order, so every input of
// node i has an index < i. A tape is single-threaded; use one per worker.
class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void reset() {
    nodes_.clear();
    param_nodes_.clear();
    consumed_ = false;
  }

  // ---- leaves -------------------------------------------------------------

  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.op = Op::kLeaf;
    n.requires_grad = requires_grad;
    n.value = std::move(value);
    return push(std::move(n));
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  // Leaf bound to a trainable parameter; created once per tape.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end())
      return {this, it->second};
    Node n;
    n.op = Op::kLeaf;
    n.requires_grad = true;
    n.value = p.value;
    n.param = &p;
    Var v = push(std::move(n));
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  // Same value, cut from the graph.
  Var detach(Var x) { return constant(value(x)); }

  const Tensor& value(Var v) const { return node(v).value; }

  // ---- elementwise ----------------------------------------------------------

  Var add(Var a, Var b) { return binary(Op::kAdd, a, b, [](double x, double y) { return x + y; }); }
  Var sub(Var a, Var b) { return binary(Op::kSub, a, b, [](double x, double y) { return x - y; }); }
  Var mul(Var a, Var b) { return binary(Op::kMul, a, b, [](double x, double y) { return x * y; }); }

  // x * s where s is a scalar-shaped Var.
  Var mul_scalar(Var x, Var s) {
    const Tensor& sv = value(s);
    if (sv.size() != 1) throw ContractError("mul_scalar: second operand must be scalar");
    Tensor out = value(x);
    out *= sv[0];
    return record(Op::kMulScalar, {x.id, s.id}, std::move(out));
  }

  // a * x + b with constant a, b.
  Var affine(Var x, double a, double b) {
    Tensor out = value(x);
    for (double& v : out.data()) v = a * v + b;
    Var r = record(Op::kAffine, {x.id}, std::move(out));
    nodes_[r.id].farg = a;
    return r;
  }
  Var scale(Var x, double a) { return affine(x, a, 0.0); }
  Var neg(Var x) { return affine(x, -1.0, 0.0); }
  Var one_minus(Var x) { return affine(x, -1.0, 1.0); }

  Var sigmoid(Var x) {
    return unary(Op::kSigmoid, x, [](double v) {
      return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    });
  }
  Var tanh(Var x) { return unary(Op::kTanh, x, [](double v) { return std::tanh(v); }); }
  Var relu(Var x) { return unary(Op::kRelu, x, [](double v) { return v > 0 ? v : 0.0; }); }
  Var exp(Var x) { return unary(Op::kExp, x, [](double v) { return std::exp(v); }); }

  // ---- linear algebra / structure --------------------------------------------

  // (m,k)x(k,n) -> (m,n); (m,k)x(k) -> (m).
  Var matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.shape().rank() != 2 || (B.shape().rank() != 1 && B.shape().rank() != 2))
      throw ContractError("matmul: expected matrix x (matrix|vector), got " +
                          A.shape().str() + " x " + B.shape().str());
    const std::size_t m = A.shape()[0], k = A.shape()[1];
    if (B.shape()[0] != k)
      throw ContractError("matmul: inner dimension mismatch " + A.shape().str() +
                          " x " + B.shape().str());
    detail::ConstMat Am(A.raw(), m, k);
    if (B.shape().rank() == 1) {
      Tensor out(Shape::vector(m));
      detail::MutVec(out.raw(), m).noalias() = Am * detail::ConstVec(B.raw(), k);
      return record(Op::kMatmul, {a.id, b.id}, std::move(out));
    }
    const std::size_t n = B.shape()[1];
    Tensor out(Shape::matrix(m, n));
    detail::MutMat(out.raw(), m, n).noalias() = Am * detail::ConstMat(B.raw(), k, n);
    return record(Op::kMatmul, {a.id, b.id}, std::move(out));
  }

  // Concatenate vectors end to end, or matrices along `axis`.
  Var concat(std::span<const Var> parts, int axis = 0) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Shape& s0 = value(parts[0]).shape();
    std::vector<int> ids;
    ids.reserve(parts.size());
    if (s0.rank() == 1) {
      if (axis != 0) throw ContractError("concat: vectors only concatenate along axis 0");
      std::size_t n = 0;
      for (Var p : parts) {
        if (value(p).shape().rank() != 1) throw ContractError("concat: rank mismatch");
        n += value(p).size();
        ids.push_back(p.id);
      }
      Tensor out(Shape::vector(n));
      std::size_t off = 0;
      for (Var p : parts) {
        const Tensor& t = value(p);
        std::copy(t.raw(), t.raw() + t.size(), out.raw() + off);
        off += t.size();
      }
      Var r = record(Op::kConcat, ids, std::move(out));
      nodes_[r.id].iarg = 0;
      return r;
    }
    if (s0.rank() != 2 || (axis != 0 && axis != 1))
      throw ContractError("concat: unsupported rank/axis");
    std::size_t rows = 0, cols = 0;
    for (Var p : parts) {
      const Shape& s = value(p).shape();
      if (s.rank() != 2) throw ContractError("concat: rank mismatch");
      if (axis == 0) {
        if (s[1] != s0[1]) throw ContractError("concat: column mismatch");
        rows += s[0];
        cols = s0[1];
      } else {
        if (s[0] != s0[0]) throw ContractError("concat: row mismatch");
        cols += s[1];
        rows = s0[0];
      }
      ids.push_back(p.id);
    }
    Tensor out(Shape::matrix(rows, cols));
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor& t = value(p);
      const std::size_t r = t.shape()[0], c = t.shape()[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          if (axis == 0)
            out.at(off + i, j) = t.at(i, j);
          else
            out.at(i, off + j) = t.at(i, j);
        }
      off += axis == 0 ? r : c;
    }
    Var r = record(Op::kConcat, ids, std::move(out));
    nodes_[r.id].iarg = axis;
    return r;
  }
  Var concat(std::initializer_list<Var> parts, int axis = 0) {
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
  }

  // Elements [offset, offset+len) of a vector, or rows of a matrix.
  Var slice(Var x, std::size_t offset, std::size_t len) {
    const Tensor& t = value(x);
    if (t.shape().rank() == 0) throw ContractError("slice: scalar input");
    const std::size_t n = t.shape()[0];
    if (offset + len > n || len == 0)
      throw ContractError("slice: range [" + std::to_string(offset) + "," +
                          std::to_string(offset + len) + ") out of " + t.shape().str());
    const std::size_t row = t.shape().rank() == 2 ? t.shape()[1] : 1;
    Shape s = t.shape().rank() == 2 ? Shape::matrix(len, row) : Shape::vector(len);
    Tensor out(s, std::vector<double>(t.raw() + offset * row, t.raw() + (offset + len) * row));
    Var r = record(Op::kSlice, {x.id}, std::move(out));
    nodes_[r.id].iarg = static_cast<int>(offset * row);
    return r;
  }
  Var element(Var x, std::size_t i) { return reshape(slice(x, i, 1), Shape::scalar()); }

  Var reshape(Var x, Shape s) {
    const Tensor& t = value(x);
    if (s.numel() != t.size()) throw ContractError("reshape: element count mismatch");
    Tensor out(s, std::vector<double>(t.data().begin(), t.data().end()));
    return record(Op::kReshape, {x.id}, std::move(out));
  }

  // ---- reductions / normalizers ---------------------------------------------

  Var softmax(Var x, int axis = 0) {
    Tensor out = value(x);
    const auto L = detail::lines_along(out.shape(), axis);
    for (std::size_t l = 0; l < L.count; ++l) {
      double* p = out.raw() + l * L.outer_stride;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < L.len; ++i) mx = std::max(mx, p[i * L.stride]);
      double z = 0;
      for (std::size_t i = 0; i < L.len; ++i) {
        p[i * L.stride] = std::exp(p[i * L.stride] - mx);
        z += p[i * L.stride];
      }
      for (std::size_t i = 0; i < L.len; ++i) p[i * L.stride] /= z;
    }
    Var r = record(Op::kSoftmax, {x.id}, std::move(out));
    nodes_[r.id].iarg = axis;
    return r;
  }

  Var log_softmax(Var x, int axis = 0) {
    Tensor out = value(x);
    const auto L = detail::lines_along(out.shape(), axis);
    for (std::size_t l = 0; l < L.count; ++l) {
      double* p = out.raw() + l * L.outer_stride;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < L.len; ++i) mx = std::max(mx, p[i * L.stride]);
      double z = 0;
      for (std::size_t i = 0; i < L.len; ++i) z += std::exp(p[i * L.stride] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t i = 0; i < L.len; ++i) p[i * L.stride] -= lse;
    }
    Var r = record(Op::kLogSoftmax, {x.id}, std::move(out));
    nodes_[r.id].iarg = axis;
    return r;
  }

  // Running sum along axis; additions proceed strictly in index order.
  Var cumsum(Var x, int axis = 0) {
    Tensor out = value(x);
    const auto L = detail::lines_along(out.shape(), axis);
    for (std::size_t l = 0; l < L.count; ++l) {
      double* p = out.raw() + l * L.outer_stride;
      for (std::size_t i = 1; i < L.len; ++i) p[i * L.stride] += p[(i - 1) * L.stride];
    }
    Var r = record(Op::kCumsum, {x.id}, std::move(out));
    nodes_[r.id].iarg = axis;
    return r;
  }

  // axis = -1 reduces everything to a scalar.
  Var sum(Var x, int axis = -1) { return reduce(Op::kSum, x, axis); }
  Var mean(Var x, int axis = -1) { return reduce(Op::kMean, x, axis); }

  Var embedding_lookup(Var table, std::size_t id) {
    const Tensor& t = value(table);
    if (t.shape().rank() != 2) throw ContractError("embedding_lookup: table must be a matrix");
    if (id >= t.shape()[0])
      throw ContractError("embedding_lookup: id " + std::to_string(id) +
                          " out of vocabulary of size " + std::to_string(t.shape()[0]));
    const std::size_t d = t.shape()[1];
    Tensor out(Shape::vector(d), std::vector<double>(t.raw() + id * d, t.raw() + (id + 1) * d));
    Var r = record(Op::kEmbedding, {table.id}, std::move(out));
    nodes_[r.id].iarg = static_cast<int>(id);
    return r;
  }

  // -log softmax(logits)[label]; scalar.
  Var cross_entropy_with_logits(Var logits, std::size_t label) {
    const Tensor& z = value(logits);
    if (z.shape().rank() != 1) throw ContractError("cross_entropy_with_logits: logits must be a vector");
    if (label >= z.size()) throw ContractError("cross_entropy_with_logits: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : z.data()) mx = std::max(mx, v);
    double s = 0;
    for (double v : z.data()) s += std::exp(v - mx);
    const double loss = mx + std::log(s) - z[label];
    Var r = record(Op::kCrossEntropy, {logits.id}, Tensor::scalar(loss));
    nodes_[r.id].iarg = static_cast<int>(label);
    return r;
  }

  // ---- differentiation -------------------------------------------------------

  // Populates gradients of `loss` w.r.t. every node that requires grad and adds
  // parameter-leaf gradients into Parameter::grad. The tape is consumed.
  void backward(Var loss) {
    if (loss.tape != this || loss.id < 0 || static_cast<std::size_t>(loss.id) >= nodes_.size())
      throw ContractError("backward: loss was not produced on this tape");
    if (consumed_) throw ContractError("backward: tape already consumed; reset() first");
    if (value(loss).size() != 1) throw ContractError("backward: loss must be scalar-shaped");
    consumed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_ref(loss.id).fill(1.0);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.has_grad || n.op == Op::kLeaf) continue;
      propagate(i);
    }
    for (auto& [p, id] : param_nodes_) {
      Node& n = nodes_[id];
      if (!n.has_grad) continue;
      p->grad += n.grad;
      p->has_grad = true;
    }
  }

  // Gradient accumulated at `v` by the last backward (zeros if unreached).
  Tensor grad(Var v) const {
    const Node& n = node(v);
    return n.has_grad ? n.grad : Tensor::zeros_like(n.value);
  }

 private:
  struct Node {
    Op op = Op::kLeaf;
    bool requires_grad = false;
    bool has_grad = false;
    int in[2] = {-1, -1};
    std::vector<int> many;  // concat inputs
    int iarg = 0;
    double farg = 0;
    Tensor value;
    Tensor grad;
    Parameter* param = nullptr;
  };

  const Node& node(Var v) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ContractError("Var does not belong to this tape");
    return nodes_[v.id];
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  Var record(Op op, std::initializer_list<int> inputs, Tensor out) {
    return record(op, std::vector<int>(inputs), std::move(out));
  }
  Var record(Op op, const std::vector<int>& inputs, Tensor out) {
    if (!out.all_finite())
      throw NumericError(std::string(op_name(op)) + " produced a non-finite value");
    Node n;
    n.op = op;
    n.value = std::move(out);
    for (int id : inputs) n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
    if (op == Op::kConcat) {
      n.many = inputs;
    } else {
      for (std::size_t i = 0; i < inputs.size(); ++i) n.in[i] = inputs[i];
    }
    return push(std::move(n));
  }

  template <class F>
  Var unary(Op op, Var x, F f) {
    Tensor out = value(x);
    for (double& v : out.data()) v = f(v);
    return record(op, {x.id}, std::move(out));
  }

  template <class F>
  Var binary(Op op, Var a, Var b, F f) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    A.check_same(B, op_name(op));
    Tensor out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i], B[i]);
    return record(op, {a.id, b.id}, std::move(out));
  }

  Var reduce(Op op, Var x, int axis) {
    const Tensor& t = value(x);
    if (axis == -1) {
      double s = 0;
      for (double v : t.data()) s += v;
      if (op == Op::kMean) s /= static_cast<double>(t.size());
      Var r = record(op, {x.id}, Tensor::scalar(s));
      nodes_[r.id].iarg = -1;
      return r;
    }
    const auto L = detail::lines_along(t.shape(), axis);
    Tensor out(t.shape().rank() == 1 ? Shape::scalar() : Shape::vector(L.count));
    for (std::size_t l = 0; l < L.count; ++l) {
      const double* p = t.raw() + l * L.outer_stride;
      double s = 0;
      for (std::size_t i = 0; i < L.len; ++i) s += p[i * L.stride];
      out[l] = op == Op::kMean ? s / static_cast<double>(L.len) : s;
    }
    Var r = record(op, {x.id}, std::move(out));
    nodes_[r.id].iarg = axis;
    return r;
  }

  Tensor& grad_ref(int id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor::zeros_like(n.value);
      n.has_grad = true;
    }
    return n.grad;
  }

  bool wants(int id) const { return id >= 0 && nodes_[id].requires_grad; }

  void propagate(int i) {
    // Copy what we need: grad_ref may not reallocate nodes_, but keep it simple.
    const Node& n = nodes_[i];
    const Tensor& g = n.grad;
    const Tensor& y = n.value;
    const int a = n.in[0], b = n.in[1];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd:
        if (wants(a)) grad_ref(a) += g;
        if (wants(b)) grad_ref(b) += g;
        break;
      case Op::kSub:
        if (wants(a)) grad_ref(a) += g;
        if (wants(b)) {
          Tensor& gb = grad_ref(b);
          for (std::size_t k = 0; k < g.size(); ++k) gb[k] -= g[k];
        }
        break;
      case Op::kMul: {
        const Tensor& A = nodes_[a].value;
        const Tensor& B = nodes_[b].value;
        if (wants(a)) {
          Tensor& ga = grad_ref(a);
          for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * B[k];
        }
        if (wants(b)) {
          Tensor& gb = grad_ref(b);
          for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * A[k];
        }
        break;
      }
      case Op::kMulScalar: {
        const Tensor& X = nodes_[a].value;
        const double s = nodes_[b].value[0];
        if (wants(a)) {
          Tensor& ga = grad_ref(a);
          for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * s;
        }
        if (wants(b)) {
          double acc = 0;
          for (std::size_t k = 0; k < g.size(); ++k) acc += g[k] * X[k];
          grad_ref(b)[0] += acc;
        }
        break;
      }
      case Op::kAffine: {
        Tensor& ga = grad_ref(a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += n.farg * g[k];
        break;
      }
      case Op::kMatmul: {
        const Tensor& A = nodes_[a].value;
        const Tensor& B = nodes_[b].value;
        const std::size_t m = A.shape()[0], k = A.shape()[1];
        if (B.shape().rank() == 1) {
          detail::ConstVec G(g.raw(), m);
          if (wants(a)) detail::MutMat(grad_ref(a).raw(), m, k).noalias() += G * detail::ConstVec(B.raw(), k).transpose();
          if (wants(b)) detail::MutVec(grad_ref(b).raw(), k).noalias() += detail::ConstMat(A.raw(), m, k).transpose() * G;
        } else {
          const std::size_t c = B.shape()[1];
          detail::ConstMat G(g.raw(), m, c);
          if (wants(a)) detail::MutMat(grad_ref(a).raw(), m, k).noalias() += G * detail::ConstMat(B.raw(), k, c).transpose();
          if (wants(b)) detail::MutMat(grad_ref(b).raw(), k, c).noalias() += detail::ConstMat(A.raw(), m, k).transpose() * G;
        }
        break;
      }
      case Op::kConcat: {
        const std::vector<int> ids = n.many;
        const int axis = n.iarg;
        std::size_t off = 0;
        for (int id : ids) {
          const Shape s = nodes_[id].value.shape();
          if (s.rank() == 1 || axis == 0) {
            const std::size_t cnt = s.numel();
            if (wants(id)) {
              Tensor& gi = grad_ref(id);
              const Tensor& gg = nodes_[i].grad;
              for (std::size_t k = 0; k < cnt; ++k) gi[k] += gg[off + k];
            }
            off += cnt;
          } else {
            const std::size_t r = s[0], c = s[1];
            if (wants(id)) {
              Tensor& gi = grad_ref(id);
              const Tensor& gg = nodes_[i].grad;
              for (std::size_t p = 0; p < r; ++p)
                for (std::size_t q = 0; q < c; ++q) gi.at(p, q) += gg.at(p, off + q);
            }
            off += c;
          }
        }
        break;
      }
      case Op::kSlice: {
        Tensor& ga = grad_ref(a);
        const std::size_t off = static_cast<std::size_t>(n.iarg);
        for (std::size_t k = 0; k < g.size(); ++k) ga[off + k] += g[k];
        break;
      }
      case Op::kReshape: {
        Tensor& ga = grad_ref(a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
        break;
      }
      case Op::kSigmoid: {
        Tensor& ga = grad_ref(a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * y[k] * (1.0 - y[k]);
        break;
      }
      case Op::kTanh: {
        Tensor& ga = grad_ref(a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * (1.0 - y[k] * y[k]);
        break;
      }
      case Op::kRelu: {
        const Tensor& X = nodes_[a].value;
        Tensor& ga = grad_ref(a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += X[k] > 0 ? g[k] : 0.0;
        break;
      }
      case Op::kExp: {
        Tensor& ga = grad_ref(a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * y[k];
        break;
      }
      case Op::kSoftmax: {
        Tensor& ga = grad_ref(a);
        const auto L = detail::lines_along(y.shape(), n.iarg);
        for (std::size_t l = 0; l < L.count; ++l) {
          const std::size_t base = l * L.outer_stride;
          double dot = 0;
          for (std::size_t k = 0; k < L.len; ++k) dot += g[base + k * L.stride] * y[base + k * L.stride];
          for (std::size_t k = 0; k < L.len; ++k) {
            const std::size_t idx = base + k * L.stride;
            ga[idx] += y[idx] * (g[idx] - dot);
          }
        }
        break;
      }
      case Op::kLogSoftmax: {
        Tensor& ga = grad_ref(a);
        const auto L = detail::lines_along(y.shape(), n.iarg);
        for (std::size_t l = 0; l < L.count; ++l) {
          const std::size_t base = l * L.outer_stride;
          double gs = 0;
          for (std::size_t k = 0; k < L.len; ++k) gs += g[base + k * L.stride];
          for (std::size_t k = 0; k < L.len; ++k) {
            const std::size_t idx = base + k * L.stride;
            ga[idx] += g[idx] - std::exp(y[idx]) * gs;
          }
        }
        break;
      }
      case Op::kCumsum: {
        Tensor& ga = grad_ref(a);
        const auto L = detail::lines_along(y.shape(), n.iarg);
        for (std::size_t l = 0; l < L.count; ++l) {
          const std::size_t base = l * L.outer_stride;
          double acc = 0;
          for (std::size_t k = L.len; k-- > 0;) {
            acc += g[base + k * L.stride];
            ga[base + k * L.stride] += acc;
          }
        }
        break;
      }
      case Op::kSum:
      case Op::kMean: {
        Tensor& ga = grad_ref(a);
        const Tensor& X = nodes_[a].value;
        if (n.iarg == -1) {
          const double s = n.op == Op::kMean ? g[0] / static_cast<double>(X.size()) : g[0];
          for (double& v : ga.data()) v += s;
        } else {
          const auto L = detail::lines_along(X.shape(), n.iarg);
          for (std::size_t l = 0; l < L.count; ++l) {
            const double s = n.op == Op::kMean ? g[l] / static_cast<double>(L.len) : g[l];
            for (std::size_t k = 0; k < L.len; ++k) ga[l * L.outer_stride + k * L.stride] += s;
          }
        }
        break;
      }
      case Op::kEmbedding: {
        Tensor& ga = grad_ref(a);
        const std::size_t d = g.size();
        const std::size_t row = static_cast<std::size_t>(n.iarg);
        for (std::size_t k = 0; k < d; ++k) ga[row * d + k] += g[k];
        break;
      }
      case Op::kCrossEntropy: {
        const Tensor& z = nodes_[a].value;
        Tensor& ga = grad_ref(a);
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : z.data()) mx = std::max(mx, v);
        double s = 0;
        for (double v : z.data()) s += std::exp(v - mx);
        const double gl = g[0];
        for (std::size_t k = 0; k < z.size(); ++k) {
          const double p = std::exp(z[k] - mx) / s;
          ga[k] += gl * (p - (static_cast<int>(k) == n.iarg ? 1.0 : 0.0));
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, int> param_nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }

}  // namespace treebench::num
