#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "ppr/tensor.hpp"

namespace ppr {

enum class Op {
  kConstant,
  kLeaf,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kConcat,
  kSlice,
  kSum,
  kSumAxis,
  kMean,
  kSigmoid,
  kTanh,
  kRelu,
  kExp,
  kLog,
  kSoftmax,
  kLogSoftmax,
  kScalarMul,
  kBroadcastRows,
  kRowMask,
  kReshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kLeaf: return "leaf";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kSum: return "sum";
    case Op::kSumAxis: return "sum_axis";
    case Op::kMean: return "mean";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kScalarMul: return "scalar_mul";
    case Op::kBroadcastRows: return "broadcast_rows";
    case Op::kRowMask: return "row_mask";
    case Op::kReshape: return "reshape";
  }
  return "unknown";
}

/// Per-op parameters that are not tensors.
struct OpAttrs {
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  double scalar = 0.0;
  bool transpose_rhs = false;
  std::size_t rows = 0;
  std::vector<std::uint8_t> keep;
  Shape shape;
};

/// Bitwise equality of shape and payload; distinguishes -0.0 from 0.0.
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] inline void shape_fail(Op op, const Shape& a, const Shape& b, const std::string& why = {}) {
  std::string msg = std::string(op_name(op)) + ": incompatible shapes " + shape_str(a) + " and " +
                    shape_str(b);
  if (!why.empty()) msg += " (" + why + ")";
  throw ShapeError(msg);
}

[[noreturn]] inline void shape_fail1(Op op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op_name(op)) + ": invalid shape " + shape_str(a) + " (" + why + ")");
}

inline std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

struct Outer {
  std::size_t outer = 1;
  std::size_t inner = 1;
};

inline Outer split_at(const Shape& s, std::size_t axis) {
  Outer o;
  for (std::size_t i = 0; i < axis; ++i) o.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) o.inner *= s[i];
  return o;
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline void log_softmax_rows(const double* x, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = out + r * cols;
    double m = xr[0];
    for (std::size_t j = 1; j < cols; ++j) m = std::max(m, xr[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(xr[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < cols; ++j) yr[j] = xr[j] - lse;
  }
}

struct Result {
  Shape shape;
  std::vector<double> data;
};

inline void require_arity(Op op, std::size_t n, std::size_t want) {
  if (n != want) {
    throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(want) +
                     " inputs, got " + std::to_string(n));
  }
}

/// Shape-checks and evaluates one primitive. Shared by eager evaluation and
/// tape replay so both produce bit-identical values.
inline Result forward_kernel(Op op, const OpAttrs& at, const std::vector<const Tensor*>& in) {
  Result r;
  switch (op) {
    case Op::kConstant:
    case Op::kLeaf:
      throw std::logic_error("forward_kernel called on a leaf");

    case Op::kMatMul: {
      require_arity(op, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.rank() != 2 || b.rank() != 2) shape_fail(op, a.shape(), b.shape(), "rank-2 operands required");
      const std::size_t m = a.dim(0), k = a.dim(1);
      const std::size_t n = at.transpose_rhs ? b.dim(0) : b.dim(1);
      const std::size_t kb = at.transpose_rhs ? b.dim(1) : b.dim(0);
      if (k != kb) shape_fail(op, a.shape(), b.shape(), "inner dimensions differ");
      r.shape = {m, n};
      r.data.assign(m * n, 0.0);
      ConstMap A(a.data().data(), m, k);
      MutMap C(r.data.data(), m, n);
      if (at.transpose_rhs) {
        ConstMap B(b.data().data(), n, k);
        C.noalias() = A * B.transpose();
      } else {
        ConstMap B(b.data().data(), k, n);
        C.noalias() = A * B;
      }
      return r;
    }

    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      require_arity(op, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape(), "no implicit broadcasting");
      r.shape = a.shape();
      r.data.resize(a.size());
      const double* x = a.data().data();
      const double* y = b.data().data();
      if (op == Op::kAdd) {
        for (std::size_t i = 0; i < a.size(); ++i) r.data[i] = x[i] + y[i];
      } else if (op == Op::kSub) {
        for (std::size_t i = 0; i < a.size(); ++i) r.data[i] = x[i] - y[i];
      } else {
        for (std::size_t i = 0; i < a.size(); ++i) r.data[i] = x[i] * y[i];
      }
      return r;
    }

    case Op::kConcat: {
      if (in.empty()) throw ShapeError("concat: no inputs");
      const Shape& s0 = in[0]->shape();
      if (at.axis >= s0.size()) shape_fail1(op, s0, "axis out of range");
      std::size_t total = 0;
      for (const Tensor* t : in) {
        const Shape& s = t->shape();
        if (s.size() != s0.size()) shape_fail(op, s0, s, "rank differs");
        for (std::size_t i = 0; i < s.size(); ++i) {
          if (i != at.axis && s[i] != s0[i]) shape_fail(op, s0, s, "non-axis dimension differs");
        }
        total += s[at.axis];
      }
      r.shape = s0;
      r.shape[at.axis] = total;
      r.data.resize(numel(r.shape));
      const Outer o = split_at(s0, at.axis);
      const std::size_t row = total * o.inner;
      std::size_t offset = 0;
      for (const Tensor* t : in) {
        const std::size_t chunk = t->dim(at.axis) * o.inner;
        const double* src = t->data().data();
        for (std::size_t q = 0; q < o.outer; ++q) {
          std::copy_n(src + q * chunk, chunk, r.data.data() + q * row + offset);
        }
        offset += chunk;
      }
      return r;
    }

    case Op::kSlice: {
      require_arity(op, in.size(), 1);
      const Shape& s = in[0]->shape();
      if (at.axis >= s.size()) shape_fail1(op, s, "axis out of range");
      if (at.begin >= at.end || at.end > s[at.axis]) {
        shape_fail1(op, s, "slice [" + std::to_string(at.begin) + ", " + std::to_string(at.end) +
                               ") out of range on axis " + std::to_string(at.axis));
      }
      r.shape = s;
      r.shape[at.axis] = at.end - at.begin;
      r.data.resize(numel(r.shape));
      const Outer o = split_at(s, at.axis);
      const std::size_t src_row = s[at.axis] * o.inner;
      const std::size_t dst_row = (at.end - at.begin) * o.inner;
      const double* src = in[0]->data().data();
      for (std::size_t q = 0; q < o.outer; ++q) {
        std::copy_n(src + q * src_row + at.begin * o.inner, dst_row, r.data.data() + q * dst_row);
      }
      return r;
    }

    case Op::kSum:
    case Op::kMean: {
      require_arity(op, in.size(), 1);
      double s = 0.0;
      for (double v : in[0]->data()) s += v;
      if (op == Op::kMean) s /= static_cast<double>(in[0]->size());
      r.shape = {};
      r.data = {s};
      return r;
    }

    case Op::kSumAxis: {
      require_arity(op, in.size(), 1);
      const Shape& s = in[0]->shape();
      if (at.axis >= s.size()) shape_fail1(op, s, "axis out of range");
      const Outer o = split_at(s, at.axis);
      const std::size_t n = s[at.axis];
      r.shape = s;
      r.shape.erase(r.shape.begin() + static_cast<std::ptrdiff_t>(at.axis));
      r.data.assign(o.outer * o.inner, 0.0);
      const double* src = in[0]->data().data();
      for (std::size_t q = 0; q < o.outer; ++q) {
        for (std::size_t j = 0; j < n; ++j) {
          for (std::size_t i = 0; i < o.inner; ++i) {
            r.data[q * o.inner + i] += src[(q * n + j) * o.inner + i];
          }
        }
      }
      return r;
    }

    case Op::kSigmoid:
    case Op::kTanh:
    case Op::kRelu:
    case Op::kExp:
    case Op::kLog:
    case Op::kScalarMul: {
      require_arity(op, in.size(), 1);
      const Tensor& a = *in[0];
      r.shape = a.shape();
      r.data.resize(a.size());
      const double* x = a.data().data();
      for (std::size_t i = 0; i < a.size(); ++i) {
        switch (op) {
          case Op::kSigmoid: r.data[i] = stable_sigmoid(x[i]); break;
          case Op::kTanh: r.data[i] = std::tanh(x[i]); break;
          case Op::kRelu: r.data[i] = x[i] > 0.0 ? x[i] : 0.0; break;
          case Op::kExp: r.data[i] = std::exp(x[i]); break;
          case Op::kLog:
            if (!(x[i] > 0.0)) {
              throw DomainError("log: non-positive input " + std::to_string(x[i]) + " at index " +
                                std::to_string(i));
            }
            r.data[i] = std::log(x[i]);
            break;
          default: r.data[i] = x[i] * at.scalar; break;
        }
      }
      return r;
    }

    case Op::kSoftmax:
    case Op::kLogSoftmax: {
      require_arity(op, in.size(), 1);
      const Tensor& a = *in[0];
      if (a.rank() == 0) shape_fail1(op, a.shape(), "needs at least one axis");
      r.shape = a.shape();
      r.data.resize(a.size());
      const std::size_t cols = last_dim(a.shape());
      log_softmax_rows(a.data().data(), r.data.data(), a.size() / cols, cols);
      if (op == Op::kSoftmax) {
        for (double& v : r.data) v = std::exp(v);
      }
      return r;
    }

    case Op::kBroadcastRows: {
      require_arity(op, in.size(), 1);
      const Tensor& v = *in[0];
      if (v.rank() != 1) shape_fail1(op, v.shape(), "expects a vector");
      if (at.rows == 0) shape_fail1(op, v.shape(), "row count must be positive");
      r.shape = {at.rows, v.dim(0)};
      r.data.resize(at.rows * v.dim(0));
      for (std::size_t q = 0; q < at.rows; ++q) {
        std::copy_n(v.data().data(), v.dim(0), r.data.data() + q * v.dim(0));
      }
      return r;
    }

    case Op::kRowMask: {
      require_arity(op, in.size(), 1);
      const Tensor& a = *in[0];
      if (a.rank() == 0 || at.keep.size() != a.dim(0)) {
        shape_fail(op, a.shape(), Shape{at.keep.size()}, "mask length must equal leading dimension");
      }
      r.shape = a.shape();
      r.data.assign(a.size(), 0.0);
      const std::size_t row = a.size() / a.dim(0);
      for (std::size_t q = 0; q < a.dim(0); ++q) {
        if (at.keep[q]) std::copy_n(a.data().data() + q * row, row, r.data.data() + q * row);
      }
      return r;
    }

    case Op::kReshape: {
      require_arity(op, in.size(), 1);
      if (numel(at.shape) != in[0]->size()) shape_fail(op, in[0]->shape(), at.shape, "element count differs");
      r.shape = at.shape;
      r.data = in[0]->vec();
      return r;
    }
  }
  throw std::logic_error("unhandled op");
}

}  // namespace detail

class Gradients;

/// Records primitive applications in topological order for one reverse sweep.
/// Single-threaded; tensors referencing a tape must not outlive it.
class Tape {
 public:
  struct Node {
    Op op = Op::kConstant;
    OpAttrs attrs;
    std::vector<int> parents;
    Tensor value;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a differentiable input.
  Tensor leaf(const Tensor& value) {
    Node n;
    n.op = Op::kLeaf;
    n.value = value.detach();
    return push(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  bool backward_done() const { return backward_done_; }

  Gradients backward(const Tensor& loss);

  /// Recomputes every op node from its recorded parents and compares bitwise.
  bool replay_matches() const {
    for (const Node& n : nodes_) {
      if (n.op == Op::kLeaf || n.op == Op::kConstant) continue;
      std::vector<const Tensor*> ins;
      ins.reserve(n.parents.size());
      for (int p : n.parents) ins.push_back(&nodes_[static_cast<std::size_t>(p)].value);
      detail::Result r = detail::forward_kernel(n.op, n.attrs, ins);
      Tensor again(std::move(r.shape), std::move(r.data));
      if (!bit_equal(again, n.value)) return false;
    }
    return true;
  }

  Tensor record(Op op, OpAttrs attrs, const std::vector<const Tensor*>& inputs, Tensor value) {
    Node n;
    n.op = op;
    n.attrs = std::move(attrs);
    n.parents.reserve(inputs.size());
    for (const Tensor* t : inputs) {
      if (t->tape() == this) {
        n.parents.push_back(t->node());
      } else {
        if (t->tape() != nullptr) throw std::logic_error("tensors from different tapes mixed in one op");
        Node c;
        c.op = Op::kConstant;
        c.value = *t;
        n.parents.push_back(push(std::move(c)).node());
      }
    }
    n.value = std::move(value);
    return push(std::move(n));
  }

 private:
  Tensor push(Node n) {
    if (backward_done_) throw std::logic_error("cannot record on a tape after backward()");
    Tensor out = n.value;
    nodes_.push_back(std::move(n));
    out.tape_ = this;
    out.node_ = static_cast<int>(nodes_.size() - 1);
    return out;
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

/// Gradient of one scalar loss with respect to every node of its tape.
class Gradients {
 public:
  Gradients() = default;

  bool reached(const Tensor& x) const {
    check(x);
    return !grads_[static_cast<std::size_t>(x.node())].empty();
  }

  /// Zeros when the loss does not depend on x.
  Tensor of(const Tensor& x) const {
    check(x);
    const auto& g = grads_[static_cast<std::size_t>(x.node())];
    if (g.empty()) return Tensor::zeros(x.shape());
    return Tensor(x.shape(), g);
  }

  bool reached_node(std::size_t id) const { return !grads_.at(id).empty(); }
  std::size_t node_count() const { return grads_.size(); }

 private:
  friend class Tape;

  void check(const Tensor& x) const {
    if (x.tape() != tape_) throw std::invalid_argument("tensor does not belong to the differentiated tape");
  }

  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> grads_;
};

inline Gradients Tape::backward(const Tensor& loss) {
  if (backward_done_) throw std::logic_error("backward() already called on this tape");
  if (loss.tape() != this) throw std::invalid_argument("backward(): loss is not recorded on this tape");
  if (loss.size() != 1) throw ShapeError("backward(): loss must be scalar, got " + shape_str(loss.shape()));
  backward_done_ = true;

  Gradients out;
  out.tape_ = this;
  out.grads_.resize(nodes_.size());
  auto& G = out.grads_;
  G[static_cast<std::size_t>(loss.node())].assign(1, 1.0);

  auto acc = [&](int id) -> double* {
    auto& g = G[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(id)].value.size(), 0.0);
    return g.data();
  };

  for (int i = loss.node(); i >= 0; --i) {
    const auto& gi = G[static_cast<std::size_t>(i)];
    if (gi.empty()) continue;
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.op == Op::kLeaf || n.op == Op::kConstant) continue;
    const double* g = gi.data();
    const std::size_t size = n.value.size();
    const double* y = n.value.data().data();
    auto in = [&](std::size_t k) -> const Tensor& {
      return nodes_[static_cast<std::size_t>(n.parents[k])].value;
    };

    switch (n.op) {
      case Op::kMatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t m = a.dim(0), k = a.dim(1), cols = n.value.dim(1);
        detail::ConstMap GM(g, m, cols);
        detail::ConstMap A(a.data().data(), m, k);
        double* ga = acc(n.parents[0]);
        double* gb = acc(n.parents[1]);
        detail::MutMap GA(ga, m, k);
        if (n.attrs.transpose_rhs) {
          detail::ConstMap B(b.data().data(), cols, k);
          GA.noalias() += GM * B;
          detail::MutMap GB(gb, cols, k);
          GB.noalias() += GM.transpose() * A;
        } else {
          detail::ConstMap B(b.data().data(), k, cols);
          GA.noalias() += GM * B.transpose();
          detail::MutMap GB(gb, k, cols);
          GB.noalias() += A.transpose() * GM;
        }
        break;
      }
      case Op::kAdd:
      case Op::kSub: {
        double* ga = acc(n.parents[0]);
        for (std::size_t j = 0; j < size; ++j) ga[j] += g[j];
        double* gb = acc(n.parents[1]);
        if (n.op == Op::kAdd) {
          for (std::size_t j = 0; j < size; ++j) gb[j] += g[j];
        } else {
          for (std::size_t j = 0; j < size; ++j) gb[j] -= g[j];
        }
        break;
      }
      case Op::kMul: {
        const double* a = in(0).data().data();
        const double* b = in(1).data().data();
        double* ga = acc(n.parents[0]);
        for (std::size_t j = 0; j < size; ++j) ga[j] += g[j] * b[j];
        double* gb = acc(n.parents[1]);
        for (std::size_t j = 0; j < size; ++j) gb[j] += g[j] * a[j];
        break;
      }
      case Op::kConcat: {
        const Shape& s = n.value.shape();
        const detail::Outer o = detail::split_at(s, n.attrs.axis);
        const std::size_t row = s[n.attrs.axis] * o.inner;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          const std::size_t chunk = in(k).dim(n.attrs.axis) * o.inner;
          double* gk = acc(n.parents[k]);
          for (std::size_t q = 0; q < o.outer; ++q) {
            for (std::size_t j = 0; j < chunk; ++j) gk[q * chunk + j] += g[q * row + offset + j];
          }
          offset += chunk;
        }
        break;
      }
      case Op::kSlice: {
        const Shape& s = in(0).shape();
        const detail::Outer o = detail::split_at(s, n.attrs.axis);
        const std::size_t src_row = s[n.attrs.axis] * o.inner;
        const std::size_t dst_row = (n.attrs.end - n.attrs.begin) * o.inner;
        double* ga = acc(n.parents[0]);
        for (std::size_t q = 0; q < o.outer; ++q) {
          for (std::size_t j = 0; j < dst_row; ++j) {
            ga[q * src_row + n.attrs.begin * o.inner + j] += g[q * dst_row + j];
          }
        }
        break;
      }
      case Op::kSum:
      case Op::kMean: {
        const std::size_t na = in(0).size();
        const double scale = n.op == Op::kMean ? g[0] / static_cast<double>(na) : g[0];
        double* ga = acc(n.parents[0]);
        for (std::size_t j = 0; j < na; ++j) ga[j] += scale;
        break;
      }
      case Op::kSumAxis: {
        const Shape& s = in(0).shape();
        const detail::Outer o = detail::split_at(s, n.attrs.axis);
        const std::size_t len = s[n.attrs.axis];
        double* ga = acc(n.parents[0]);
        for (std::size_t q = 0; q < o.outer; ++q) {
          for (std::size_t j = 0; j < len; ++j) {
            for (std::size_t t = 0; t < o.inner; ++t) ga[(q * len + j) * o.inner + t] += g[q * o.inner + t];
          }
        }
        break;
      }
      case Op::kSigmoid: {
        double* ga = acc(n.parents[0]);
        for (std::size_t j = 0; j < size; ++j) ga[j] += g[j] * y[j] * (1.0 - y[j]);
        break;
      }
      case Op::kTanh: {
        double* ga = acc(n.parents[0]);
        for (std::size_t j = 0; j < size; ++j) ga[j] += g[j] * (1.0 - y[j] * y[j]);
        break;
      }
      case Op::kRelu: {
        const double* a = in(0).data().data();
        double* ga = acc(n.parents[0]);
        for (std::size_t j = 0; j < size; ++j) {
          if (a[j] > 0.0) ga[j] += g[j];
        }
        break;
      }
      case Op::kExp: {
        double* ga = acc(n.parents[0]);
        for (std::size_t j = 0; j < size; ++j) ga[j] += g[j] * y[j];
        break;
      }
      case Op::kLog: {
        const double* a = in(0).data().data();
        double* ga = acc(n.parents[0]);
        for (std::size_t j = 0; j < size; ++j) ga[j] += g[j] / a[j];
        break;
      }
      case Op::kSoftmax:
      case Op::kLogSoftmax: {
        const std::size_t cols = detail::last_dim(n.value.shape());
        double* ga = acc(n.parents[0]);
        for (std::size_t r = 0; r < size / cols; ++r) {
          const double* gr = g + r * cols;
          const double* yr = y + r * cols;
          double* out_r = ga + r * cols;
          if (n.op == Op::kSoftmax) {
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
            for (std::size_t j = 0; j < cols; ++j) out_r[j] += yr[j] * (gr[j] - dot);
          } else {
            double gs = 0.0;
            for (std::size_t j = 0; j < cols; ++j) gs += gr[j];
            for (std::size_t j = 0; j < cols; ++j) out_r[j] += gr[j] - std::exp(yr[j]) * gs;
          }
        }
        break;
      }
      case Op::kScalarMul: {
        double* ga = acc(n.parents[0]);
        for (std::size_t j = 0; j < size; ++j) ga[j] += g[j] * n.attrs.scalar;
        break;
      }
      case Op::kBroadcastRows: {
        const std::size_t cols = n.value.dim(1);
        double* ga = acc(n.parents[0]);
        for (std::size_t q = 0; q < n.attrs.rows; ++q) {
          for (std::size_t j = 0; j < cols; ++j) ga[j] += g[q * cols + j];
        }
        break;
      }
      case Op::kRowMask: {
        const std::size_t row = size / n.value.dim(0);
        double* ga = acc(n.parents[0]);
        for (std::size_t q = 0; q < n.value.dim(0); ++q) {
          if (!n.attrs.keep[q]) continue;
          for (std::size_t j = 0; j < row; ++j) ga[q * row + j] += g[q * row + j];
        }
        break;
      }
      case Op::kReshape: {
        double* ga = acc(n.parents[0]);
        for (std::size_t j = 0; j < size; ++j) ga[j] += g[j];
        break;
      }
      case Op::kLeaf:
      case Op::kConstant:
        break;
    }
  }
  return out;
}

namespace detail {

inline Tensor apply(Op op, OpAttrs attrs, const std::vector<const Tensor*>& inputs) {
  Result r = forward_kernel(op, attrs, inputs);
  Tensor value(std::move(r.shape), std::move(r.data));
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (t->tape() != nullptr) {
      tape = t->tape();
      break;
    }
  }
  if (tape == nullptr) return value;
  return tape->record(op, std::move(attrs), inputs, std::move(value));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. Each one records itself when any input is tracked.

inline Tensor matmul(const Tensor& a, const Tensor& b) { return detail::apply(Op::kMatMul, {}, {&a, &b}); }

/// a · bᵀ, for weights stored as [out, in].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  OpAttrs at;
  at.transpose_rhs = true;
  return detail::apply(Op::kMatMul, std::move(at), {&a, &b});
}

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::apply(Op::kAdd, {}, {&a, &b}); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::apply(Op::kSub, {}, {&a, &b}); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::apply(Op::kMul, {}, {&a, &b}); }

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  OpAttrs at;
  at.axis = axis;
  std::vector<const Tensor*> ins;
  ins.reserve(parts.size());
  for (const Tensor& p : parts) ins.push_back(&p);
  return detail::apply(Op::kConcat, std::move(at), ins);
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  OpAttrs at;
  at.axis = axis;
  at.begin = begin;
  at.end = end;
  return detail::apply(Op::kSlice, std::move(at), {&a});
}

inline Tensor sum(const Tensor& a) { return detail::apply(Op::kSum, {}, {&a}); }

inline Tensor sum(const Tensor& a, std::size_t axis) {
  OpAttrs at;
  at.axis = axis;
  return detail::apply(Op::kSumAxis, std::move(at), {&a});
}

inline Tensor mean(const Tensor& a) { return detail::apply(Op::kMean, {}, {&a}); }
inline Tensor sigmoid(const Tensor& a) { return detail::apply(Op::kSigmoid, {}, {&a}); }
inline Tensor tanh(const Tensor& a) { return detail::apply(Op::kTanh, {}, {&a}); }
inline Tensor relu(const Tensor& a) { return detail::apply(Op::kRelu, {}, {&a}); }
inline Tensor exp(const Tensor& a) { return detail::apply(Op::kExp, {}, {&a}); }
inline Tensor log(const Tensor& a) { return detail::apply(Op::kLog, {}, {&a}); }
inline Tensor softmax(const Tensor& a) { return detail::apply(Op::kSoftmax, {}, {&a}); }
inline Tensor log_softmax(const Tensor& a) { return detail::apply(Op::kLogSoftmax, {}, {&a}); }

inline Tensor scalar_mul(const Tensor& a, double s) {
  OpAttrs at;
  at.scalar = s;
  return detail::apply(Op::kScalarMul, std::move(at), {&a});
}

/// Repeats a vector into `rows` identical rows.
inline Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  OpAttrs at;
  at.rows = rows;
  return detail::apply(Op::kBroadcastRows, std::move(at), {&v});
}

/// Rows whose flag is 0 become exact +0.0; gradient is blocked for them.
inline Tensor row_mask(const Tensor& a, std::vector<std::uint8_t> keep) {
  OpAttrs at;
  at.keep = std::move(keep);
  return detail::apply(Op::kRowMask, std::move(at), {&a});
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return detail::apply(Op::kReshape, std::move(at), {&a});
}

// ---------------------------------------------------------------------------

using ParamMap = std::map<std::string, Tensor>;

/// Named parameters in insertion order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  void add(std::string name, Tensor value, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), value.detach(), trainable});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const { return entries_[find(name)].value; }

  void set(const std::string& name, Tensor value) {
    Entry& e = entries_[find(name)];
    if (e.value.shape() != value.shape()) {
      throw ShapeError("parameter " + name + ": expected shape " + shape_str(e.value.shape()) + ", got " +
                       shape_str(value.shape()));
    }
    e.value = value.detach();
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) n += e.value.size();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const Entry& e : entries_) out.push_back(e.name);
    return out;
  }

  ParamMap values() const {
    ParamMap m;
    for (const Entry& e : entries_) m.emplace(e.name, e.value);
    return m;
  }

  /// Trainable entries become tape leaves; the rest stay constants.
  ParamMap bind(Tape& tape) const {
    ParamMap m;
    for (const Entry& e : entries_) m.emplace(e.name, e.trainable ? tape.leaf(e.value) : e.value);
    return m;
  }

  bool bit_equal_to(const ParamStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name || !bit_equal(entries_[i].value, other.entries_[i].value)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradient per trainable parameter, keyed like the bound map.
inline ParamMap param_grads(const Gradients& grads, const ParamMap& bound) {
  ParamMap out;
  for (const auto& [name, t] : bound) {
    if (t.tracked()) out.emplace(name, grads.of(t));
  }
  return out;
}

using LossFn = std::function<Tensor(const ParamMap&)>;

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of `f` against central differences over
/// every element of every trainable parameter. Error per element is
/// |analytic - numeric| / max(|analytic|, |numeric|, kFdFloor); the floor only
/// absorbs central-difference round-off on gradients that are exactly zero.
inline constexpr double kFdFloor = 1e-6;

inline FiniteDiffReport finite_diff_check(const LossFn& f, const ParamStore& params, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");

  const Tensor first = f(params.values());
  const Tensor second = f(params.values());
  if (!bit_equal(first, second)) throw std::runtime_error("finite_diff_check: loss function is not deterministic");

  Tape tape;
  const ParamMap bound = params.bind(tape);
  const Tensor loss = f(bound);
  FiniteDiffReport rep;
  ParamMap analytic;
  if (loss.tracked()) {
    analytic = param_grads(tape.backward(loss), bound);
  }

  ParamStore work = params;
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    const Tensor grad = analytic.count(e.name) ? analytic.at(e.name) : Tensor::zeros(e.value.shape());
    std::vector<double> base = e.value.vec();
    for (std::size_t i = 0; i < base.size(); ++i) {
      std::vector<double> plus = base, minus = base;
      plus[i] += eps;
      minus[i] -= eps;
      work.set(e.name, Tensor(e.value.shape(), plus));
      const double fp = f(work.values()).item();
      work.set(e.name, Tensor(e.value.shape(), minus));
      const double fm = f(work.values()).item();
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = grad[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kFdFloor});
      ++rep.checked;
      if (err > rep.max_rel_error || rep.worst_param.empty()) {
        if (err >= rep.max_rel_error) {
          rep.max_rel_error = err;
          rep.worst_param = e.name;
          rep.worst_index = i;
          rep.analytic = a;
          rep.numeric = numeric;
        }
      }
    }
    work.set(e.name, e.value);
  }
  return rep;
}

}  // namespace ppr
