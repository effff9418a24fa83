// Copyright 2026 The h2osdf Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every elementary op in creation order, which is a valid
// topological order. backward() walks the tape in exact reverse order, so a
// node's local backward runs only after all of its consumers have deposited
// their contributions into its gradient buffer.
//
// Values are batched: an (N x k) node holds k features for N samples. Binary
// ops broadcast a (1 x 1), (N x 1) or (1 x k) operand against an (N x k) one.

#pragma once

#include <algorithm>
#include <array>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "h2osdf/core.hpp"

namespace h2o::ad {

using h2o::Matrix;

/// Named trainable tensors. Ids are dense indices in insertion order.
class ParameterStore {
 public:
  int add(std::string name, Matrix init) {
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return static_cast<int>(values_.size()) - 1;
  }

  int size() const { return static_cast<int>(values_.size()); }
  Matrix& value(int id) { return values_.at(id); }
  const Matrix& value(int id) const { return values_.at(id); }
  const std::string& name(int id) const { return names_.at(id); }

  int find(const std::string& name) const {
    for (int i = 0; i < size(); ++i)
      if (names_[i] == name) return i;
    return -1;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

/// Per-parameter gradients. An empty matrix means "no gradient reached this
/// parameter", which is distinct from an explicit zero only for bookkeeping.
struct GradientMap {
  std::vector<Matrix> grads;

  GradientMap() = default;
  explicit GradientMap(int n) : grads(static_cast<std::size_t>(n)) {}

  int size() const { return static_cast<int>(grads.size()); }
  bool has(int id) const { return grads.at(id).size() > 0; }

  /// Summation merge; used as the single-writer reduction across sub-batches.
  void accumulate(const GradientMap& other) {
    if (grads.size() < other.grads.size()) grads.resize(other.grads.size());
    for (std::size_t i = 0; i < other.grads.size(); ++i) {
      const Matrix& g = other.grads[i];
      if (g.size() == 0) continue;
      if (grads[i].size() == 0)
        grads[i] = g;
      else
        grads[i] += g;
    }
  }

  void scale(double c) {
    for (auto& g : grads)
      if (g.size() > 0) g *= c;
  }

  bool all_finite() const {
    for (const auto& g : grads)
      if (g.size() > 0 && !g.allFinite()) return false;
    return true;
  }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  /// Accumulates the node's gradient into its parents via Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, int self)>;

  struct Node {
    Matrix value;
    Matrix grad;
    std::array<int, 4> parents{-1, -1, -1, -1};
    BackwardFn backward;
    const char* op = "";
    bool requires_grad = false;
    int param_id = -1;
  };

  Tape() { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Matrix v, const char* op = "constant") { return leaf(std::move(v), false, -1, op); }

  /// Leaf that receives a gradient (spatial inputs, test probes).
  Var variable(Matrix v, const char* op = "variable") { return leaf(std::move(v), true, -1, op); }

  Var scalar(double x) {
    Matrix m(1, 1);
    m(0, 0) = x;
    return constant(std::move(m), "scalar");
  }

  Var parameter(const ParameterStore& store, int id) {
    for (int pid : parameter_ids_)
      if (pid == id) return Var{this, parameter_nodes_[pid]};
    Var v = leaf(store.value(id), true, id, "parameter");
    if (static_cast<int>(parameter_nodes_.size()) <= id) parameter_nodes_.resize(id + 1, -1);
    parameter_nodes_[id] = v.id;
    parameter_ids_.push_back(id);
    return v;
  }

  /// Records an op. The node requires a gradient iff any parent does; when it
  /// does not, the backward closure is dropped.
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward, const char* op) {
    if (check_finite_ && !value.allFinite())
      throw NumericalError(op, "non-finite intermediate value");
    Node n;
    n.value = std::move(value);
    n.op = op;
    int k = 0;
    for (const Var& p : parents) {
      require(p.tape == this, std::string(op) + ": operand from another tape");
      n.parents[k++] = p.id;
      n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Node& node(int id) const { return nodes_.at(id); }
  const Matrix& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Gradient of the last backward() output w.r.t. node id (zeros if untouched).
  const Matrix& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Adds `g` into the gradient buffer of `id` (no-op for constants).
  template <class Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  bool wants_grad(int id) const { return id >= 0 && nodes_[id].requires_grad; }

  /// Reverse sweep from a scalar output.
  void backward(Var output) {
    require(output.tape == this, "backward: output from another tape");
    const Node& out = nodes_[output.id];
    require(out.value.rows() == 1 && out.value.cols() == 1, "backward: output must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[output.id].grad = Matrix::Ones(1, 1);
    for (int i = output.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  /// Gradients for every parameter leaf used on this tape.
  GradientMap parameter_gradients(int n_params) const {
    GradientMap gm(n_params);
    for (int pid : parameter_ids_) {
      const Node& n = nodes_[parameter_nodes_[pid]];
      gm.grads[pid] = n.grad.size() ? n.grad : Matrix::Zero(n.value.rows(), n.value.cols());
    }
    return gm;
  }

  void set_check_finite(bool on) { check_finite_ = on; }

  /// Smallest distance of any kinked op's input to its kink seen so far
  /// (abs at 0, max at a tie, clamp at a bound, relu at 0).
  double kink_distance() const { return kink_distance_; }
  void note_kink_distance(double d) { kink_distance_ = std::min(kink_distance_, d); }

 private:
  Var leaf(Matrix v, bool requires_grad, int param_id, const char* op) {
    if (check_finite_ && !v.allFinite()) throw NumericalError(op, "non-finite input");
    Node n;
    n.value = std::move(v);
    n.op = op;
    n.requires_grad = requires_grad;
    n.param_id = param_id;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::vector<int> parameter_ids_;
  std::vector<int> parameter_nodes_;
  bool check_finite_ = true;
  double kink_distance_ = std::numeric_limits<double>::infinity();
};

inline const Matrix& Var::value() const { return tape->value(id); }
inline const Matrix& Var::grad() const { return tape->grad(id); }

// ---------------------------------------------------------------------------
// Broadcasting helpers

namespace detail {

inline bool broadcastable(const Matrix& a, Eigen::Index rows, Eigen::Index cols) {
  return (a.rows() == rows || a.rows() == 1) && (a.cols() == cols || a.cols() == 1);
}

inline Matrix expand(const Matrix& a, Eigen::Index rows, Eigen::Index cols) {
  if (a.rows() == rows && a.cols() == cols) return a;
  if (a.rows() == 1 && a.cols() == 1) return Matrix::Constant(rows, cols, a(0, 0));
  if (a.rows() == 1) return a.replicate(rows, 1);
  return a.replicate(1, cols);
}

/// Sums a gradient of shape (rows x cols) down to the operand's shape.
inline Matrix reduce_to(const Matrix& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

inline std::pair<Eigen::Index, Eigen::Index> broadcast_shape(const Matrix& a, const Matrix& b,
                                                              const char* op) {
  const Eigen::Index r = std::max(a.rows(), b.rows());
  const Eigen::Index c = std::max(a.cols(), b.cols());
  require(broadcastable(a, r, c) && broadcastable(b, r, c),
          std::string(op) + ": incompatible shapes");
  return {r, c};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementary ops

namespace detail {

enum class Bcast { kSame, kScalar, kCol, kRow };

/// How operand `b` broadcasts against the (rows x cols) result.
inline Bcast bcast_kind(const Matrix& b, Eigen::Index rows, Eigen::Index cols) {
  if (b.rows() == rows && b.cols() == cols) return Bcast::kSame;
  if (b.rows() == 1 && b.cols() == 1) return Bcast::kScalar;
  if (b.cols() == 1) return Bcast::kCol;
  return Bcast::kRow;
}

/// out (op)= b, broadcasting b to out's shape.
template <class Op>
void apply_bcast(Matrix& out, const Matrix& b, Op op) {
  switch (bcast_kind(b, out.rows(), out.cols())) {
    case Bcast::kSame: op(out.array(), b.array()); break;
    case Bcast::kScalar: op(out.array(), Matrix::Constant(out.rows(), out.cols(), b(0, 0)).array()); break;
    case Bcast::kCol:
      for (Eigen::Index c = 0; c < out.cols(); ++c) {
        auto col = out.col(c).array();
        op(col, b.col(0).array());
      }
      break;
    case Bcast::kRow:
      for (Eigen::Index r = 0; r < out.rows(); ++r) {
        auto row = out.row(r).array();
        op(row, b.row(0).array());
      }
      break;
  }
}

template <class Op>
Matrix binary_value(const Matrix& a, const Matrix& b, Op op, const char* name) {
  const auto [r, c] = broadcast_shape(a, b, name);
  Matrix out = (a.rows() == r && a.cols() == c) ? a : expand(a, r, c);
  apply_bcast(out, b, op);
  return out;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Matrix out = detail::binary_value(a.value(), b.value(), [](auto&& x, const auto& y) { x += y; }, "add");
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.node(self).grad;
    if (t.wants_grad(ia)) t.accumulate(ia, detail::reduce_to(g, t.value(ia).rows(), t.value(ia).cols()));
    if (t.wants_grad(ib)) t.accumulate(ib, detail::reduce_to(g, t.value(ib).rows(), t.value(ib).cols()));
  }, "add");
}

inline Var sub(Var a, Var b) {
  Matrix out = detail::binary_value(a.value(), b.value(), [](auto&& x, const auto& y) { x -= y; }, "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.node(self).grad;
    if (t.wants_grad(ia)) t.accumulate(ia, detail::reduce_to(g, t.value(ia).rows(), t.value(ia).cols()));
    if (t.wants_grad(ib)) t.accumulate(ib, -detail::reduce_to(g, t.value(ib).rows(), t.value(ib).cols()));
  }, "sub");
}

/// Elementwise product with broadcasting.
inline Var mul(Var a, Var b) {
  Matrix out = detail::binary_value(a.value(), b.value(), [](auto&& x, const auto& y) { x *= y; }, "mul");
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.node(self).grad;
    auto grad_for = [&](int mine, int other) {
      Matrix gm = g;
      detail::apply_bcast(gm, t.value(other), [](auto&& x, const auto& y) { x *= y; });
      t.accumulate(mine, detail::reduce_to(gm, t.value(mine).rows(), t.value(mine).cols()));
    };
    if (t.wants_grad(ia)) grad_for(ia, ib);
    if (t.wants_grad(ib)) grad_for(ib, ia);
  }, "mul");
}

inline Var scale(Var a, double c) {
  Matrix out = a.value() * c;
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, c](Tape& t, int self) {
    t.accumulate(ia, t.node(self).grad * c);
  }, "scale");
}

inline Var add_scalar(Var a, double c) {
  Matrix out = a.value().array() + c;
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape& t, int self) {
    t.accumulate(ia, t.node(self).grad);
  }, "add_scalar");
}

inline Var neg(Var a) { return scale(a, -1.0); }

/// Matrix product a (n x k) * b (k x m).
inline Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.node(self).grad;
    if (t.wants_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.wants_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  }, "matmul");
}

/// a (n x m) * b^T where b is (k x m).
inline Var matmul_nt(Var a, Var b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Matrix out = a.value() * b.value().transpose();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.node(self).grad;
    if (t.wants_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.wants_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  }, "matmul_nt");
}

/// Fused affine layer x W + b with b a (1 x m) row.
inline Var linear(Var x, Var w, Var b) {
  require(x.cols() == w.rows() && b.rows() == 1 && b.cols() == w.cols(), "linear: shape mismatch");
  Matrix out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  const int ix = x.id, iw = w.id, ib = b.id;
  return x.tape->record(std::move(out), {x, w, b}, [ix, iw, ib](Tape& t, int self) {
    const Matrix& g = t.node(self).grad;
    if (t.wants_grad(ix)) t.accumulate(ix, g * t.value(iw).transpose());
    if (t.wants_grad(iw)) t.accumulate(iw, t.value(ix).transpose() * g);
    if (t.wants_grad(ib)) t.accumulate(ib, g.colwise().sum());
  }, "linear");
}

namespace detail {

/// Unary elementwise op. `f` maps the input array to the output array; `df`
/// maps (input, output, upstream gradient) arrays to the input gradient. Both
/// are written as Eigen array expressions so transcendental functions are
/// vectorized.
template <class F, class DF>
Var unary(Var a, F f, DF df, const char* op) {
  Matrix out = f(a.value().array()).matrix();
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, df](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    const Matrix& y = t.value(self);
    const Matrix& g = t.node(self).grad;
    Matrix ga = df(x.array(), y.array(), g.array()).matrix();
    t.accumulate(ia, ga);
  }, op);
}

template <class X>
auto sigmoid_array(const X& x) {
  return 1.0 / (1.0 + (-x).exp());
}

}  // namespace detail

/// Vectorized logistic function of a matrix.
inline Matrix sigmoid_matrix(const Matrix& x) {
  return (1.0 / (1.0 + (-x.array()).exp())).matrix();
}

/// softplus_beta(x) = log(1 + exp(beta x)) / beta.
inline double softplus_value(double x, double beta) {
  const double bx = beta * x;
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(bx))) / beta;
}

/// Vectorized softplus_beta of a matrix (stable for large |beta x|).
inline Matrix softplus_matrix(const Matrix& x, double beta) {
  return (x.array().max(0.0) + ((-(beta * x.array()).abs()).exp() + 1.0).log() / beta).matrix();
}

inline Var sigmoid(Var a) {
  return detail::unary(
      a, [](const auto& x) { return detail::sigmoid_array(x); },
      [](const auto&, const auto& y, const auto& g) { return g * y * (1.0 - y); }, "sigmoid");
}

inline Var softplus(Var a, double beta) {
  return detail::unary(
      a,
      [beta](const auto& x) {
        return x.max(0.0) + ((-(beta * x).abs()).exp() + 1.0).log() / beta;
      },
      [beta](const auto& x, const auto&, const auto& g) { return g * detail::sigmoid_array(beta * x); },
      "softplus");
}

/// Derivative of softplus_beta, sigmoid(beta x), as a differentiable op.
inline Var softplus_grad(Var a, double beta) {
  return detail::unary(
      a, [beta](const auto& x) { return detail::sigmoid_array(beta * x); },
      [beta](const auto&, const auto& y, const auto& g) { return g * beta * y * (1.0 - y); },
      "softplus_grad");
}

inline Var exp(Var a) {
  return detail::unary(
      a, [](const auto& x) { return x.exp(); },
      [](const auto&, const auto& y, const auto& g) { return g * y; }, "exp");
}

inline Var log(Var a) {
  return detail::unary(
      a, [](const auto& x) { return x.log(); },
      [](const auto& x, const auto&, const auto& g) { return g / x; }, "log");
}

inline Var sin(Var a) {
  return detail::unary(
      a, [](const auto& x) { return x.sin(); },
      [](const auto& x, const auto&, const auto& g) { return g * x.cos(); }, "sin");
}

inline Var cos(Var a) {
  return detail::unary(
      a, [](const auto& x) { return x.cos(); },
      [](const auto& x, const auto&, const auto& g) { return -g * x.sin(); }, "cos");
}

inline Var square(Var a) {
  return detail::unary(
      a, [](const auto& x) { return x.square(); },
      [](const auto& x, const auto&, const auto& g) { return 2.0 * g * x; }, "square");
}

inline Var sqrt(Var a) {
  return detail::unary(
      a, [](const auto& x) { return x.sqrt(); },
      [](const auto&, const auto& y, const auto& g) { return 0.5 * g / y; }, "sqrt");
}

/// |x|; backward uses sign(x) with sign(0) = 0.
inline Var abs(Var a) {
  a.tape->note_kink_distance(a.value().cwiseAbs().minCoeff());
  return detail::unary(
      a, [](const auto& x) { return x.abs(); },
      [](const auto& x, const auto&, const auto& g) {
        return g * ((x > 0.0).template cast<double>() - (x < 0.0).template cast<double>());
      },
      "abs");
}

inline Var relu(Var a) {
  a.tape->note_kink_distance(a.value().cwiseAbs().minCoeff());
  return detail::unary(
      a, [](const auto& x) { return x.max(0.0); },
      [](const auto& x, const auto&, const auto& g) { return g * (x > 0.0).template cast<double>(); },
      "relu");
}

/// Clamp to [lo, hi]; zero gradient where clamped.
inline Var clamp(Var a, double lo, double hi) {
  const Matrix& v = a.value();
  a.tape->note_kink_distance(
      std::min((v.array() - lo).abs().minCoeff(), (v.array() - hi).abs().minCoeff()));
  return detail::unary(
      a, [lo, hi](const auto& x) { return x.max(lo).min(hi); },
      [lo, hi](const auto& x, const auto&, const auto& g) {
        return g * ((x > lo) && (x < hi)).template cast<double>();
      },
      "clamp");
}

/// Elementwise maximum with broadcasting; a tie routes the gradient to `a`.
inline Var maximum(Var a, Var b) {
  const auto [r, c] = detail::broadcast_shape(a.value(), b.value(), "maximum");
  Matrix ea = detail::expand(a.value(), r, c);
  Matrix eb = detail::expand(b.value(), r, c);
  a.tape->note_kink_distance((ea - eb).cwiseAbs().minCoeff());
  Matrix out = ea.cwiseMax(eb);
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.node(self).grad;
    const Eigen::Index r = g.rows(), c = g.cols();
    Matrix ea = detail::expand(t.value(ia), r, c);
    Matrix eb = detail::expand(t.value(ib), r, c);
    Matrix mask = (ea.array() >= eb.array()).cast<double>();
    if (t.wants_grad(ia))
      t.accumulate(ia, detail::reduce_to(g.cwiseProduct(mask), t.value(ia).rows(), t.value(ia).cols()));
    if (t.wants_grad(ib)) {
      Matrix gb = g.array() * (1.0 - mask.array());
      t.accumulate(ib, detail::reduce_to(gb, t.value(ib).rows(), t.value(ib).cols()));
    }
  }, "maximum");
}

inline Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape& t, int self) {
    const double g = t.node(self).grad(0, 0);
    t.accumulate(ia, Matrix::Constant(t.value(ia).rows(), t.value(ia).cols(), g));
  }, "sum");
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  require(n > 0, "mean: empty operand");
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, n](Tape& t, int self) {
    const double g = t.node(self).grad(0, 0) / n;
    t.accumulate(ia, Matrix::Constant(t.value(ia).rows(), t.value(ia).cols(), g));
  }, "mean");
}

/// (n x k) -> (n x 1) sum over columns.
inline Var row_sum(Var a) {
  Matrix out = a.value().rowwise().sum();
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& g = t.node(self).grad;
    t.accumulate(ia, g.replicate(1, t.value(ia).cols()));
  }, "row_sum");
}

/// Columns [start, start + count).
inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && start + count <= a.cols(), "slice_cols: range out of bounds");
  Matrix out = a.value().middleCols(start, count);
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, start, count](Tape& t, int self) {
    Matrix g = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
    g.middleCols(start, count) = t.node(self).grad;
    t.accumulate(ia, g);
  }, "slice_cols");
}

inline Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no operands");
  Tape* tape = parts[0].tape;
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index off = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  // record() takes at most four parents; chain wider concatenations.
  require(parts.size() <= 4, "concat_cols: at most four operands per call");
  Var ps[4];
  for (std::size_t i = 0; i < 4; ++i) ps[i] = i < parts.size() ? parts[i] : parts[0];
  auto backward = [ids, widths](Tape& t, int self) {
    const Matrix& g = t.node(self).grad;
    Eigen::Index o = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.wants_grad(ids[i])) t.accumulate(ids[i], g.middleCols(o, widths[i]));
      o += widths[i];
    }
  };
  switch (parts.size()) {
    case 1: return tape->record(std::move(out), {ps[0]}, backward, "concat_cols");
    case 2: return tape->record(std::move(out), {ps[0], ps[1]}, backward, "concat_cols");
    case 3: return tape->record(std::move(out), {ps[0], ps[1], ps[2]}, backward, "concat_cols");
    default: return tape->record(std::move(out), {ps[0], ps[1], ps[2], ps[3]}, backward, "concat_cols");
  }
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// Stop-gradient: same value, no path back to `a`.
inline Var detach(Var a) { return a.tape->constant(a.value(), "detach"); }

/// Sum over consecutive row blocks of `segment` rows: (n*segment x k) -> (n x k).
inline Var segment_sum(Var a, Eigen::Index segment) {
  require(segment > 0 && a.rows() % segment == 0, "segment_sum: rows not divisible by segment");
  const Eigen::Index n = a.rows() / segment;
  const Eigen::Index k = a.cols();
  Matrix out = Matrix::Zero(n, k);
  const Matrix& v = a.value();
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index i = 0; i < segment; ++i) out.row(r) += v.row(r * segment + i);
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, segment](Tape& t, int self) {
    const Matrix& g = t.node(self).grad;
    Matrix ga(g.rows() * segment, g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      for (Eigen::Index i = 0; i < segment; ++i) ga.row(r * segment + i) = g.row(r);
    t.accumulate(ia, ga);
  }, "segment_sum");
}

/// Euclidean norm of each row: (n x k) -> (n x 1). Gradient at a zero row is 0.
inline Var row_norm(Var a) {
  Matrix out = a.value().rowwise().norm();
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    const Matrix& y = t.value(self);
    const Matrix& g = t.node(self).grad;
    Matrix ga(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double s = y(r, 0) > 0 ? g(r, 0) / y(r, 0) : 0.0;
      ga.row(r) = x.row(r) * s;
    }
    t.accumulate(ia, ga);
  }, "row_norm");
}

// ---------------------------------------------------------------------------
// Gradient checking

struct FiniteDiffReport {
  double max_rel_error = 0.0;  ///< max_i |analytic - numeric| / max(1, |analytic|)
  int worst_index = -1;
  bool reliable = true;  ///< false when a kinked op sat within the probe step of its kink
};

/// Scalar function of one input matrix, expressed on a tape.
using TapeFunction = std::function<Var(Tape&, Var)>;

inline double eval_tape_function(const TapeFunction& f, const Matrix& x, double* kink = nullptr) {
  Tape t;
  t.set_check_finite(false);
  Var out = f(t, t.constant(x));
  if (kink) *kink = t.kink_distance();
  return out.scalar();
}

/// Compares reverse-mode gradients against central differences with step h.
/// Throws NumericalError naming the coordinate when f is non-finite at a probe.
inline FiniteDiffReport finite_diff_check(const TapeFunction& f, const Matrix& point, double h) {
  require(h > 0, "finite_diff_check: step must be positive");
  Matrix analytic;
  double kink0 = 0;
  {
    Tape t;
    Var x = t.variable(point);
    Var out = f(t, x);
    t.backward(out);
    analytic = x.grad();
    kink0 = t.kink_distance();
  }
  FiniteDiffReport rep;
  if (kink0 < h) rep.reliable = false;
  Matrix probe = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double x0 = point.data()[i];
    double kp = 0, km = 0;
    probe.data()[i] = x0 + h;
    const double fp = eval_tape_function(f, probe, &kp);
    probe.data()[i] = x0 - h;
    const double fm = eval_tape_function(f, probe, &km);
    probe.data()[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericalError("finite_diff_check", "non-finite value at coordinate " + std::to_string(i));
    const double num = (fp - fm) / (2 * h);
    const double a = analytic.data()[i];
    const double err = std::abs(a - num) / std::max(1.0, std::abs(a));
    if (err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst_index = static_cast<int>(i);
    }
  }
  return rep;
}

/// Plain-function variant used when the analytic gradient comes from outside a
/// tape (e.g. parameter gradients of a whole training loss).
inline FiniteDiffReport finite_diff_compare(const std::function<double(const Matrix&)>& f,
                                            const Matrix& point, const Matrix& analytic,
                                            double h) {
  require(point.size() == analytic.size(), "finite_diff_compare: size mismatch");
  FiniteDiffReport rep;
  Matrix probe = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double x0 = point.data()[i];
    probe.data()[i] = x0 + h;
    const double fp = f(probe);
    probe.data()[i] = x0 - h;
    const double fm = f(probe);
    probe.data()[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericalError("finite_diff_compare", "non-finite value at coordinate " + std::to_string(i));
    const double num = (fp - fm) / (2 * h);
    const double a = analytic.data()[i];
    const double err = std::abs(a - num) / std::max(1.0, std::abs(a));
    if (err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst_index = static_cast<int>(i);
    }
  }
  return rep;
}

}  // namespace h2o::ad
