#pragma once

// First-order reverse-mode differentiation over dense rank-2 tensors.
//
// A Tape owns an append-only list of nodes; every primitive appends one node
// holding its forward value, its parent ids (always smaller than its own id)
// and a closure that pushes the node's gradient to its parents. backward()
// walks the tape once in reverse id order.
//
// Conventions: relu'(0) = 0, sign(0) = 0. Scatter-style reductions run in
// index order so repeated runs are bitwise identical.

#include "pigmen/core.hpp"

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pigmen::ad {

class Tape;

/// Handle to one tape node.
class Value {
 public:
  Value() = default;

  const Matrix& data() const;
  /// Gradient accumulated by the last backward(); empty if none reached it.
  const Matrix& grad() const;
  Eigen::Index rows() const { return data().rows(); }
  Eigen::Index cols() const { return data().cols(); }
  Eigen::Index size() const { return data().size(); }
  double item() const;

  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Value(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// An externally supplied linear map, differentiable through its transpose.
struct LinearOperatorHandle {
  Eigen::Index n_rows = 0;
  Eigen::Index n_cols = 0;
  std::function<Vector(const Vector&)> apply;
  std::function<Vector(const Vector&)> apply_transpose;
};

inline LinearOperatorHandle transpose(const LinearOperatorHandle& op) {
  return {op.n_cols, op.n_rows, op.apply_transpose, op.apply};
}

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (parameters, or inputs we want gradients for).
  Value leaf(Matrix data) { return push("leaf", std::move(data), {}, nullptr, true); }

  /// Non-differentiable input; gradients never flow into it.
  Value constant(Matrix data) { return push("constant", std::move(data), {}, nullptr, false); }

  Value scalar_constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

  /// Appends a node. `parents` must already be on this tape.
  Value record(std::string_view op, Matrix data, std::vector<std::size_t> parents, BackwardFn fn) {
    bool rg = false;
    for (auto p : parents) {
      if (p >= nodes_.size()) throw ShapeError("parent id beyond tape end");
      rg = rg || nodes_[p].requires_grad;
    }
    return push(op, std::move(data), std::move(parents), rg ? std::move(fn) : nullptr, rg);
  }

  /// Reverse sweep from a scalar root seeded with 1. Clears earlier gradients.
  void backward(const Value& root) {
    check(root);
    const auto& d = nodes_[root.id()].data;
    if (d.rows() != 1 || d.cols() != 1) {
      throw ShapeError("backward root must be scalar, got " + std::to_string(d.rows()) + "x" + std::to_string(d.cols()));
    }
    backward(root, Matrix::Ones(1, 1));
  }

  /// Vector-Jacobian product: reverse sweep seeded with `seed` (root's shape).
  void backward(const Value& root, const Matrix& seed) {
    check(root);
    if (seed.rows() != root.rows() || seed.cols() != root.cols()) throw ShapeError("seed shape != root shape");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[root.id()].grad = seed;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, id);
    }
  }

  const Matrix& data(std::size_t id) const { return nodes_.at(id).data; }
  const Matrix& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  std::string_view op(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator of a node, zero-allocated on first use. Only valid
  /// inside a backward closure.
  Matrix& accumulator(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.data.rows(), n.data.cols());
    return n.grad;
  }

  void check(const Value& v) const {
    if (v.tape() != this) throw ShapeError("value belongs to a different tape");
  }

 private:
  struct Node {
    Matrix data;
    Matrix grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    std::string_view op;
  };

  Value push(std::string_view op, Matrix data, std::vector<std::size_t> parents, BackwardFn fn, bool rg) {
    nodes_.push_back(Node{std::move(data), Matrix(), std::move(parents), std::move(fn), rg, op});
    return Value(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

inline const Matrix& Value::data() const { return tape_->data(id_); }
inline const Matrix& Value::grad() const { return tape_->grad(id_); }
inline double Value::item() const {
  if (size() != 1) throw ShapeError("item() on a non-scalar value");
  return data()(0, 0);
}

namespace detail {

inline Tape& same_tape(const Value& a, const Value& b) {
  if (!a.valid() || a.tape() != b.tape()) throw ShapeError("operands live on different tapes");
  return *a.tape();
}

inline void same_shape(const Value& a, const Value& b, std::string_view op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

inline bool rg(const Tape& t, std::size_t id) { return t.requires_grad(id); }

inline std::shared_ptr<const std::vector<int>> checked_indices(const std::vector<int>& idx, Eigen::Index bound,
                                                               std::string_view op) {
  for (int i : idx) {
    if (i < 0 || i >= bound) {
      throw ShapeError(std::string(op) + ": index " + std::to_string(i) + " out of bounds [0, " +
                       std::to_string(bound) + ")");
    }
  }
  return std::make_shared<const std::vector<int>>(idx);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

/// x W + b with x: n x in, W: in x out, b: 1 x out.
inline Value linear_layer(const Value& W, const Value& b, const Value& x) {
  Tape& t = detail::same_tape(W, x);
  detail::same_tape(W, b);
  if (x.cols() != W.rows()) throw ShapeError("linear_layer: x cols != W rows");
  if (b.rows() != 1 || b.cols() != W.cols()) throw ShapeError("linear_layer: bias must be 1 x out");
  Matrix out = x.data() * W.data();
  out.rowwise() += b.data().row(0);
  const auto w = W.id(), bi = b.id(), xi = x.id();
  return t.record("linear_layer", std::move(out), {w, bi, xi}, [w, bi, xi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (detail::rg(t, xi)) t.accumulator(xi).noalias() += g * t.data(w).transpose();
    if (detail::rg(t, w)) t.accumulator(w).noalias() += t.data(xi).transpose() * g;
    if (detail::rg(t, bi)) t.accumulator(bi) += g.colwise().sum();
  });
}

/// x W (no bias).
inline Value matmul(const Value& x, const Value& W) {
  Tape& t = detail::same_tape(x, W);
  if (x.cols() != W.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix out = x.data() * W.data();
  const auto xi = x.id(), w = W.id();
  return t.record("matmul", std::move(out), {xi, w}, [xi, w](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (detail::rg(t, xi)) t.accumulator(xi).noalias() += g * t.data(w).transpose();
    if (detail::rg(t, w)) t.accumulator(w).noalias() += t.data(xi).transpose() * g;
  });
}

inline Value relu(const Value& x) {
  Tape& t = *x.tape();
  Matrix out = x.data().cwiseMax(0.0);
  const auto xi = x.id();
  return t.record("relu", std::move(out), {xi}, [xi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& in = t.data(xi);
    t.accumulator(xi).array() += (in.array() > 0.0).select(g.array(), 0.0);
  });
}

inline Value add(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::same_shape(a, b, "add");
  const auto ai = a.id(), bi = b.id();
  return t.record("add", a.data() + b.data(), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (detail::rg(t, ai)) t.accumulator(ai) += g;
    if (detail::rg(t, bi)) t.accumulator(bi) += g;
  });
}

inline Value sub(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::same_shape(a, b, "sub");
  const auto ai = a.id(), bi = b.id();
  return t.record("sub", a.data() - b.data(), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (detail::rg(t, ai)) t.accumulator(ai) += g;
    if (detail::rg(t, bi)) t.accumulator(bi) -= g;
  });
}

/// x + b with b (1 x cols) broadcast over rows.
inline Value add_row(const Value& x, const Value& b) {
  Tape& t = detail::same_tape(x, b);
  if (b.rows() != 1 || b.cols() != x.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  Matrix out = x.data();
  out.rowwise() += b.data().row(0);
  const auto xi = x.id(), bi = b.id();
  return t.record("add_row", std::move(out), {xi, bi}, [xi, bi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (detail::rg(t, xi)) t.accumulator(xi) += g;
    if (detail::rg(t, bi)) t.accumulator(bi) += g.colwise().sum();
  });
}

/// Elementwise product.
inline Value mul(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::same_shape(a, b, "mul");
  const auto ai = a.id(), bi = b.id();
  Matrix out = a.data().cwiseProduct(b.data());
  return t.record("mul", std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (detail::rg(t, ai)) t.accumulator(ai) += g.cwiseProduct(t.data(bi));
    if (detail::rg(t, bi)) t.accumulator(bi) += g.cwiseProduct(t.data(ai));
  });
}

inline Value scale(const Value& x, double c) {
  Tape& t = *x.tape();
  const auto xi = x.id();
  return t.record("scale", c * x.data(), {xi}, [xi, c](Tape& t, std::size_t self) {
    t.accumulator(xi) += c * t.grad(self);
  });
}

inline Value square(const Value& x) {
  Tape& t = *x.tape();
  const auto xi = x.id();
  return t.record("square", x.data().cwiseAbs2(), {xi}, [xi](Tape& t, std::size_t self) {
    t.accumulator(xi) += 2.0 * t.grad(self).cwiseProduct(t.data(xi));
  });
}

inline Value abs(const Value& x) {
  Tape& t = *x.tape();
  const auto xi = x.id();
  return t.record("abs", x.data().cwiseAbs(), {xi}, [xi](Tape& t, std::size_t self) {
    // sign(0) = 0
    const Matrix& in = t.data(xi);
    const Matrix& g = t.grad(self);
    t.accumulator(xi).array() += (in.array() > 0.0).select(g.array(), (in.array() < 0.0).select(-g.array(), 0.0));
  });
}

/// Column-wise concatenation [a | b]; rows must match.
inline Value concat(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.rows() != b.rows()) throw ShapeError("concat: row counts differ");
  Matrix out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a.data();
  out.rightCols(b.cols()) = b.data();
  const auto ai = a.id(), bi = b.id();
  const auto ac = a.cols(), bc = b.cols();
  return t.record("concat", std::move(out), {ai, bi}, [ai, bi, ac, bc](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (detail::rg(t, ai)) t.accumulator(ai) += g.leftCols(ac);
    if (detail::rg(t, bi)) t.accumulator(bi) += g.rightCols(bc);
  });
}

/// out[k] = x[idx[k]].
inline Value gather_rows(const Value& x, const std::vector<int>& idx) {
  Tape& t = *x.tape();
  auto ids = detail::checked_indices(idx, x.rows(), "gather_rows");
  const Matrix& in = x.data();
  Matrix out(static_cast<Eigen::Index>(ids->size()), in.cols());
  for (std::size_t k = 0; k < ids->size(); ++k) out.row(static_cast<Eigen::Index>(k)) = in.row((*ids)[k]);
  const auto xi = x.id();
  return t.record("gather_rows", std::move(out), {xi}, [xi, ids](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& acc = t.accumulator(xi);
    for (std::size_t k = 0; k < ids->size(); ++k) acc.row((*ids)[k]) += g.row(static_cast<Eigen::Index>(k));
  });
}

/// out[i] = sum_{k : idx[k] = i} x[k], summed in increasing k.
inline Value scatter_sum(const Value& x, const std::vector<int>& idx, Eigen::Index n_out) {
  Tape& t = *x.tape();
  if (static_cast<Eigen::Index>(idx.size()) != x.rows()) throw ShapeError("scatter_sum: one index per row required");
  auto ids = detail::checked_indices(idx, n_out, "scatter_sum");
  const Matrix& in = x.data();
  Matrix out = Matrix::Zero(n_out, in.cols());
  for (std::size_t k = 0; k < ids->size(); ++k) out.row((*ids)[k]) += in.row(static_cast<Eigen::Index>(k));
  const auto xi = x.id();
  return t.record("scatter_sum", std::move(out), {xi}, [xi, ids](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& acc = t.accumulator(xi);
    for (std::size_t k = 0; k < ids->size(); ++k) acc.row(static_cast<Eigen::Index>(k)) += g.row((*ids)[k]);
  });
}

inline Value reduce_sum(const Value& x) {
  Tape& t = *x.tape();
  const auto xi = x.id();
  return t.record("reduce_sum", Matrix::Constant(1, 1, x.data().sum()), {xi}, [xi](Tape& t, std::size_t self) {
    t.accumulator(xi).array() += t.grad(self)(0, 0);
  });
}

inline Value reduce_mean(const Value& x) {
  if (x.size() == 0) throw ShapeError("reduce_mean of an empty tensor");
  Tape& t = *x.tape();
  const auto xi = x.id();
  const double inv = 1.0 / static_cast<double>(x.size());
  return t.record("reduce_mean", Matrix::Constant(1, 1, x.data().sum() * inv), {xi},
                  [xi, inv](Tape& t, std::size_t self) { t.accumulator(xi).array() += t.grad(self)(0, 0) * inv; });
}

/// Columns [begin, begin + count).
inline Value slice_cols(const Value& x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) throw ShapeError("slice_cols: range out of bounds");
  Tape& t = *x.tape();
  const auto xi = x.id();
  return t.record("slice_cols", x.data().middleCols(begin, count), {xi},
                  [xi, begin, count](Tape& t, std::size_t self) {
                    t.accumulator(xi).middleCols(begin, count) += t.grad(self);
                  });
}

/// Rows [begin, begin + count).
inline Value slice_rows(const Value& x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) throw ShapeError("slice_rows: range out of bounds");
  Tape& t = *x.tape();
  const auto xi = x.id();
  return t.record("slice_rows", x.data().middleRows(begin, count), {xi},
                  [xi, begin, count](Tape& t, std::size_t self) {
                    t.accumulator(xi).middleRows(begin, count) += t.grad(self);
                  });
}

/// Row-major reshape.
inline Value reshape(const Value& x, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != x.size()) throw ShapeError("reshape: element count changes");
  Tape& t = *x.tape();
  Matrix out = Eigen::Map<const Matrix>(x.data().data(), rows, cols);
  const auto xi = x.id();
  const auto r0 = x.rows(), c0 = x.cols();
  return t.record("reshape", std::move(out), {xi}, [xi, r0, c0](Tape& t, std::size_t self) {
    t.accumulator(xi) += Eigen::Map<const Matrix>(t.grad(self).data(), r0, c0);
  });
}

/// y = A u where u (any shape, n_cols entries) is read row-major; y is
/// n_rows x 1. Backward pushes A^T g into u.
inline Value apply_linear_operator(const LinearOperatorHandle& op, const Value& u) {
  if (u.size() != op.n_cols) {
    throw ShapeError("apply_linear_operator: operand has " + std::to_string(u.size()) + " entries, operator expects " +
                     std::to_string(op.n_cols));
  }
  Tape& t = *u.tape();
  const Vector in = Eigen::Map<const Vector>(u.data().data(), u.size());
  Vector y = op.apply(in);
  if (y.size() != op.n_rows) throw ShapeError("apply_linear_operator: operator returned wrong length");
  Matrix out = Eigen::Map<const Matrix>(y.data(), op.n_rows, 1);
  const auto ui = u.id();
  const auto r0 = u.rows(), c0 = u.cols();
  auto transpose_apply = op.apply_transpose;
  return t.record("apply_linear_operator", std::move(out), {ui},
                  [ui, r0, c0, transpose_apply](Tape& t, std::size_t self) {
                    const Matrix& g = t.grad(self);
                    const Vector back = transpose_apply(Eigen::Map<const Vector>(g.data(), g.size()));
                    t.accumulator(ui) += Eigen::Map<const Matrix>(back.data(), r0, c0);
                  });
}

}  // namespace pigmen::ad
