#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records nodes in creation order; every op only reads earlier
// nodes, so walking the vector backwards is a reverse topological order.
// A tape can be differentiated once.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "palot/error.hpp"

namespace palot::ad {

using Matrix = Eigen::MatrixXd;

enum class Op {
  Leaf,
  MatMul,
  Add,
  AddRow,
  Affine,
  Mul,
  Transpose,
  Softmax,
  LogSumExp,
  Normalize,
  Cosine,
  WeightedSum,
  LayerNorm,
  Relu,
  Tanh,
  Gather,
  SliceCols,
  ConcatCols,
  ConcatRows,
  Sum,
  Nll,
  MaskRenormalize,
  Sinkhorn,
};

const char* op_name(Op op);

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  int id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Input node. Gradients are only accumulated for leaves with requires_grad.
  Var leaf(Matrix value, bool requires_grad = false);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  // Seeds d(loss)/d(loss) = 1 and propagates to every node that needs a
  // gradient. `loss` must be 1x1. Throws DomainError when called twice.
  void backward(Var loss);

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  // Nodes whose backward rule ran during the last backward() call.
  std::size_t backward_visits() const noexcept { return visits_; }
  Op op(Var v) const { return nodes_.at(v.id_).op; }

  const Matrix& value(int id) const { return nodes_.at(id).value; }
  const Matrix& grad(int id) const;

  // Used by op implementations.
  using Backprop = std::function<void(Tape&, int self)>;
  Var push(Op op, Matrix value, std::span<const Var> inputs, Backprop rule);
  bool needs_grad(const Var& v) const { return nodes_.at(v.id_).needs_grad; }
  // Adds `g` into the adjoint of `v` (no-op when v needs no gradient).
  void accumulate(const Var& v, const Matrix& g);
  const Matrix& adjoint(int id) const { return nodes_.at(id).grad; }

 private:
  struct Node {
    Op op;
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    bool has_grad = false;
    Backprop rule;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::size_t visits_ = 0;
};

// ---------------------------------------------------------------------------
// Ops. Shapes follow Eigen conventions; row vectors are 1 x n.
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
// a (m x n) + row (1 x n) broadcast over rows.
Var add_row(Var a, Var row);
// scale * a + shift, elementwise.
Var affine(Var a, double scale, double shift = 0.0);
inline Var scale(Var a, double s) { return affine(a, s, 0.0); }
Var mul(Var a, Var b);
// Elementwise product with a fixed matrix.
Var mul_const(Var a, const Matrix& m);
Var transpose(Var a);
// Row-wise softmax of (a + additive_mask); mask entries may be -inf.
Var softmax_rows(Var a, const Matrix* additive_mask = nullptr);
// m x 1 column of row-wise log-sum-exp of (a + additive_mask).
Var log_sum_exp_rows(Var a, const Matrix* additive_mask = nullptr);
// Rows scaled to unit L2 norm; rows below the norm floor are an error.
Var normalize_rows(Var a);
// cos(a, b) for two equally sized matrices viewed as flat vectors; 1 x 1.
Var cosine(Var a, Var b);
// sum_s w_s * e.row(s); w is 1 x S or S x 1, e is S x D; result 1 x D.
Var weighted_sum(Var w, Var e);
// Row-wise layer normalization with gain and bias rows (1 x n).
Var layer_norm_rows(Var a, Var gain, Var bias, double eps = 1e-5);
Var relu(Var a);
Var tanh(Var a);
// Rows of `table` selected by `ids`.
Var gather_rows(Var table, const std::vector<int>& ids);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var sum(Var a);
inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.rows() * a.cols())); }
// Sum over rows t with valid[t] of (logsumexp(logits.row(t)) - logits(t, targets[t])); 1 x 1.
Var nll_rows(Var logits, const std::vector<int>& targets, const std::vector<bool>& valid);
// (p .* keep) / sum(p .* keep) with a fixed 0/1 keep pattern; gradients pass
// through the kept entries and the renormalization only.
Var mask_renormalize(Var p, const Matrix& keep);

// Unrolled log-domain Sinkhorn returning the plan. c is m x n; a is m x 1
// (or 1 x m); b is n x 1 (or 1 x n). The zero-mass support is fixed from
// the forward values. Differentiable with respect to c, a and b through
// every iteration.
Var sinkhorn_plan(Var c, Var a, Var b, double eps, int iters);

// 1 - cos(e_s, e_syn_t) for every pair of rows.
Var cosine_cost(Var e, Var e_syn);

}  // namespace palot::ad
