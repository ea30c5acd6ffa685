#include "palot/tape.hpp"

#include <cmath>
#include <limits>

#include "palot/losses.hpp"
#include "palot/ot.hpp"

namespace palot::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::AddRow: return "add_row";
    case Op::Affine: return "scale";
    case Op::Mul: return "mul";
    case Op::Transpose: return "transpose";
    case Op::Softmax: return "softmax";
    case Op::LogSumExp: return "log-sum-exp";
    case Op::Normalize: return "normalize";
    case Op::Cosine: return "cosine";
    case Op::WeightedSum: return "weighted-sum";
    case Op::LayerNorm: return "layer-norm";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Gather: return "gather";
    case Op::SliceCols: return "slice";
    case Op::ConcatCols: return "concat-cols";
    case Op::ConcatRows: return "concat-rows";
    case Op::Sum: return "sum";
    case Op::Nll: return "nll";
    case Op::MaskRenormalize: return "mask-renormalize";
    case Op::Sinkhorn: return "sinkhorn-unrolled";
  }
  return "?";
}

const Matrix& Var::value() const {
  if (!tape_) throw DomainError("empty Var");
  return tape_->value(id_);
}

const Matrix& Var::grad() const {
  if (!tape_) throw DomainError("empty Var");
  return tape_->grad(id_);
}

double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw ShapeError("Var is not 1x1");
  return v(0, 0);
}

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n{Op::Leaf, std::move(value), Matrix(), requires_grad, false, nullptr};
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::push(Op op, Matrix value, std::span<const Var> inputs, Backprop rule) {
  if (consumed_) throw DomainError("cannot record on a consumed tape");
  bool needs = false;
  for (const auto& v : inputs) {
    if (v.tape_ != this) throw DomainError("op mixes Vars from different tapes");
    needs = needs || nodes_[v.id_].needs_grad;
  }
  Node n{op, std::move(value), Matrix(), needs, false, needs ? std::move(rule) : Backprop{}};
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  auto& n = nodes_[v.id_];
  if (!n.needs_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
    throw ShapeError(std::string("gradient shape mismatch at ") + op_name(n.op));
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

const Matrix& Tape::grad(int id) const {
  const auto& n = nodes_.at(id);
  if (!n.has_grad) {
    // Lazily materialize zeros for nodes that received no adjoint.
    auto& mut = const_cast<Node&>(n);
    mut.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    mut.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (consumed_) throw DomainError("tape already consumed by a previous backward()");
  if (loss.tape_ != this) throw DomainError("loss Var belongs to another tape");
  if (nodes_[loss.id_].value.size() != 1) throw ShapeError("backward() needs a 1x1 loss");
  consumed_ = true;
  visits_ = 0;
  accumulate(loss, Matrix::Ones(1, 1));
  for (int id = loss.id_; id >= 0; --id) {
    auto& n = nodes_[id];
    if (!n.has_grad || !n.rule) continue;
    n.rule(*this, id);
    ++visits_;
  }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace {

Tape& tape_of(const Var& a) {
  if (!a.tape()) throw DomainError("op on empty Var");
  return *a.tape();
}

void same_shape(const Var& a, const Var& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(what) + ": shape mismatch");
}

Matrix masked(const Matrix& a, const Matrix* mask) {
  if (!mask) return a;
  if (mask->rows() != a.rows() || mask->cols() != a.cols()) throw ShapeError("additive mask shape mismatch");
  return a + *mask;
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  auto& t = tape_of(a);
  const Var in[] = {a, b};
  return t.push(Op::MatMul, a.value() * b.value(), in, [a, b](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);
    if (tp.needs_grad(a)) tp.accumulate(a, g * b.value().transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, a.value().transpose() * g);
  });
}

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  const Var in[] = {a, b};
  return tape_of(a).push(Op::Add, a.value() + b.value(), in, [a, b](Tape& tp, int self) {
    tp.accumulate(a, tp.adjoint(self));
    tp.accumulate(b, tp.adjoint(self));
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  const Var in[] = {a, row};
  Matrix v = a.value().rowwise() + row.value().row(0);
  return tape_of(a).push(Op::AddRow, std::move(v), in, [a, row](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);
    tp.accumulate(a, g);
    if (tp.needs_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

Var affine(Var a, double s, double shift) {
  const Var in[] = {a};
  Matrix v = (a.value().array() * s + shift).matrix();
  return tape_of(a).push(Op::Affine, std::move(v), in,
                         [a, s](Tape& tp, int self) { tp.accumulate(a, tp.adjoint(self) * s); });
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  const Var in[] = {a, b};
  return tape_of(a).push(Op::Mul, a.value().cwiseProduct(b.value()), in, [a, b](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);
    if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(b.value()));
    if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var mul_const(Var a, const Matrix& m) {
  if (m.rows() != a.rows() || m.cols() != a.cols()) throw ShapeError("mul_const: shape mismatch");
  const Var in[] = {a};
  return tape_of(a).push(Op::Mul, a.value().cwiseProduct(m), in,
                         [a, m](Tape& tp, int self) { tp.accumulate(a, tp.adjoint(self).cwiseProduct(m)); });
}

Var transpose(Var a) {
  const Var in[] = {a};
  return tape_of(a).push(Op::Transpose, a.value().transpose(), in,
                         [a](Tape& tp, int self) { tp.accumulate(a, tp.adjoint(self).transpose()); });
}

Var softmax_rows(Var a, const Matrix* mask) {
  const Matrix x = masked(a.value(), mask);
  Matrix p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    if (!std::isfinite(m)) throw NumericError("softmax_rows: row has no finite entry");
    p.row(i) = (x.row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  const Var in[] = {a};
  return tape_of(a).push(Op::Softmax, p, in, [a, p](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);
    // dx = p .* (g - rowsum(g .* p))
    const Eigen::VectorXd dots = g.cwiseProduct(p).rowwise().sum();
    Matrix dx = p.cwiseProduct(g.colwise() - dots);
    tp.accumulate(a, dx);
  });
}

Var log_sum_exp_rows(Var a, const Matrix* mask) {
  const Matrix x = masked(a.value(), mask);
  Matrix out(x.rows(), 1);
  Matrix p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    if (!std::isfinite(m)) throw NumericError("log_sum_exp_rows: row has no finite entry");
    const Eigen::RowVectorXd e = (x.row(i).array() - m).exp().matrix();
    const double s = e.sum();
    out(i, 0) = m + std::log(s);
    p.row(i) = e / s;
  }
  const Var in[] = {a};
  return tape_of(a).push(Op::LogSumExp, std::move(out), in, [a, p](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);  // rows x 1
    Matrix dx = p.array().colwise() * g.col(0).array();
    tp.accumulate(a, dx);
  });
}

Var normalize_rows(Var a) {
  const Matrix& x = a.value();
  Eigen::VectorXd norms(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    norms(i) = x.row(i).norm();
    if (!(norms(i) >= kNormFloor)) throw DomainError("normalize_rows: zero-norm row " + std::to_string(i));
  }
  Matrix y = x.array().colwise() / norms.array();
  const Var in[] = {a};
  return tape_of(a).push(Op::Normalize, y, in, [a, y, norms](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);
    // dx = (g - y * <g, y>) / |x|
    const Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
    Matrix dx = (g - (y.array().colwise() * dots.array()).matrix());
    dx = dx.array().colwise() / norms.array();
    tp.accumulate(a, dx);
  });
}

Var cosine(Var a, Var b) {
  same_shape(a, b, "cosine");
  const double na = a.value().norm();
  const double nb = b.value().norm();
  if (!(na >= kNormFloor) || !(nb >= kNormFloor)) throw DomainError("cosine of a zero-norm vector");
  const double dot = a.value().cwiseProduct(b.value()).sum();
  const double c = dot / (na * nb);
  const Var in[] = {a, b};
  return tape_of(a).push(Op::Cosine, Matrix::Constant(1, 1, c), in, [a, b, na, nb, c](Tape& tp, int self) {
    const double g = tp.adjoint(self)(0, 0);
    if (tp.needs_grad(a)) tp.accumulate(a, g * (b.value() / (na * nb) - c * a.value() / (na * na)));
    if (tp.needs_grad(b)) tp.accumulate(b, g * (a.value() / (na * nb) - c * b.value() / (nb * nb)));
  });
}

Var weighted_sum(Var w, Var e) {
  if (w.value().size() != e.rows()) throw ShapeError("weighted_sum: weights/patches mismatch");
  const Eigen::RowVectorXd wr = Eigen::Map<const Eigen::RowVectorXd>(w.value().data(), w.value().size());
  Matrix r = wr * e.value();
  const Var in[] = {w, e};
  return tape_of(w).push(Op::WeightedSum, std::move(r), in, [w, e, wr](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);  // 1 x D
    if (tp.needs_grad(w)) {
      Matrix gw = e.value() * g.transpose();  // S x 1
      if (w.rows() == 1) gw.transposeInPlace();
      tp.accumulate(w, gw);
    }
    if (tp.needs_grad(e)) tp.accumulate(e, wr.transpose() * g);
  });
}

Var layer_norm_rows(Var a, Var gain, Var bias, double eps) {
  const auto n = a.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
    throw ShapeError("layer_norm_rows: gain/bias must be 1 x cols");
  const Matrix& x = a.value();
  Eigen::VectorXd inv_std(x.rows());
  Matrix xhat(x.rows(), n);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
  }
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const Var in[] = {a, gain, bias};
  return tape_of(a).push(Op::LayerNorm, std::move(y), in, [a, gain, bias, xhat, inv_std, n](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);
    if (tp.needs_grad(gain)) tp.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
    if (tp.needs_grad(bias)) tp.accumulate(bias, g.colwise().sum());
    if (tp.needs_grad(a)) {
      const Matrix gh = g.array().rowwise() * gain.value().row(0).array();
      Matrix dx(gh.rows(), n);
      for (Eigen::Index i = 0; i < gh.rows(); ++i) {
        const double m1 = gh.row(i).mean();
        const double m2 = gh.row(i).cwiseProduct(xhat.row(i)).mean();
        dx.row(i) = inv_std(i) * (gh.row(i).array() - m1 - xhat.row(i).array() * m2);
      }
      tp.accumulate(a, dx);
    }
  });
}

Var relu(Var a) {
  Matrix y = a.value().cwiseMax(0.0);
  const Var in[] = {a};
  return tape_of(a).push(Op::Relu, std::move(y), in, [a](Tape& tp, int self) {
    Matrix d = (a.value().array() > 0.0).cast<double>().matrix().cwiseProduct(tp.adjoint(self));
    tp.accumulate(a, d);
  });
}

Var tanh(Var a) {
  Matrix y = a.value().array().tanh().matrix();
  const Var in[] = {a};
  return tape_of(a).push(Op::Tanh, y, in, [a, y](Tape& tp, int self) {
    Matrix d = (1.0 - y.array().square()).matrix().cwiseProduct(tp.adjoint(self));
    tp.accumulate(a, d);
  });
}

Var gather_rows(Var table, const std::vector<int>& ids) {
  Matrix y(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || ids[k] >= table.rows()) throw DomainError("gather_rows: id out of range");
    y.row(static_cast<Eigen::Index>(k)) = table.value().row(ids[k]);
  }
  const Var in[] = {table};
  return tape_of(table).push(Op::Gather, std::move(y), in, [table, ids](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);
    Matrix d = Matrix::Zero(table.rows(), table.cols());
    for (std::size_t k = 0; k < ids.size(); ++k) d.row(ids[k]) += g.row(static_cast<Eigen::Index>(k));
    tp.accumulate(table, d);
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 1 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  const Var in[] = {a};
  return tape_of(a).push(Op::SliceCols, a.value().middleCols(start, count), in,
                         [a, start, count](Tape& tp, int self) {
                           Matrix d = Matrix::Zero(a.rows(), a.cols());
                           d.middleCols(start, count) = tp.adjoint(self);
                           tp.accumulate(a, d);
                         });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix y(parts.front().rows(), cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return tape_of(parts.front()).push(Op::ConcatCols, std::move(y), parts, [parts](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (tp.needs_grad(p)) tp.accumulate(p, g.middleCols(at, p.cols()));
      at += p.cols();
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix y(rows, parts.front().cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return tape_of(parts.front()).push(Op::ConcatRows, std::move(y), parts, [parts](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (tp.needs_grad(p)) tp.accumulate(p, g.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

Var sum(Var a) {
  const Var in[] = {a};
  return tape_of(a).push(Op::Sum, Matrix::Constant(1, 1, a.value().sum()), in, [a](Tape& tp, int self) {
    tp.accumulate(a, Matrix::Constant(a.rows(), a.cols(), tp.adjoint(self)(0, 0)));
  });
}

Var nll_rows(Var logits, const std::vector<int>& targets, const std::vector<bool>& valid) {
  const Matrix& x = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != x.rows() || valid.size() != targets.size())
    throw ShapeError("nll_rows: targets/mask length must equal rows");
  Matrix p = Matrix::Zero(x.rows(), x.cols());
  double total = 0.0;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    if (!valid[t]) continue;
    const int y = targets[t];
    if (y < 0 || y >= x.cols()) throw DomainError("nll_rows: target outside vocabulary");
    const double m = x.row(t).maxCoeff();
    const Eigen::RowVectorXd e = (x.row(t).array() - m).exp().matrix();
    const double s = e.sum();
    total += m + std::log(s) - x(t, y);
    p.row(t) = e / s;
    p(t, y) -= 1.0;
  }
  const Var in[] = {logits};
  return tape_of(logits).push(Op::Nll, Matrix::Constant(1, 1, total), in, [logits, p](Tape& tp, int self) {
    tp.accumulate(logits, p * tp.adjoint(self)(0, 0));
  });
}

Var mask_renormalize(Var p, const Matrix& keep) {
  if (keep.rows() != p.rows() || keep.cols() != p.cols()) throw ShapeError("mask_renormalize: shape mismatch");
  const Matrix kept = p.value().cwiseProduct(keep);
  const double z = kept.sum();
  if (!(z > 0.0)) throw DomainError("mask_renormalize: retained set carries no mass");
  const Matrix y = kept / z;
  const Var in[] = {p};
  return tape_of(p).push(Op::MaskRenormalize, y, in, [p, keep, y, z](Tape& tp, int self) {
    const auto& g = tp.adjoint(self);
    const double gy = g.cwiseProduct(y).sum();
    Matrix d = ((g.array() - gy) / z).matrix().cwiseProduct(keep);
    tp.accumulate(p, d);
  });
}

Var sinkhorn_plan(Var c, Var a, Var b, double eps, int iters) {
  const Matrix& cv = c.value();
  const auto m_full = cv.rows();
  const auto n_full = cv.cols();
  if (a.value().size() != m_full || b.value().size() != n_full)
    throw ShapeError("sinkhorn_plan: cost and marginals disagree");
  if (!(eps > 0.0) || iters < 1) throw DomainError("sinkhorn_plan: eps and iters must be positive");
  const Eigen::VectorXd av = Eigen::Map<const Eigen::VectorXd>(a.value().data(), m_full);
  const Eigen::VectorXd bv = Eigen::Map<const Eigen::VectorXd>(b.value().data(), n_full);
  check_simplex(av, "marginal a");
  check_simplex(bv, "marginal b");
  const auto ri = palot::detail::support_of(av);
  const auto ci = palot::detail::support_of(bv);
  const auto m = static_cast<Eigen::Index>(ri.size());
  const auto n = static_cast<Eigen::Index>(ci.size());
  Matrix cs(m, n);
  Eigen::VectorXd la(m), lb(n), as(m), bs(n);
  for (Eigen::Index i = 0; i < m; ++i) {
    as(i) = av(ri[i]);
    la(i) = std::log(as(i));
    for (Eigen::Index j = 0; j < n; ++j) cs(i, j) = cv(ri[i], ci[j]);
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    bs(j) = bv(ci[j]);
    lb(j) = std::log(bs(j));
  }
  auto solver = std::make_shared<palot::detail::LogSinkhorn<double>>(cs, la, lb, eps, true);
  for (int k = 0; k < iters; ++k) {
    solver->step();
    if (!solver->f.allFinite() || !solver->g.allFinite())
      throw OverflowError("sinkhorn_plan: potentials overflowed at iteration " + std::to_string(k + 1));
  }
  const Matrix ps = solver->plan();
  if (!ps.allFinite()) throw OverflowError("sinkhorn_plan: transport plan is not finite");
  Matrix plan = Matrix::Zero(m_full, n_full);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) plan(ri[i], ci[j]) = ps(i, j);

  const Var in[] = {c, a, b};
  return tape_of(c).push(
      Op::Sinkhorn, std::move(plan), in,
      [c, a, b, solver, ps, ri, ci, as, bs, eps, iters, m, n](Tape& tp, int self) {
        const auto& gfull = tp.adjoint(self);
        const auto& cs = solver->cost;
        Matrix dc = Matrix::Zero(m, n);
        Eigen::VectorXd dla = Eigen::VectorXd::Zero(m);
        Eigen::VectorXd dlb = Eigen::VectorXd::Zero(n);
        // P_ij = exp((f_i + g_j - C_ij) / eps)
        Matrix z(m, n);
        for (Eigen::Index i = 0; i < m; ++i)
          for (Eigen::Index j = 0; j < n; ++j) z(i, j) = gfull(ri[i], ci[j]) * ps(i, j) / eps;
        Eigen::VectorXd df = z.rowwise().sum();
        Eigen::VectorXd dg = z.colwise().sum().transpose();
        dc -= z;
        for (int k = iters; k >= 1; --k) {
          const auto& gk = solver->g_hist[k];
          const auto& fprev = solver->f_hist[k - 1];
          // f_k = eps*log a - eps*LSE_j((g_k - C)/eps): row softmax pi.
          Eigen::VectorXd dg_from_f = Eigen::VectorXd::Zero(n);
          for (Eigen::Index i = 0; i < m; ++i) {
            Eigen::RowVectorXd x(n);
            for (Eigen::Index j = 0; j < n; ++j) x(j) = (gk(j) - cs(i, j)) / eps;
            const double mx = x.maxCoeff();
            Eigen::RowVectorXd pi = (x.array() - mx).exp().matrix();
            pi /= pi.sum();
            dla(i) += eps * df(i);
            dg_from_f -= df(i) * pi.transpose();
            dc.row(i) += df(i) * pi;
          }
          dg += dg_from_f;
          // g_k = eps*log b - eps*LSE_i((f_{k-1} - C)/eps): column softmax kappa.
          Eigen::VectorXd df_prev = Eigen::VectorXd::Zero(m);
          for (Eigen::Index j = 0; j < n; ++j) {
            Eigen::VectorXd x(m);
            for (Eigen::Index i = 0; i < m; ++i) x(i) = (fprev(i) - cs(i, j)) / eps;
            const double mx = x.maxCoeff();
            Eigen::VectorXd kappa = (x.array() - mx).exp().matrix();
            kappa /= kappa.sum();
            dlb(j) += eps * dg(j);
            df_prev -= dg(j) * kappa;
            dc.col(j) += dg(j) * kappa;
          }
          df = df_prev;
          dg.setZero();
        }
        if (tp.needs_grad(c)) {
          Matrix d = Matrix::Zero(c.rows(), c.cols());
          for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index j = 0; j < n; ++j) d(ri[i], ci[j]) = dc(i, j);
          tp.accumulate(c, d);
        }
        if (tp.needs_grad(a)) {
          Matrix d = Matrix::Zero(a.rows(), a.cols());
          for (Eigen::Index i = 0; i < m; ++i) d(ri[i]) = dla(i) / as(i);
          tp.accumulate(a, d);
        }
        if (tp.needs_grad(b)) {
          Matrix d = Matrix::Zero(b.rows(), b.cols());
          for (Eigen::Index j = 0; j < n; ++j) d(ci[j]) = dlb(j) / bs(j);
          tp.accumulate(b, d);
        }
      });
}

Var cosine_cost(Var e, Var e_syn) {
  if (e.cols() != e_syn.cols()) throw ShapeError("cosine_cost: descriptor widths differ");
  const Var sim = matmul(normalize_rows(e), transpose(normalize_rows(e_syn)));
  return affine(sim, -1.0, 1.0);
}

}  // namespace palot::ad
