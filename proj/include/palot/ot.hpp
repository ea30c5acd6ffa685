#pragma once

// Cosine transport costs, entropic optimal transport in the log domain, and
// an exact transportation-problem solver for small instances.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "palot/attnpool.hpp"
#include "palot/error.hpp"
#include "palot/losses.hpp"

namespace palot {

// C(s, t) = 1 - cos(e_s, e_syn_t), clamped to [0, 2].
template <typename DA, typename DB>
Mat<typename DA::Scalar> cosine_cost(const Eigen::MatrixBase<DA>& e, const Eigen::MatrixBase<DB>& e_syn) {
  using Scalar = typename DA::Scalar;
  if (e.cols() != e_syn.cols()) throw ShapeError("cosine_cost: descriptor widths differ");
  const Mat<Scalar> a = normalize_rows(e);
  const Mat<Scalar> b = normalize_rows(e_syn);
  Mat<Scalar> c = (Scalar(1) - (a * b.transpose()).array()).matrix();
  return c.cwiseMax(Scalar(0)).cwiseMin(Scalar(2));
}

template <typename Derived>
void check_simplex(const Eigen::MatrixBase<Derived>& w, const char* what) {
  using Scalar = typename Derived::Scalar;
  if (w.size() < 1) throw ShapeError(std::string(what) + " is empty");
  if (!w.allFinite() || (w.array() < Scalar(0)).any())
    throw DomainError(std::string(what) + " must be finite and nonnegative");
  const double tol = std::is_same_v<Scalar, float> ? 1e-5 : 1e-9;
  if (std::abs(static_cast<double>(w.sum()) - 1.0) > tol) throw DomainError(std::string(what) + " must sum to 1");
}

// Transport marginal from patch weights: top-rho retention, then renormalize.
template <typename Derived>
Vec<typename Derived::Scalar> ot_marginals(const Eigen::MatrixBase<Derived>& w, double rho,
                                           RetentionMode mode = RetentionMode::Mass) {
  check_simplex(w, "patch weights");
  return truncate_renormalize(w, rho, mode);
}

template <typename Scalar>
struct TransportPlan {
  Mat<Scalar> plan;
  Vec<Scalar> a;
  Vec<Scalar> b;
  Scalar cost{};               // <P, C>
  double row_residual = 0.0;   // ||P 1 - a||_1
  double col_residual = 0.0;   // ||P^T 1 - b||_1
  int iterations = 0;
};

enum class StopRule { FixedIterations, Converged };

struct SinkhornOptions {
  double eps = 0.05;
  int iters = 30;
  // Converged: stop once the column residual drops below `tol`, running at
  // most `iters` iterations. Intended for diagnostics; training uses the
  // fixed budget.
  StopRule stop = StopRule::FixedIterations;
  double tol = 1e-12;
};

namespace detail {

inline std::vector<Eigen::Index> support_of(const auto& v) {
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (v(i) > 0) idx.push_back(i);
  return idx;
}

// Log-domain iteration state on the positive-mass support.
//   g_j <- eps * (log b_j - LSE_i((f_i - C_ij) / eps))
//   f_i <- eps * (log a_i - LSE_j((g_j - C_ij) / eps))
template <typename Scalar>
struct LogSinkhorn {
  Mat<Scalar> cost;
  Vec<Scalar> log_a;
  Vec<Scalar> log_b;
  Scalar eps;
  Vec<Scalar> f;
  Vec<Scalar> g;
  // Potentials after each iteration when recording (index 0 = initial).
  bool record = false;
  std::vector<Vec<Scalar>> f_hist;
  std::vector<Vec<Scalar>> g_hist;

  LogSinkhorn(Mat<Scalar> c, Vec<Scalar> la, Vec<Scalar> lb, Scalar e, bool rec = false)
      : cost(std::move(c)), log_a(std::move(la)), log_b(std::move(lb)), eps(e), record(rec) {
    f = Vec<Scalar>::Zero(cost.rows());
    g = Vec<Scalar>::Zero(cost.cols());
    if (record) {
      f_hist.push_back(f);
      g_hist.push_back(g);
    }
  }

  void step() {
    const auto m = cost.rows();
    const auto n = cost.cols();
    Vec<Scalar> x(m);
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < m; ++i) x(i) = (f(i) - cost(i, j)) / eps;
      g(j) = eps * (log_b(j) - log_sum_exp(x));
    }
    Vec<Scalar> y(n);
    for (Eigen::Index i = 0; i < m; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) y(j) = (g(j) - cost(i, j)) / eps;
      f(i) = eps * (log_a(i) - log_sum_exp(y));
    }
    if (record) {
      f_hist.push_back(f);
      g_hist.push_back(g);
    }
  }

  Mat<Scalar> plan() const {
    Mat<Scalar> p(cost.rows(), cost.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      for (Eigen::Index j = 0; j < p.cols(); ++j) p(i, j) = std::exp((f(i) + g(j) - cost(i, j)) / eps);
    return p;
  }
};

}  // namespace detail

// Log-domain Sinkhorn. Each iteration updates the column potential then the
// row potential, so the returned plan matches `a` up to rounding and the
// column residual measures convergence. Zero-mass rows/columns are removed
// before solving and come back as zero rows/columns of the plan.
template <typename DC, typename DA, typename DB>
TransportPlan<typename DC::Scalar> sinkhorn(const Eigen::MatrixBase<DC>& c, const Eigen::MatrixBase<DA>& a,
                                            const Eigen::MatrixBase<DB>& b, const SinkhornOptions& opt = {}) {
  using Scalar = typename DC::Scalar;
  if (c.rows() != a.size() || c.cols() != b.size()) throw ShapeError("sinkhorn: cost and marginals disagree");
  if (!c.allFinite()) throw NumericError("sinkhorn: cost is not finite");
  if (!(opt.eps > 0.0)) throw DomainError("sinkhorn: eps must be positive");
  if (opt.iters < 1) throw DomainError("sinkhorn: iters must be positive");
  check_simplex(a, "marginal a");
  check_simplex(b, "marginal b");

  const auto ri = detail::support_of(a);
  const auto ci = detail::support_of(b);
  const auto m = static_cast<Eigen::Index>(ri.size());
  const auto n = static_cast<Eigen::Index>(ci.size());
  Mat<Scalar> cs(m, n);
  Vec<Scalar> la(m), lb(n), bs(n);
  for (Eigen::Index i = 0; i < m; ++i) {
    la(i) = std::log(a(ri[i]));
    for (Eigen::Index j = 0; j < n; ++j) cs(i, j) = c(ri[i], ci[j]);
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    bs(j) = b(ci[j]);
    lb(j) = std::log(bs(j));
  }

  detail::LogSinkhorn<Scalar> solver(std::move(cs), std::move(la), std::move(lb), static_cast<Scalar>(opt.eps));
  int it = 0;
  while (it < opt.iters) {
    solver.step();
    ++it;
    if (!solver.f.allFinite() || !solver.g.allFinite())
      throw OverflowError("sinkhorn: potentials overflowed at iteration " + std::to_string(it) +
                          " (eps too small for this scalar type)");
    if (opt.stop == StopRule::Converged &&
        static_cast<double>((solver.plan().colwise().sum().transpose() - bs).cwiseAbs().sum()) < opt.tol)
      break;
  }

  const Mat<Scalar> ps = solver.plan();
  if (!ps.allFinite()) throw OverflowError("sinkhorn: transport plan is not finite");

  TransportPlan<Scalar> out;
  out.plan = Mat<Scalar>::Zero(c.rows(), c.cols());
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) out.plan(ri[i], ci[j]) = ps(i, j);
  out.a = a;
  out.b = b;
  out.cost = (out.plan.array() * c.array()).sum();
  out.row_residual = static_cast<double>((out.plan.rowwise().sum() - out.a).cwiseAbs().sum());
  out.col_residual = static_cast<double>((out.plan.colwise().sum().transpose() - out.b).cwiseAbs().sum());
  out.iterations = it;
  return out;
}

// Largest side accepted by the exact solver.
inline constexpr Eigen::Index kLpOracleMaxSide = 8;

// Exact optimal transport by the transportation simplex: north-west-corner
// starting basis, dual potentials on the basis tree, Bland's rule pivots.
TransportPlan<double> lp_oracle(const Eigen::MatrixXd& c, const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace palot
