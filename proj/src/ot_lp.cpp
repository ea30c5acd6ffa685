#include <algorithm>
#include <deque>
#include <utility>

#include "palot/ot.hpp"

namespace palot {

namespace {

struct Cell {
  int row;
  int col;
};

// Bipartite node numbering: rows are 0..m-1, columns are m..m+n-1.
class BasisTree {
 public:
  BasisTree(int m, int n) : m_(m), n_(n) {}

  void set(std::vector<Cell> cells) { cells_ = std::move(cells); }
  const std::vector<Cell>& cells() const { return cells_; }
  std::vector<Cell>& cells() { return cells_; }

  bool contains(int i, int j) const {
    return std::any_of(cells_.begin(), cells_.end(), [&](const Cell& c) { return c.row == i && c.col == j; });
  }

  // u_i + v_j = c_ij on every basic cell, with u_0 = 0.
  void potentials(const Eigen::MatrixXd& cost, Eigen::VectorXd& u, Eigen::VectorXd& v) const {
    u = Eigen::VectorXd::Constant(m_, std::numeric_limits<double>::quiet_NaN());
    v = Eigen::VectorXd::Constant(n_, std::numeric_limits<double>::quiet_NaN());
    u(0) = 0.0;
    bool changed = true;
    while (changed) {
      changed = false;
      for (const auto& c : cells_) {
        const bool ku = !std::isnan(u(c.row));
        const bool kv = !std::isnan(v(c.col));
        if (ku && !kv) {
          v(c.col) = cost(c.row, c.col) - u(c.row);
          changed = true;
        } else if (!ku && kv) {
          u(c.row) = cost(c.row, c.col) - v(c.col);
          changed = true;
        }
      }
    }
    if (u.hasNaN() || v.hasNaN()) throw NumericError("lp_oracle: basis is not a spanning tree");
  }

  // Indices into cells() of the tree path from row `i` to column `j`.
  std::vector<std::size_t> path(int i, int j) const {
    const int nodes = m_ + n_;
    std::vector<int> parent(nodes, -1);
    std::vector<std::size_t> via(nodes, 0);
    std::vector<bool> seen(nodes, false);
    std::deque<int> queue{i};
    seen[i] = true;
    while (!queue.empty()) {
      const int x = queue.front();
      queue.pop_front();
      for (std::size_t k = 0; k < cells_.size(); ++k) {
        const int r = cells_[k].row;
        const int c = m_ + cells_[k].col;
        int y = -1;
        if (r == x) y = c;
        else if (c == x) y = r;
        if (y < 0 || seen[y]) continue;
        seen[y] = true;
        parent[y] = x;
        via[y] = k;
        queue.push_back(y);
      }
    }
    const int target = m_ + j;
    if (!seen[target]) throw NumericError("lp_oracle: basis tree is disconnected");
    std::vector<std::size_t> edges;
    for (int y = target; y != i; y = parent[y]) edges.push_back(via[y]);
    std::reverse(edges.begin(), edges.end());
    return edges;
  }

 private:
  int m_;
  int n_;
  std::vector<Cell> cells_;
};

}  // namespace

TransportPlan<double> lp_oracle(const Eigen::MatrixXd& c, const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const auto m = static_cast<int>(c.rows());
  const auto n = static_cast<int>(c.cols());
  if (a.size() != m || b.size() != n) throw ShapeError("lp_oracle: cost and marginals disagree");
  if (m < 1 || n < 1) throw ShapeError("lp_oracle: empty instance");
  if (m > kLpOracleMaxSide || n > kLpOracleMaxSide)
    throw DomainError("lp_oracle: instance " + std::to_string(m) + "x" + std::to_string(n) +
                      " exceeds the 8x8 limit");
  if (!c.allFinite()) throw NumericError("lp_oracle: cost is not finite");
  check_simplex(a, "marginal a");
  check_simplex(b, "marginal b");

  // North-west corner: a staircase of exactly m+n-1 cells.
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(m, n);
  std::vector<Cell> basis;
  {
    Eigen::VectorXd sa = a, sb = b;
    int i = 0, j = 0;
    while (true) {
      const double q = std::min(sa(i), sb(j));
      x(i, j) = q;
      sa(i) -= q;
      sb(j) -= q;
      basis.push_back({i, j});
      if (i == m - 1 && j == n - 1) break;
      if (i == m - 1) ++j;
      else if (j == n - 1) ++i;
      else if (sa(i) <= sb(j)) ++i;
      else ++j;
    }
  }
  BasisTree tree(m, n);
  tree.set(std::move(basis));

  constexpr double kReducedTol = 1e-12;
  const int max_pivots = 100000;
  int pivots = 0;
  Eigen::VectorXd u, v;
  while (true) {
    tree.potentials(c, u, v);
    // Bland's rule: first improving nonbasic cell in row-major order.
    int ei = -1, ej = -1;
    for (int i = 0; i < m && ei < 0; ++i)
      for (int j = 0; j < n; ++j) {
        if (c(i, j) - u(i) - v(j) < -kReducedTol && !tree.contains(i, j)) {
          ei = i;
          ej = j;
          break;
        }
      }
    if (ei < 0) break;
    if (++pivots > max_pivots) throw NumericError("lp_oracle: pivot limit exceeded");

    // Path edges alternate -, +, -, ... starting from the row end; the
    // entering cell closes the cycle with +.
    const auto edges = tree.path(ei, ej);
    double theta = std::numeric_limits<double>::infinity();
    std::size_t leave_edge = 0;
    auto var_index = [&](std::size_t k) {
      const auto& cell = tree.cells()[edges[k]];
      return cell.row * n + cell.col;
    };
    for (std::size_t k = 0; k < edges.size(); k += 2) {
      const auto& cell = tree.cells()[edges[k]];
      const double val = x(cell.row, cell.col);
      // Ties go to the lowest variable index (Bland).
      if (val < theta || (val == theta && var_index(k) < var_index(leave_edge))) {
        theta = val;
        leave_edge = k;
      }
    }
    for (std::size_t k = 0; k < edges.size(); ++k) {
      const auto& cell = tree.cells()[edges[k]];
      x(cell.row, cell.col) += (k % 2 == 0) ? -theta : theta;
    }
    x(ei, ej) += theta;
    const auto leaving = edges[leave_edge];
    x(tree.cells()[leaving].row, tree.cells()[leaving].col) = 0.0;
    tree.cells()[leaving] = {ei, ej};
  }

  TransportPlan<double> out;
  out.plan = x.cwiseMax(0.0);
  out.a = a;
  out.b = b;
  out.cost = (out.plan.array() * c.array()).sum();
  out.row_residual = (out.plan.rowwise().sum() - a).cwiseAbs().sum();
  out.col_residual = (out.plan.colwise().sum().transpose() - b).cwiseAbs().sum();
  out.iterations = pivots;
  return out;
}

}  // namespace palot
