#pragma once

// Shared helpers and brute-force reference implementations. The oracles are
// written directly from the definitions with plain loops and share no code
// with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

namespace testing {

inline std::mt19937_64& rng() {
  static std::mt19937_64 g(20240607);
  return g;
}

inline Eigen::MatrixXd randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& g = rng()) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(g);
  return m;
}

inline Eigen::VectorXd randv(Eigen::Index n, std::mt19937_64& g = rng()) { return randn(n, 1, g).col(0); }

inline Eigen::VectorXd rand_simplex(Eigen::Index n, std::mt19937_64& g = rng()) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = u(g);
  return v / v.sum();
}

inline Eigen::MatrixXd row_stochastic(Eigen::Index r, Eigen::Index c, std::mt19937_64& g = rng()) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) m.row(i) = rand_simplex(c, g).transpose();
  return m;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("palot_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

namespace oracle {

inline double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline std::vector<double> row(const Eigen::MatrixXd& m, Eigen::Index i) {
  std::vector<double> v(m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) v[j] = m(i, j);
  return v;
}

inline double cos(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0;
  for (std::size_t k = 0; k < a.size(); ++k) d += a[k] * b[k];
  return d / (norm(a) * norm(b));
}

// Anchors over all 2B vectors; positive of i is (i + B) mod 2B.
inline double infonce(const Eigen::MatrixXd& r, const Eigen::MatrixXd& rs, double t) {
  const auto B = r.rows();
  std::vector<std::vector<double>> z;
  for (Eigen::Index i = 0; i < B; ++i) z.push_back(row(r, i));
  for (Eigen::Index i = 0; i < B; ++i) z.push_back(row(rs, i));
  const auto n = static_cast<Eigen::Index>(z.size());
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index pos = (i + B) % n;
    double denom = 0;
    for (Eigen::Index k = 0; k < n; ++k)
      if (k != i) denom += std::exp(cos(z[i], z[k]) / t);
    total += -std::log(std::exp(cos(z[i], z[pos]) / t) / denom);
  }
  return total / static_cast<double>(n);
}

inline std::vector<double> pool(const std::vector<double>& w, const Eigen::MatrixXd& e) {
  std::vector<double> r(e.cols(), 0.0);
  for (Eigen::Index s = 0; s < e.rows(); ++s)
    for (Eigen::Index d = 0; d < e.cols(); ++d) r[d] += w[s] * e(s, d);
  return r;
}

inline double cosine_cost(const Eigen::MatrixXd& e, const Eigen::MatrixXd& es, Eigen::Index s, Eigen::Index t) {
  return 1.0 - cos(row(e, s), row(es, t));
}

inline double mmd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double sigma) {
  auto k = [sigma](const Eigen::MatrixXd& x, Eigen::Index i, const Eigen::MatrixXd& y, Eigen::Index j) {
    double d2 = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) d2 += (x(i, c) - y(j, c)) * (x(i, c) - y(j, c));
    return std::exp(-d2 / (2 * sigma * sigma));
  };
  double xx = 0, yy = 0, xy = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.rows(); ++j) xx += k(a, i, a, j);
  for (Eigen::Index i = 0; i < b.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) yy += k(b, i, b, j);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) xy += k(a, i, b, j);
  const double m = static_cast<double>(a.rows()), n = static_cast<double>(b.rows());
  return xx / (m * m) + yy / (n * n) - 2 * xy / (m * n);
}

inline double centroid_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  double d2 = 0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    double ma = 0, mb = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) ma += a(i, c);
    for (Eigen::Index i = 0; i < b.rows(); ++i) mb += b(i, c);
    ma /= static_cast<double>(a.rows());
    mb /= static_cast<double>(b.rows());
    d2 += (ma - mb) * (ma - mb);
  }
  return std::sqrt(d2);
}

// Exact transport cost by enumerating every basis of m+n-1 cells for small
// instances and keeping the feasible ones.
inline double transport_by_enumeration(const Eigen::MatrixXd& c, const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const auto m = c.rows(), n = c.cols();
  const auto cells = m * n;
  const auto k = m + n - 1;
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> pick(cells, 0);
  std::fill(pick.end() - k, pick.end(), 1);
  do {
    // Solve the equality system restricted to the picked cells.
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m + n, k);
    Eigen::VectorXd rhs(m + n);
    rhs << a, b;
    std::vector<Eigen::Index> idx;
    for (Eigen::Index q = 0; q < cells; ++q)
      if (pick[q]) idx.push_back(q);
    for (Eigen::Index col = 0; col < k; ++col) {
      A(idx[col] / n, col) = 1;
      A(m + idx[col] % n, col) = 1;
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    if (lu.rank() < k) continue;
    const Eigen::VectorXd x = lu.solve(rhs);
    if ((A * x - rhs).cwiseAbs().maxCoeff() > 1e-9 || x.minCoeff() < -1e-12) continue;
    double cost = 0;
    for (Eigen::Index col = 0; col < k; ++col) cost += x(col) * c(idx[col] / n, idx[col] % n);
    best = std::min(best, cost);
  } while (std::next_permutation(pick.begin(), pick.end()));
  return best;
}

// Corpus BLEU straight from the definition.
inline double bleu(const std::vector<std::vector<std::string>>& cand, const std::vector<std::vector<std::string>>& ref,
                   int n_max) {
  double log_sum = 0;
  long c_len = 0, r_len = 0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    c_len += static_cast<long>(cand[i].size());
    r_len += static_cast<long>(ref[i].size());
  }
  for (int n = 1; n <= n_max; ++n) {
    long match = 0, total = 0;
    for (std::size_t i = 0; i < cand.size(); ++i) {
      std::map<std::vector<std::string>, long> cc, rc;
      for (std::size_t p = 0; p + n <= cand[i].size(); ++p)
        ++cc[std::vector<std::string>(cand[i].begin() + p, cand[i].begin() + p + n)];
      for (std::size_t p = 0; p + n <= ref[i].size(); ++p)
        ++rc[std::vector<std::string>(ref[i].begin() + p, ref[i].begin() + p + n)];
      for (const auto& [g, cnt] : cc) {
        total += cnt;
        match += std::min(cnt, rc.count(g) ? rc[g] : 0L);
      }
    }
    if (match == 0) return 0.0;
    log_sum += std::log(static_cast<double>(match) / static_cast<double>(total));
  }
  const double bp = c_len > r_len ? 1.0 : std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len));
  return 100.0 * bp * std::exp(log_sum / n_max);
}

}  // namespace oracle

}  // namespace testing
