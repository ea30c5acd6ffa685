#pragma once

// Real vs synthetic alignment measures and corpus BLEU.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "palot/attnpool.hpp"
#include "palot/error.hpp"

namespace palot {

enum class SetLabel { Real, Synthetic };

template <typename Scalar>
struct EmbeddingSet {
  Mat<Scalar> points;  // N x D
  SetLabel label = SetLabel::Real;

  EmbeddingSet(Mat<Scalar> p, SetLabel l) : points(std::move(p)), label(l) {
    if (points.rows() < 1 || points.cols() < 1) throw ShapeError("embedding set must be non-empty");
    if (!points.allFinite()) throw NumericError("embedding set has non-finite entries");
  }
};

// Euclidean distance between the two sample means.
template <typename DA, typename DB>
typename DA::Scalar centroid_distance(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  if (a.cols() != b.cols()) throw ShapeError("centroid_distance: dimension mismatch");
  if (a.rows() < 1 || b.rows() < 1) throw ShapeError("centroid_distance: empty set");
  return (a.colwise().mean() - b.colwise().mean()).norm();
}

namespace detail {

template <typename DA, typename DB>
typename DA::Scalar mean_rbf(const Eigen::MatrixBase<DA>& x, const Eigen::MatrixBase<DB>& y,
                             typename DA::Scalar inv_two_sigma2) {
  using Scalar = typename DA::Scalar;
  Scalar sum(0);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < y.rows(); ++j) sum += std::exp(-(x.row(i) - y.row(j)).squaredNorm() * inv_two_sigma2);
  return sum / static_cast<Scalar>(x.rows() * y.rows());
}

}  // namespace detail

// Biased (V-statistic) squared MMD with k(x, y) = exp(-|x - y|^2 / (2 sigma^2)).
template <typename DA, typename DB>
typename DA::Scalar mmd_rbf(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b, double bandwidth) {
  using Scalar = typename DA::Scalar;
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) throw DomainError("mmd_rbf: bandwidth must be positive");
  if (a.cols() != b.cols()) throw ShapeError("mmd_rbf: dimension mismatch");
  if (a.rows() < 1 || b.rows() < 1) throw ShapeError("mmd_rbf: empty set");
  const Scalar k = Scalar(1) / static_cast<Scalar>(2.0 * bandwidth * bandwidth);
  return detail::mean_rbf(a, a, k) + detail::mean_rbf(b, b, k) - Scalar(2) * detail::mean_rbf(a, b, k);
}

// Median of the pairwise distances over the pooled sample; 1 when every
// pairwise distance is zero.
template <typename DA, typename DB>
double median_bandwidth(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  if (a.cols() != b.cols()) throw ShapeError("median_bandwidth: dimension mismatch");
  Mat<double> pooled(a.rows() + b.rows(), a.cols());
  pooled << a.template cast<double>(), b.template cast<double>();
  std::vector<double> d;
  for (Eigen::Index i = 0; i < pooled.rows(); ++i)
    for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) d.push_back((pooled.row(i) - pooled.row(j)).norm());
  if (d.empty()) return 1.0;
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), mid));
  return med > 0.0 ? med : 1.0;
}

template <typename Scalar>
struct Projection2D {
  Mat<Scalar> coords;     // N x 2
  Mat<Scalar> axes;       // D x 2, orthonormal columns (second is zero when D == 1)
  Vec<Scalar> mean;       // D
  Eigen::Vector2d explained;  // variance along each axis (divisor N - 1)
  double total_variance = 0.0;
};

// Projection onto the top two principal axes of the mean-centred data.
// Each axis is signed so its largest-magnitude component is positive.
template <typename Derived>
Projection2D<typename Derived::Scalar> pca_2d(const Eigen::MatrixBase<Derived>& points) {
  using Scalar = typename Derived::Scalar;
  const auto n = points.rows();
  const auto d = points.cols();
  if (n < 2) throw ShapeError("pca_2d needs at least two points");
  Projection2D<Scalar> out;
  out.mean = points.colwise().mean().transpose();
  const Mat<double> centred = (points.rowwise() - out.mean.transpose()).template cast<double>();
  if (centred.cwiseAbs().maxCoeff() == 0.0) throw DomainError("pca_2d: all points are identical");
  Eigen::JacobiSVD<Mat<double>> svd(centred, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  Mat<double> axes = Mat<double>::Zero(d, 2);
  const Eigen::Index k = std::min<Eigen::Index>(2, sv.size());
  for (Eigen::Index c = 0; c < k; ++c) {
    Vec<double> axis = svd.matrixV().col(c);
    Eigen::Index big;
    axis.cwiseAbs().maxCoeff(&big);
    if (axis(big) < 0) axis = -axis;
    axes.col(c) = axis;
  }
  out.axes = axes.cast<Scalar>();
  out.coords = (centred * axes).cast<Scalar>();
  out.explained = Eigen::Vector2d::Zero();
  for (Eigen::Index c = 0; c < k; ++c) out.explained(c) = sv(c) * sv(c) / static_cast<double>(n - 1);
  out.total_variance = centred.squaredNorm() / static_cast<double>(n - 1);
  return out;
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

using TokenList = std::vector<std::string>;

struct BleuStats {
  std::vector<long> matches;  // clipped n-gram matches per order
  std::vector<long> totals;   // candidate n-grams per order
  long candidate_length = 0;
  long reference_length = 0;
};

BleuStats bleu_stats(const std::vector<TokenList>& candidates, const std::vector<TokenList>& references, int max_n);

// Corpus BLEU-1..max_n on a 0..100 scale; element k is BLEU-(k+1).
// No smoothing: an order with zero clipped matches makes every BLEU that
// includes it zero.
std::vector<double> bleu_n(const std::vector<TokenList>& candidates, const std::vector<TokenList>& references,
                           int max_n = 4);

TokenList split_whitespace(const std::string& text);

}  // namespace palot
