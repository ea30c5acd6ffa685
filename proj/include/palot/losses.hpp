#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "palot/attnpool.hpp"
#include "palot/error.hpp"

namespace palot {

// Norms below this are treated as zero vectors.
inline constexpr double kNormFloor = 1e-12;

// Teacher-forced decoder outputs for B captions. logits[b] is T x V;
// targets(b, t) is the token to predict at step t; valid(b, t) is false on PAD.
template <typename Scalar>
struct LogitsBatch {
  std::vector<Mat<Scalar>> logits;
  Eigen::MatrixXi targets;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> valid;
};

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = x.maxCoeff();
  if (!std::isfinite(static_cast<double>(m))) return m;
  return m + std::log((x.array() - m).exp().sum());
}

// Mean negative log-likelihood over unmasked positions.
template <typename Scalar>
Scalar masked_ce(const LogitsBatch<Scalar>& batch) {
  const auto B = static_cast<Eigen::Index>(batch.logits.size());
  if (B < 1 || batch.targets.rows() != B || batch.valid.rows() != B)
    throw ShapeError("logits, targets and mask disagree in batch size");
  Scalar total(0);
  long count = 0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& lg = batch.logits[b];
    if (batch.targets.cols() != lg.rows() || batch.valid.cols() != lg.rows())
      throw ShapeError("logits, targets and mask disagree in sequence length");
    for (Eigen::Index t = 0; t < lg.rows(); ++t) {
      if (!batch.valid(b, t)) continue;
      const int y = batch.targets(b, t);
      if (y < 0 || y >= lg.cols()) throw DomainError("target id " + std::to_string(y) + " outside vocabulary");
      total += log_sum_exp(lg.row(t)) - lg(t, y);
      ++count;
    }
  }
  if (count == 0) throw DomainError("masked_ce: no unmasked positions");
  const Scalar loss = total / static_cast<Scalar>(count);
  if (!std::isfinite(static_cast<double>(loss))) throw NumericError("masked_ce is not finite");
  return loss;
}

template <typename DA, typename DB>
typename DA::Scalar cosine(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  using Scalar = typename DA::Scalar;
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  if (!(na >= Scalar(kNormFloor)) || !(nb >= Scalar(kNormFloor))) throw DomainError("cosine of a zero-norm vector");
  const Scalar c = a.dot(b) / (na * nb);
  return std::clamp(c, Scalar(-1), Scalar(1));
}

// 1 - cos(r, r_syn), in [0, 2].
template <typename DA, typename DB>
typename DA::Scalar pal_loss(const Eigen::MatrixBase<DA>& r, const Eigen::MatrixBase<DB>& r_syn) {
  return typename DA::Scalar(1) - cosine(r, r_syn);
}

// Rows scaled to unit L2 norm.
template <typename Derived>
Mat<typename Derived::Scalar> normalize_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Mat<Scalar> out = x;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const Scalar n = out.row(i).norm();
    if (!(n >= Scalar(kNormFloor))) throw DomainError("zero-norm row " + std::to_string(i));
    out.row(i) /= n;
  }
  return out;
}

// Paired InfoNCE over Z = {r_i, r_syn_i}: each of the 2B anchors has its
// counterpart as the single positive and the other 2B-2 vectors as negatives.
template <typename DA, typename DB>
typename DA::Scalar infonce(const Eigen::MatrixBase<DA>& r, const Eigen::MatrixBase<DB>& r_syn, double temp) {
  using Scalar = typename DA::Scalar;
  const auto B = r.rows();
  if (B < 1) throw ShapeError("infonce needs at least one pair");
  if (r_syn.rows() != B || r_syn.cols() != r.cols()) throw ShapeError("infonce: real/synthetic shapes differ");
  if (!(temp > 0.0)) throw DomainError("infonce temperature must be positive");
  if (!r.allFinite() || !r_syn.allFinite()) throw NumericError("infonce input is not finite");
  Mat<Scalar> z(2 * B, r.cols());
  z << r, r_syn;
  z = normalize_rows(z);
  const Mat<Scalar> sim = (z * z.transpose()) / static_cast<Scalar>(temp);
  Scalar total(0);
  for (Eigen::Index i = 0; i < 2 * B; ++i) {
    const Eigen::Index pos = (i + B) % (2 * B);
    Vec<Scalar> others(2 * B - 1);
    for (Eigen::Index j = 0, k = 0; j < 2 * B; ++j)
      if (j != i) others(k++) = sim(i, j);
    total += log_sum_exp(others) - sim(i, pos);
  }
  const Scalar loss = total / static_cast<Scalar>(2 * B);
  if (!std::isfinite(static_cast<double>(loss))) throw NumericError("infonce is not finite");
  return loss;
}

}  // namespace palot
