#pragma once

// Text-conditioned patch weights from decoder cross-attention, and the
// weighted pooling of patch tokens under those weights.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "palot/error.hpp"
#include "palot/numio.hpp"

namespace palot {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
constexpr Scalar simplex_tolerance() {
  return std::is_same_v<Scalar, float> ? Scalar(1e-5) : Scalar(1e-6);
}

// Cross-attention probabilities for one caption/image pair, indexed
// [layer][head] -> T x S row-stochastic matrix, plus a token validity mask.
template <typename Scalar>
class AttentionStack {
 public:
  AttentionStack(int layers, int heads, std::vector<Mat<Scalar>> maps, std::vector<bool> token_mask)
      : layers_(layers), heads_(heads), maps_(std::move(maps)), mask_(std::move(token_mask)) {
    if (layers_ < 1 || heads_ < 1) throw ShapeError("attention stack needs at least one layer and head");
    if (maps_.size() != static_cast<std::size_t>(layers_ * heads_))
      throw ShapeError("attention stack expects layers*heads maps");
    const auto T = maps_.front().rows();
    const auto S = maps_.front().cols();
    if (T < 1 || S < 1) throw ShapeError("attention maps must be non-empty");
    if (mask_.size() != static_cast<std::size_t>(T)) throw ShapeError("token mask length must equal T");
    for (const auto& m : maps_) {
      if (m.rows() != T || m.cols() != S) throw ShapeError("attention maps disagree in shape");
      if (!m.allFinite() || (m.array() < Scalar(0)).any())
        throw DomainError("attention probabilities must be finite and nonnegative");
      const Vec<Scalar> sums = m.rowwise().sum();
      if (((sums.array() - Scalar(1)).abs() > simplex_tolerance<Scalar>()).any())
        throw DomainError("attention rows must sum to 1");
    }
    if (std::none_of(mask_.begin(), mask_.end(), [](bool b) { return b; }))
      throw DomainError("all caption tokens are PAD");
  }

  // Builds a stack from a rank-4 tensor L x H x T x S and a length-T mask
  // (nonzero = valid).
  static AttentionStack from_tensor(const Tensor& values, const Tensor& mask) {
    if (values.rank() != 4) throw ShapeError("attention tensor must be rank 4 (L,H,T,S)");
    if (mask.rank() != 1 || mask.shape()[0] != values.shape()[2])
      throw ShapeError("token mask must be rank 1 with length T");
    const auto L = static_cast<int>(values.shape()[0]);
    const auto H = static_cast<int>(values.shape()[1]);
    const auto T = static_cast<Eigen::Index>(values.shape()[2]);
    const auto S = static_cast<Eigen::Index>(values.shape()[3]);
    std::vector<Mat<Scalar>> maps;
    std::size_t k = 0;
    for (int m = 0; m < L * H; ++m) {
      Mat<Scalar> a(T, S);
      for (Eigen::Index t = 0; t < T; ++t)
        for (Eigen::Index s = 0; s < S; ++s) a(t, s) = static_cast<Scalar>(values.at(k++));
      maps.push_back(std::move(a));
    }
    std::vector<bool> valid(static_cast<std::size_t>(T));
    for (Eigen::Index t = 0; t < T; ++t) valid[t] = mask.at(t) != 0.0;
    return AttentionStack(L, H, std::move(maps), std::move(valid));
  }

  int layers() const noexcept { return layers_; }
  int heads() const noexcept { return heads_; }
  Eigen::Index tokens() const noexcept { return maps_.front().rows(); }
  Eigen::Index patches() const noexcept { return maps_.front().cols(); }
  const Mat<Scalar>& map(int layer, int head) const { return maps_.at(layer * heads_ + head); }
  const std::vector<bool>& token_mask() const noexcept { return mask_; }

 private:
  int layers_;
  int heads_;
  std::vector<Mat<Scalar>> maps_;
  std::vector<bool> mask_;
};

// Mean over the last `last_k` layers, every head, and every valid token step.
template <typename Scalar>
Vec<Scalar> aggregate_attention(const AttentionStack<Scalar>& stack, int last_k) {
  if (last_k < 1 || last_k > stack.layers())
    throw DomainError("last_k must lie in [1, layers]; got " + std::to_string(last_k));
  const auto& mask = stack.token_mask();
  const auto valid = std::count(mask.begin(), mask.end(), true);
  if (valid == 0) throw DomainError("all caption tokens are PAD");
  Vec<Scalar> acc = Vec<Scalar>::Zero(stack.patches());
  for (int l = stack.layers() - last_k; l < stack.layers(); ++l)
    for (int h = 0; h < stack.heads(); ++h) {
      const auto& m = stack.map(l, h);
      for (Eigen::Index t = 0; t < m.rows(); ++t)
        if (mask[t]) acc += m.row(t).transpose();
    }
  return acc / static_cast<Scalar>(valid * last_k * stack.heads());
}

template <typename Derived>
Vec<typename Derived::Scalar> stable_softmax(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = x.maxCoeff();
  Vec<Scalar> e = (x.array() - m).exp().matrix();
  return e / e.sum();
}

// Indices kept by top-rho retention on a probability vector, in descending
// probability order (ties -> lower index first).
//  Mass:  smallest prefix whose cumulative probability reaches rho.
//  Count: the first ceil(rho * S) entries.
template <typename Derived>
std::vector<Eigen::Index> retained_set(const Eigen::MatrixBase<Derived>& p, double rho,
                                       RetentionMode mode = RetentionMode::Mass) {
  using Scalar = typename Derived::Scalar;
  if (!(rho > 0.0 && rho <= 1.0)) throw DomainError("rho must lie in (0,1]");
  const auto n = p.size();
  if (n < 1) throw ShapeError("empty weight vector");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&p](Eigen::Index a, Eigen::Index b) { return p(a) > p(b); });
  std::size_t keep = 0;
  if (mode == RetentionMode::Count) {
    keep = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n) - 1e-12));
  } else {
    // A few ulps of slack so that prefixes summing to rho exactly are not
    // rejected by rounding.
    const double slack = 8.0 * std::numeric_limits<Scalar>::epsilon();
    double cum = 0.0;
    while (keep < order.size()) {
      cum += static_cast<double>(p(order[keep]));
      ++keep;
      if (cum >= rho - slack) break;
    }
  }
  keep = std::clamp<std::size_t>(keep, 1, order.size());
  order.resize(keep);
  return order;
}

// Zeroes everything outside the retained set and renormalizes.
template <typename Derived>
Vec<typename Derived::Scalar> truncate_renormalize(const Eigen::MatrixBase<Derived>& p, double rho,
                                                   RetentionMode mode = RetentionMode::Mass) {
  using Scalar = typename Derived::Scalar;
  const auto kept = retained_set(p, rho, mode);
  Vec<Scalar> out = Vec<Scalar>::Zero(p.size());
  Scalar mass(0);
  for (auto i : kept) {
    out(i) = p(i);
    mass += p(i);
  }
  if (!(mass > Scalar(0))) throw DomainError("retained set carries no mass");
  return out / mass;
}

// softmax(saliency / tau), then top-rho retention and renormalization.
template <typename Derived>
Vec<typename Derived::Scalar> topk_softmax(const Eigen::MatrixBase<Derived>& saliency, double tau, double rho,
                                           RetentionMode mode = RetentionMode::Mass) {
  using Scalar = typename Derived::Scalar;
  if (saliency.size() < 1) throw ShapeError("saliency must have at least one patch");
  if (!saliency.allFinite()) throw NumericError("saliency contains non-finite values");
  if (!(tau > 0.0)) throw DomainError("tau must be positive");
  const Vec<Scalar> scaled = saliency / static_cast<Scalar>(tau);
  return truncate_renormalize(stable_softmax(scaled), rho, mode);
}

// r = sum_s w_s * e_s
template <typename DW, typename DE>
Vec<typename DE::Scalar> weighted_pool(const Eigen::MatrixBase<DW>& w, const Eigen::MatrixBase<DE>& e) {
  if (w.size() != e.rows())
    throw ShapeError("weights length " + std::to_string(w.size()) + " does not match " +
                     std::to_string(e.rows()) + " patches");
  Vec<typename DE::Scalar> r = e.transpose() * w;
  if (!r.allFinite()) throw NumericError("pooled descriptor is not finite");
  return r;
}

}  // namespace palot
