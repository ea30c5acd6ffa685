#pragma once

// Joint captioning + alignment objective:
//   total = CE + lambda_pal * PAL + alpha * InfoNCE + beta * OT
// where the three alignment terms apply only when the batch carries matched
// synthetic images. Gradients come from the tape in palot/tape.hpp; a
// central-difference harness checks them against the plain-value losses.

#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "palot/model.hpp"
#include "palot/numio.hpp"
#include "palot/tape.hpp"

namespace palot {

struct LossBreakdown {
  double ce = 0.0;
  double pal = 0.0;
  double nce = 0.0;
  double ot = 0.0;
  double total = 0.0;
  bool synthetic_present = false;
};

nlohmann::json to_json(const LossBreakdown& b);

// Applies the mixing rule to already computed components. Without synthetic
// data the alignment components are reported as 0 and total = ce.
LossBreakdown combine_terms(double ce, std::optional<Eigen::Vector3d> pal_nce_ot, const RunConfig& cfg);

// Differentiable building blocks shared by the joint loss and grad checks.
namespace terms {

// Text-conditioned patch weights (1 x S) from one decoder pass: mean over the
// last K layers, all heads and valid steps; softmax at temperature tau; top-rho
// retention held fixed during differentiation.
ad::Var patch_weights(const std::vector<ad::Var>& cross_attn, const std::vector<bool>& valid, int layers, int heads,
                      const RunConfig& cfg);

ad::Var pal(ad::Var r, ad::Var r_syn);

// r and r_syn are B x D.
ad::Var infonce(ad::Var r, ad::Var r_syn, double temp);

// <P, C> with C = cosine cost between patch tokens and P from unrolled Sinkhorn.
ad::Var ot(ad::Var e, ad::Var e_syn, ad::Var a, ad::Var b, double eps, int iters);

// Mean NLL over all valid steps of all samples.
ad::Var masked_ce(const std::vector<ad::Var>& logits, const std::vector<std::vector<int>>& targets,
                  const std::vector<std::vector<bool>>& valid);

}  // namespace terms

struct ObjectiveOptions {
  // Treat the patch weights as constants (no gradient into the decoder
  // through PAL/OT/InfoNCE).
  bool stop_grad_weights = false;
  // Per-parameter trainable mask; empty = everything trainable.
  std::vector<bool> trainable;
};

struct JointPass {
  ad::Var total;
  ad::Var ce;
  ad::Var pal;   // invalid without synthetic data
  ad::Var nce;
  ad::Var ot;
  LossBreakdown breakdown;
  BoundParams params;
  Mat<double> pooled_real;  // B x D, empty without synthetic data
  Mat<double> pooled_syn;
};

JointPass joint_loss(ad::Tape& tape, const TripletBatch& batch, const RunConfig& cfg, const ToyModel& model,
                     const ObjectiveOptions& opt = {});

// Value-only convenience.
LossBreakdown joint_loss(const TripletBatch& batch, const RunConfig& cfg, const ToyModel& model);

struct Gradients {
  std::vector<ad::Matrix> params;  // aligned with ToyModel::params(); zeros where frozen
  double norm() const;
};

// Differentiates pass.total. Only bridge/decoder parameters receive
// gradients; the encoder is not on the tape. Throws if the tape was already
// consumed.
Gradients backward(ad::Tape& tape, const JointPass& pass);

// Pooled real/synthetic descriptors (B x D each) under the model's own
// cross-attention; used by the alignment diagnostics.
std::pair<Mat<double>, Mat<double>> pooled_descriptors(const ToyModel& model, const TripletBatch& batch,
                                                       const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

struct DifferentiableFn {
  std::function<double(const Eigen::VectorXd&)> value;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  Eigen::Index worst = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares gradient(point) to central differences of value() coordinate by
// coordinate. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const DifferentiableFn& fn, const Eigen::VectorXd& point, double h = 1e-6,
                           double floor = 1e-3);

// Ready-made checks: `value` evaluates the plain-value loss, `gradient` the tape.
namespace checks {

// x = r (length D).
DifferentiableFn pal_wrt_r(Eigen::VectorXd r_syn);
// x = row-major [r; r_syn], 2B x D.
DifferentiableFn infonce_wrt_inputs(Eigen::Index batch, Eigen::Index dim, double temp);
// x = row-major logits of B samples, each T x V.
DifferentiableFn masked_ce_wrt_logits(std::vector<std::vector<int>> targets, std::vector<std::vector<bool>> valid,
                                      Eigen::Index vocab);
// x = row-major real patch tokens e (S x D); e_syn, a, b fixed.
DifferentiableFn ot_wrt_patches(Eigen::MatrixXd e_syn, Eigen::VectorXd a, Eigen::VectorXd b, double eps, int iters);
// x = [saliency (S); row-major e (S x D)]; scalar = <weighted_pool(topk_softmax(saliency), e), probe>.
DifferentiableFn topk_pool_wrt_inputs(Eigen::Index patches, Eigen::VectorXd probe, double tau, double rho);

// True when the retained set of softmax(saliency / tau) is stable under
// perturbations: the cumulative mass stays `margin` away from rho on both
// sides of the cut and no two probabilities near the cut are within margin.
bool away_from_retention_boundary(const Eigen::VectorXd& saliency, double tau, double rho, double margin);

}  // namespace checks

}  // namespace palot
