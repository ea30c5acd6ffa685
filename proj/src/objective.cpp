#include "palot/objective.hpp"

#include <cmath>
#include <limits>

#include "palot/attnpool.hpp"
#include "palot/losses.hpp"
#include "palot/ot.hpp"

namespace palot {

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"ce", b.ce},   {"pal", b.pal},     {"nce", b.nce},
          {"ot", b.ot},   {"total", b.total}, {"synthetic_present", b.synthetic_present}};
}

LossBreakdown combine_terms(double ce, std::optional<Eigen::Vector3d> t, const RunConfig& cfg) {
  LossBreakdown out;
  out.ce = ce;
  out.total = ce;
  if (t) {
    out.synthetic_present = true;
    out.pal = (*t)(0);
    out.nce = (*t)(1);
    out.ot = (*t)(2);
    out.total = ce + cfg.lambda_pal * out.pal + cfg.alpha * out.nce + cfg.beta * out.ot;
  }
  return out;
}

namespace terms {

ad::Var patch_weights(const std::vector<ad::Var>& cross_attn, const std::vector<bool>& valid, int layers, int heads,
                      const RunConfig& cfg) {
  if (cross_attn.size() != static_cast<std::size_t>(layers * heads))
    throw ShapeError("patch_weights: expected layers*heads attention maps");
  if (cfg.last_k < 1 || cfg.last_k > layers) throw DomainError("last_k must lie in [1, layers]");
  const auto T = cross_attn.front().rows();
  if (valid.size() != static_cast<std::size_t>(T)) throw ShapeError("patch_weights: mask length must equal T");
  const auto count = std::count(valid.begin(), valid.end(), true);
  if (count == 0) throw DomainError("all caption tokens are PAD");
  ad::Matrix pick = ad::Matrix::Zero(1, T);
  for (Eigen::Index t = 0; t < T; ++t)
    if (valid[t]) pick(0, t) = 1.0;
  auto& tape = *cross_attn.front().tape();
  const auto selector = tape.constant(pick);
  std::optional<ad::Var> acc;
  for (int l = layers - cfg.last_k; l < layers; ++l)
    for (int h = 0; h < heads; ++h) {
      const auto m = ad::matmul(selector, cross_attn[l * heads + h]);
      acc = acc ? ad::add(*acc, m) : m;
    }
  const double denom = static_cast<double>(count) * cfg.last_k * heads;
  const auto saliency = ad::scale(*acc, 1.0 / denom);
  if (!saliency.value().allFinite()) throw NumericError("saliency contains non-finite values");
  const auto probs = ad::softmax_rows(ad::scale(saliency, 1.0 / cfg.tau_attn));
  const Eigen::VectorXd p = probs.value().row(0).transpose();
  ad::Matrix keep = ad::Matrix::Zero(1, p.size());
  for (auto i : retained_set(p, cfg.rho, cfg.retention)) keep(0, i) = 1.0;
  return ad::mask_renormalize(probs, keep);
}

ad::Var pal(ad::Var r, ad::Var r_syn) { return ad::affine(ad::cosine(r, r_syn), -1.0, 1.0); }

ad::Var infonce(ad::Var r, ad::Var r_syn, double temp) {
  const auto B = r.rows();
  if (B < 1 || r_syn.rows() != B || r_syn.cols() != r.cols()) throw ShapeError("infonce: shapes differ");
  if (!(temp > 0.0)) throw DomainError("infonce temperature must be positive");
  auto& tape = *r.tape();
  const auto z = ad::normalize_rows(ad::concat_rows({r, r_syn}));
  const auto sim = ad::scale(ad::matmul(z, ad::transpose(z)), 1.0 / temp);
  ad::Matrix self_mask = ad::Matrix::Zero(2 * B, 2 * B);
  ad::Matrix positive = ad::Matrix::Zero(2 * B, 2 * B);
  for (Eigen::Index i = 0; i < 2 * B; ++i) {
    self_mask(i, i) = -std::numeric_limits<double>::infinity();
    positive(i, (i + B) % (2 * B)) = 1.0;
  }
  const auto lse = ad::log_sum_exp_rows(sim, &self_mask);
  const auto pos = ad::sum(ad::mul_const(sim, positive));
  (void)tape;
  return ad::scale(ad::sub(ad::sum(lse), pos), 1.0 / static_cast<double>(2 * B));
}

ad::Var ot(ad::Var e, ad::Var e_syn, ad::Var a, ad::Var b, double eps, int iters) {
  const auto c = ad::cosine_cost(e, e_syn);
  const auto plan = ad::sinkhorn_plan(c, a, b, eps, iters);
  return ad::sum(ad::mul(plan, c));
}

ad::Var masked_ce(const std::vector<ad::Var>& logits, const std::vector<std::vector<int>>& targets,
                  const std::vector<std::vector<bool>>& valid) {
  if (logits.empty() || logits.size() != targets.size() || logits.size() != valid.size())
    throw ShapeError("masked_ce: batch sizes differ");
  long count = 0;
  std::optional<ad::Var> total;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    count += std::count(valid[b].begin(), valid[b].end(), true);
    const auto nll = ad::nll_rows(logits[b], targets[b], valid[b]);
    total = total ? ad::add(*total, nll) : nll;
  }
  if (count == 0) throw DomainError("masked_ce: no unmasked positions");
  return ad::scale(*total, 1.0 / static_cast<double>(count));
}

}  // namespace terms

// ---------------------------------------------------------------------------

JointPass joint_loss(ad::Tape& tape, const TripletBatch& batch, const RunConfig& cfg, const ToyModel& model,
                     const ObjectiveOptions& opt) {
  const auto& mc = model.config();
  cfg.validate();
  batch.validate(mc);
  if (cfg.last_k > mc.layers) throw DomainError("last_k exceeds the number of decoder layers");

  JointPass out;
  out.params = palot::bind(tape, model, opt.trainable);
  const bool synthetic = batch.has_synthetic();
  std::vector<ad::Var> logits, r_rows, rs_rows, pal_terms, ot_terms;
  std::vector<std::vector<int>> targets;
  std::vector<std::vector<bool>> valid;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto tf = teacher_forcing(batch.captions[b], mc.pad_id);
    const auto real = decode(tape, out.params, model, model.encode(batch.real_patches[b]), tf.inputs, true);
    logits.push_back(real.logits);
    targets.push_back(tf.targets);
    valid.push_back(tf.valid);
    if (!synthetic) continue;
    const auto syn = decode(tape, out.params, model, model.encode((*batch.syn_patches)[b]), tf.inputs, false);
    auto w_real = terms::patch_weights(real.cross_attn, tf.valid, mc.layers, mc.heads, cfg);
    auto w_syn = terms::patch_weights(syn.cross_attn, tf.valid, mc.layers, mc.heads, cfg);
    if (opt.stop_grad_weights) {
      w_real = tape.constant(w_real.value());
      w_syn = tape.constant(w_syn.value());
    }
    const auto r = ad::weighted_sum(w_real, real.patch_tokens);
    const auto rs = ad::weighted_sum(w_syn, syn.patch_tokens);
    r_rows.push_back(r);
    rs_rows.push_back(rs);
    pal_terms.push_back(terms::pal(r, rs));
    ot_terms.push_back(terms::ot(real.patch_tokens, syn.patch_tokens, w_real, w_syn, cfg.ot_eps, cfg.ot_iters));
  }
  out.ce = terms::masked_ce(logits, targets, valid);
  out.total = out.ce;
  if (synthetic) {
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    auto mean_of = [inv_b](const std::vector<ad::Var>& xs) {
      ad::Var acc = xs.front();
      for (std::size_t i = 1; i < xs.size(); ++i) acc = ad::add(acc, xs[i]);
      return ad::scale(acc, inv_b);
    };
    const auto r = ad::concat_rows(r_rows);
    const auto rs = ad::concat_rows(rs_rows);
    out.pal = mean_of(pal_terms);
    out.nce = terms::infonce(r, rs, cfg.nce_temp);
    out.ot = mean_of(ot_terms);
    out.total = ad::add(ad::add(ad::add(out.ce, ad::scale(out.pal, cfg.lambda_pal)), ad::scale(out.nce, cfg.alpha)),
                        ad::scale(out.ot, cfg.beta));
    out.pooled_real = r.value();
    out.pooled_syn = rs.value();
    out.breakdown.synthetic_present = true;
    out.breakdown.pal = out.pal.scalar();
    out.breakdown.nce = out.nce.scalar();
    out.breakdown.ot = out.ot.scalar();
  }
  out.breakdown.ce = out.ce.scalar();
  out.breakdown.total = out.total.scalar();
  if (!std::isfinite(out.breakdown.total)) throw NumericError("joint loss is not finite");
  return out;
}

LossBreakdown joint_loss(const TripletBatch& batch, const RunConfig& cfg, const ToyModel& model) {
  ad::Tape tape;
  ObjectiveOptions opt;
  opt.trainable.assign(model.params().size(), false);
  return joint_loss(tape, batch, cfg, model, opt).breakdown;
}

double Gradients::norm() const {
  double s = 0.0;
  for (const auto& g : params) s += g.squaredNorm();
  return std::sqrt(s);
}

Gradients backward(ad::Tape& tape, const JointPass& pass) {
  tape.backward(pass.total);
  Gradients g;
  g.params.reserve(pass.params.vars.size());
  for (const auto& v : pass.params.vars) {
    const auto& gv = v.grad();
    if (!gv.allFinite()) throw NumericError("non-finite gradient");
    g.params.push_back(gv);
  }
  return g;
}

std::pair<Mat<double>, Mat<double>> pooled_descriptors(const ToyModel& model, const TripletBatch& batch,
                                                       const RunConfig& cfg) {
  if (!batch.has_synthetic()) throw DomainError("pooled_descriptors needs synthetic images");
  const auto fwd = forward(model, batch);
  const auto D = model.config().width;
  Mat<double> real(batch.size(), D), syn(batch.size(), D);
  ad::Tape tape;
  const auto params = palot::bind(tape, model, std::vector<bool>(model.params().size(), false));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto tf = teacher_forcing(batch.captions[b], model.config().pad_id);
    const auto er = decode(tape, params, model, model.encode(batch.real_patches[b]), tf.inputs, false);
    const auto es = decode(tape, params, model, model.encode((*batch.syn_patches)[b]), tf.inputs, false);
    const auto wr = topk_softmax(aggregate_attention(fwd.real_attention[b], cfg.last_k), cfg.tau_attn, cfg.rho,
                                 cfg.retention);
    const auto ws = topk_softmax(aggregate_attention(fwd.syn_attention[b], cfg.last_k), cfg.tau_attn, cfg.rho,
                                 cfg.retention);
    real.row(b) = weighted_pool(wr, er.patch_tokens.value()).transpose();
    syn.row(b) = weighted_pool(ws, es.patch_tokens.value()).transpose();
  }
  return {real, syn};
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const DifferentiableFn& fn, const Eigen::VectorXd& point, double h, double floor) {
  if (!(h > 0.0)) throw DomainError("grad_check: step must be positive");
  const double f0 = fn.value(point);
  if (!std::isfinite(f0)) throw NumericError("grad_check: function value is not finite");
  const Eigen::VectorXd analytic = fn.gradient(point);
  if (analytic.size() != point.size()) throw ShapeError("grad_check: gradient length differs from point");
  if (!analytic.allFinite()) throw NumericError("grad_check: analytic gradient is not finite");
  GradCheckResult res;
  Eigen::VectorXd x = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    x(i) = point(i) + h;
    const double fp = fn.value(x);
    x(i) = point(i) - h;
    const double fm = fn.value(x);
    x(i) = point(i);
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("grad_check: function value is not finite");
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic(i)), std::abs(numeric), floor});
    const double err = std::abs(analytic(i) - numeric) / denom;
    if (err > res.max_rel_error || res.worst < 0) {
      res.max_rel_error = err;
      res.worst = i;
      res.analytic = analytic(i);
      res.numeric = numeric;
    }
  }
  return res;
}

namespace checks {

namespace {

ad::Matrix reshape_rows(const Eigen::VectorXd& x, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
  ad::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = x(offset + i * cols + j);
  return m;
}

Eigen::VectorXd flatten_rows(const ad::Matrix& m) {
  Eigen::VectorXd v(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v(i * m.cols() + j) = m(i, j);
  return v;
}

}  // namespace

DifferentiableFn pal_wrt_r(Eigen::VectorXd r_syn) {
  DifferentiableFn fn;
  fn.value = [r_syn](const Eigen::VectorXd& r) { return pal_loss(r, r_syn); };
  fn.gradient = [r_syn](const Eigen::VectorXd& r) -> Eigen::VectorXd {
    ad::Tape t;
    const auto rv = t.leaf(r.transpose(), true);
    const auto loss = terms::pal(rv, t.constant(r_syn.transpose()));
    t.backward(loss);
    return rv.grad().transpose();
  };
  return fn;
}

DifferentiableFn infonce_wrt_inputs(Eigen::Index batch, Eigen::Index dim, double temp) {
  DifferentiableFn fn;
  fn.value = [=](const Eigen::VectorXd& x) {
    return infonce(reshape_rows(x, 0, batch, dim), reshape_rows(x, batch * dim, batch, dim), temp);
  };
  fn.gradient = [=](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    ad::Tape t;
    const auto r = t.leaf(reshape_rows(x, 0, batch, dim), true);
    const auto rs = t.leaf(reshape_rows(x, batch * dim, batch, dim), true);
    t.backward(terms::infonce(r, rs, temp));
    Eigen::VectorXd g(x.size());
    g << flatten_rows(r.grad()), flatten_rows(rs.grad());
    return g;
  };
  return fn;
}

DifferentiableFn masked_ce_wrt_logits(std::vector<std::vector<int>> targets, std::vector<std::vector<bool>> valid,
                                      Eigen::Index vocab) {
  const auto B = static_cast<Eigen::Index>(targets.size());
  if (B < 1 || valid.size() != targets.size()) throw ShapeError("masked_ce check: batch sizes differ");
  const auto T = static_cast<Eigen::Index>(targets.front().size());
  DifferentiableFn fn;
  fn.value = [=](const Eigen::VectorXd& x) {
    LogitsBatch<double> lb;
    lb.targets.resize(B, T);
    lb.valid.resize(B, T);
    for (Eigen::Index b = 0; b < B; ++b) {
      lb.logits.push_back(reshape_rows(x, b * T * vocab, T, vocab));
      for (Eigen::Index t = 0; t < T; ++t) {
        lb.targets(b, t) = targets[b][t];
        lb.valid(b, t) = valid[b][t];
      }
    }
    return masked_ce(lb);
  };
  fn.gradient = [=](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    ad::Tape t;
    std::vector<ad::Var> logits;
    for (Eigen::Index b = 0; b < B; ++b) logits.push_back(t.leaf(reshape_rows(x, b * T * vocab, T, vocab), true));
    t.backward(terms::masked_ce(logits, targets, valid));
    Eigen::VectorXd g(x.size());
    for (Eigen::Index b = 0; b < B; ++b) g.segment(b * T * vocab, T * vocab) = flatten_rows(logits[b].grad());
    return g;
  };
  return fn;
}

DifferentiableFn ot_wrt_patches(Eigen::MatrixXd e_syn, Eigen::VectorXd a, Eigen::VectorXd b, double eps, int iters) {
  const auto S = a.size();
  const auto D = e_syn.cols();
  DifferentiableFn fn;
  fn.value = [=](const Eigen::VectorXd& x) {
    const auto c = cosine_cost(reshape_rows(x, 0, S, D), e_syn);
    SinkhornOptions opt;
    opt.eps = eps;
    opt.iters = iters;
    return sinkhorn(c, a, b, opt).cost;
  };
  fn.gradient = [=](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    ad::Tape t;
    const auto e = t.leaf(reshape_rows(x, 0, S, D), true);
    const auto loss = terms::ot(e, t.constant(e_syn), t.constant(a), t.constant(b), eps, iters);
    t.backward(loss);
    return flatten_rows(e.grad());
  };
  return fn;
}

DifferentiableFn topk_pool_wrt_inputs(Eigen::Index patches, Eigen::VectorXd probe, double tau, double rho) {
  const auto S = patches;
  const auto D = probe.size();
  DifferentiableFn fn;
  fn.value = [=](const Eigen::VectorXd& x) {
    const Eigen::VectorXd sal = x.head(S);
    const auto e = reshape_rows(x, S, S, D);
    return weighted_pool(topk_softmax(sal, tau, rho), e).dot(probe);
  };
  fn.gradient = [=](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    ad::Tape t;
    const auto sal = t.leaf(x.head(S).transpose(), true);
    const auto e = t.leaf(reshape_rows(x, S, S, D), true);
    const auto probs = ad::softmax_rows(ad::scale(sal, 1.0 / tau));
    const Eigen::VectorXd p = probs.value().row(0).transpose();
    ad::Matrix keep = ad::Matrix::Zero(1, S);
    for (auto i : retained_set(p, rho)) keep(0, i) = 1.0;
    const auto w = ad::mask_renormalize(probs, keep);
    const auto pooled = ad::weighted_sum(w, e);
    t.backward(ad::sum(ad::mul_const(pooled, probe.transpose())));
    Eigen::VectorXd g(x.size());
    g << sal.grad().row(0).transpose(), flatten_rows(e.grad());
    return g;
  };
  return fn;
}

bool away_from_retention_boundary(const Eigen::VectorXd& saliency, double tau, double rho, double margin) {
  const Eigen::VectorXd p = stable_softmax(Eigen::VectorXd(saliency / tau));
  const auto kept = retained_set(p, rho);
  double before = 0.0;
  for (std::size_t k = 0; k + 1 < kept.size(); ++k) before += p(kept[k]);
  double upto = before + p(kept.back());
  if (kept.size() < static_cast<std::size_t>(p.size()) && (rho - before < margin || upto - rho < margin))
    return false;
  std::vector<double> sorted(p.data(), p.data() + p.size());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const auto cut = kept.size();
  if (cut < sorted.size() && sorted[cut - 1] - sorted[cut] < margin) return false;
  return true;
}

}  // namespace checks

}  // namespace palot
