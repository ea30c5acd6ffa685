#include "palot/train.hpp"

#include <cmath>
#include <numbers>

#include "palot/diagnostics.hpp"

namespace palot {

double OneCycle::at(long step) const {
  if (total_steps < 1) throw DomainError("schedule needs at least one step");
  const double start = peak / div;
  const long warm = static_cast<long>(std::ceil(warmup * static_cast<double>(total_steps)));
  const auto cosine = [](double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  if (step < warm) return cosine(start, peak, static_cast<double>(step) / static_cast<double>(warm));
  const long rest = total_steps - warm;
  if (rest <= 1) return peak;
  const double frac = std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(rest - 1));
  return cosine(peak, floor, frac);
}

AdamW::AdamW(const ToyModel& model, AdamWOptions opt) : opt_(opt) {
  for (const auto& p : model.params()) {
    m_.push_back(ad::Matrix::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(ad::Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

void AdamW::step(ToyModel& model, const std::vector<ad::Matrix>& grads, double lr, const std::vector<bool>& mask) {
  auto& params = model.params();
  if (grads.size() != params.size() || mask.size() != params.size()) throw ShapeError("AdamW: parameter count differs");
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!mask[i]) continue;
    auto& w = params[i].value;
    m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * grads[i];
    v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * grads[i].cwiseProduct(grads[i]);
    if (w.rows() > 1 && w.cols() > 1) w *= 1.0 - lr * opt_.weight_decay;
    w -= lr * ((m_[i] / c1).array() / ((v_[i] / c2).array().sqrt() + opt_.eps)).matrix();
  }
}

void TrainOptions::validate() const {
  if (epochs < 1) throw DomainError("epochs must be positive");
  if (!(peak_lr > 0) || !(floor_lr >= 0) || floor_lr > peak_lr) throw DomainError("need 0 <= floor_lr <= peak_lr");
  if (warmup < 0 || warmup >= 1) throw DomainError("warmup must lie in [0, 1)");
  if (!(clip_norm > 0)) throw DomainError("clip_norm must be positive");
  if (accumulation < 1) throw DomainError("accumulation must be positive");
}

nlohmann::json to_json(const TrainOptions& o) {
  return {{"epochs", o.epochs},
          {"peak_lr", o.peak_lr},
          {"floor_lr", o.floor_lr},
          {"warmup", o.warmup},
          {"clip_norm", o.clip_norm},
          {"accumulation", o.accumulation},
          {"progressive_unfreeze", o.progressive_unfreeze},
          {"stop_grad_weights", o.stop_grad_weights},
          {"weight_decay", o.adamw.weight_decay}};
}

TrainOptions merge_train_options(TrainOptions o, const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("training options must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "epochs")
      o.epochs = value.get<int>();
    else if (key == "peak_lr")
      o.peak_lr = value.get<double>();
    else if (key == "floor_lr")
      o.floor_lr = value.get<double>();
    else if (key == "warmup")
      o.warmup = value.get<double>();
    else if (key == "clip_norm")
      o.clip_norm = value.get<double>();
    else if (key == "accumulation")
      o.accumulation = value.get<int>();
    else if (key == "progressive_unfreeze")
      o.progressive_unfreeze = value.get<bool>();
    else if (key == "stop_grad_weights")
      o.stop_grad_weights = value.get<bool>();
    else if (key == "weight_decay")
      o.adamw.weight_decay = value.get<double>();
    else
      throw ParseError("unknown training option: " + key);
  }
  return o;
}

int unfreeze_stage(long step, long total, bool progressive) {
  if (!progressive) return 2;
  if (6 * step < total) return 0;
  if (6 * step < 2 * total) return 1;
  return 2;
}

std::vector<bool> trainable_mask(const ToyModel& model, int stage) {
  const auto& ps = model.params();
  std::vector<bool> mask(ps.size(), true);
  if (stage >= 2) return mask;
  const int top = model.config().layers - 1;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& p = ps[i];
    switch (p.group) {
      case ParamGroup::Bridge: mask[i] = true; break;
      case ParamGroup::Embedding: mask[i] = false; break;
      case ParamGroup::Layer: mask[i] = stage == 1 && p.layer == top; break;
      case ParamGroup::Head: mask[i] = stage == 1; break;
    }
  }
  return mask;
}

AlignmentProbe probe_alignment(const ToyModel& model, const std::vector<TripletBatch>& probe, const RunConfig& cfg,
                               double bandwidth) {
  if (probe.empty()) throw DomainError("probe set is empty");
  std::vector<Mat<double>> reals, syns;
  Eigen::Index n = 0;
  for (const auto& b : probe) {
    auto [r, s] = pooled_descriptors(model, b, cfg);
    n += r.rows();
    reals.push_back(std::move(r));
    syns.push_back(std::move(s));
  }
  const auto D = reals.front().cols();
  Mat<double> real(n, D), syn(n, D);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < reals.size(); ++i) {
    real.middleRows(row, reals[i].rows()) = reals[i];
    syn.middleRows(row, syns[i].rows()) = syns[i];
    row += reals[i].rows();
  }
  AlignmentProbe out;
  out.centroid = centroid_distance(real, syn);
  out.bandwidth = bandwidth > 0.0 ? bandwidth : median_bandwidth(real, syn);
  out.mmd = mmd_rbf(real, syn, out.bandwidth);
  Mat<double> both(2 * n, D);
  both << real, syn;
  const auto proj = pca_2d(both);
  const Mat<double> pr = proj.coords.topRows(n), ps = proj.coords.bottomRows(n);
  out.mmd_2d = mmd_rbf(pr, ps, median_bandwidth(pr, ps));
  return out;
}

nlohmann::json to_json(const StepRecord& r) {
  return {{"step", r.step}, {"lr", r.lr}, {"grad_norm", r.grad_norm}, {"stage", r.stage}, {"loss", to_json(r.loss)}};
}

nlohmann::json to_json(const AlignmentProbe& p) {
  return {{"centroid", p.centroid}, {"mmd", p.mmd}, {"mmd_2d", p.mmd_2d}, {"bandwidth", p.bandwidth}};
}

nlohmann::json to_json(const TrainResult& r) {
  nlohmann::json h = nlohmann::json::array();
  for (const auto& s : r.history) h.push_back(to_json(s));
  nlohmann::json j{{"steps", r.steps}, {"history", h}};
  if (r.before.bandwidth > 0) {
    j["alignment"] = {{"before", to_json(r.before)}, {"after", to_json(r.after)}};
  }
  return j;
}

TrainResult train(ToyModel& model, const std::vector<TripletBatch>& dataset, const RunConfig& cfg,
                  const TrainOptions& opt, const std::vector<TripletBatch>& probe) {
  if (dataset.empty()) throw DomainError("training dataset is empty");
  cfg.validate();
  opt.validate();
  for (const auto& b : dataset) b.validate(model.config());

  const long per_epoch = (static_cast<long>(dataset.size()) + opt.accumulation - 1) / opt.accumulation;
  TrainResult res;
  res.steps = per_epoch * opt.epochs;
  const OneCycle schedule{res.steps, opt.peak_lr, opt.floor_lr, opt.warmup};
  AdamW optimizer(model, opt.adamw);
  if (!probe.empty()) res.before = probe_alignment(model, probe, cfg);

  long step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (std::size_t first = 0; first < dataset.size(); first += opt.accumulation) {
      const std::size_t last = std::min(dataset.size(), first + opt.accumulation);
      const double share = 1.0 / static_cast<double>(last - first);
      StepRecord rec;
      rec.step = step;
      rec.lr = schedule.at(step);
      rec.stage = unfreeze_stage(step, res.steps, opt.progressive_unfreeze);
      const auto mask = trainable_mask(model, rec.stage);

      std::vector<ad::Matrix> grads;
      for (const auto& p : model.params()) grads.push_back(ad::Matrix::Zero(p.value.rows(), p.value.cols()));
      bool any_synthetic = false;
      for (std::size_t i = first; i < last; ++i) {
        ad::Tape tape;
        JointPass pass;
        try {
          pass = joint_loss(tape, dataset[i], cfg, model, {opt.stop_grad_weights, mask});
        } catch (const NumericError& e) {
          throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        const auto g = backward(tape, pass);
        for (std::size_t k = 0; k < grads.size(); ++k) grads[k] += share * g.params[k];
        const auto& b = pass.breakdown;
        rec.loss.ce += share * b.ce;
        rec.loss.pal += share * b.pal;
        rec.loss.nce += share * b.nce;
        rec.loss.ot += share * b.ot;
        rec.loss.total += share * b.total;
        any_synthetic = any_synthetic || b.synthetic_present;
      }
      rec.loss.synthetic_present = any_synthetic;

      double sq = 0.0;
      for (const auto& g : grads) sq += g.squaredNorm();
      rec.grad_norm = std::sqrt(sq);
      if (!std::isfinite(rec.grad_norm)) throw NumericError("training diverged at step " + std::to_string(step));
      if (rec.grad_norm > opt.clip_norm)
        for (auto& g : grads) g *= opt.clip_norm / rec.grad_norm;
      optimizer.step(model, grads, rec.lr, mask);
      res.history.push_back(rec);
      ++step;
    }
  }
  if (!probe.empty()) res.after = probe_alignment(model, probe, cfg, res.before.bandwidth);
  return res;
}

double loss_area_after_warmup(const std::vector<StepRecord>& history) {
  const auto skip = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(history.size())));
  double area = 0.0;
  for (std::size_t i = skip; i < history.size(); ++i) area += history[i].loss.total;
  return area;
}

}  // namespace palot
