#pragma once

#include <filesystem>
#include <vector>

#include "palot/model.hpp"
#include "palot/objective.hpp"

namespace palot {

// Cosine warmup from peak/div to peak over the first `warmup` fraction of
// steps, then cosine anneal to `floor`.
struct OneCycle {
  long total_steps = 1;
  double peak = 3e-3;
  double floor = 1e-5;
  double warmup = 0.1;
  double div = 25.0;

  double at(long step) const;
};

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // matrices only; biases and norm gains are not decayed
};

class AdamW {
 public:
  AdamW(const ToyModel& model, AdamWOptions opt);
  // Frozen parameters (mask false) keep their values and moments.
  void step(ToyModel& model, const std::vector<ad::Matrix>& grads, double lr, const std::vector<bool>& mask);
  long steps() const noexcept { return t_; }

 private:
  AdamWOptions opt_;
  std::vector<ad::Matrix> m_, v_;
  long t_ = 0;
};

struct TrainOptions {
  int epochs = 6;
  double peak_lr = 3e-3;
  double floor_lr = 1e-5;
  double warmup = 0.1;
  double clip_norm = 1.0;
  int accumulation = 1;
  bool progressive_unfreeze = false;
  bool stop_grad_weights = false;
  AdamWOptions adamw;

  void validate() const;
};

nlohmann::json to_json(const TrainOptions& o);
TrainOptions merge_train_options(TrainOptions base, const nlohmann::json& j);

// 0: bridge only, 1: bridge + top decoder layer + head, 2: everything.
int unfreeze_stage(long step, long total_steps, bool progressive);
std::vector<bool> trainable_mask(const ToyModel& model, int stage);

struct StepRecord {
  long step = 0;
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
  int stage = 2;
  LossBreakdown loss;      // averaged over accumulated micro-batches
};

// Real/synthetic gap of pooled descriptors on the probe set.
struct AlignmentProbe {
  double centroid = 0.0;
  double mmd = 0.0;      // ambient space
  double mmd_2d = 0.0;   // PCA plane fitted on the pooled real+synthetic set
  double bandwidth = 0.0;
};

AlignmentProbe probe_alignment(const ToyModel& model, const std::vector<TripletBatch>& probe, const RunConfig& cfg,
                               double bandwidth = 0.0);

struct TrainResult {
  std::vector<StepRecord> history;
  AlignmentProbe before;
  AlignmentProbe after;
  long steps = 0;
};

nlohmann::json to_json(const StepRecord& r);
nlohmann::json to_json(const AlignmentProbe& p);
nlohmann::json to_json(const TrainResult& r);

// Trains bridge and decoder in place. Batches without synthetic images
// contribute CE only. `probe` (if nonempty) must carry synthetic images; the
// alignment bandwidth is fixed from the initial model and reused at the end.
// Throws NumericError naming the step on a non-finite loss.
TrainResult train(ToyModel& model, const std::vector<TripletBatch>& dataset, const RunConfig& cfg,
                  const TrainOptions& opt, const std::vector<TripletBatch>& probe = {});

// Sum of total loss over history entries from the first 10% of steps onward.
double loss_area_after_warmup(const std::vector<StepRecord>& history);

}  // namespace palot
