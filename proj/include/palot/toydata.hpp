#pragma once

// Procedural colored-shape scenes on a patch grid. Each patch carries a color
// one-hot, a shape one-hot and a few style channels. A synthetic counterpart
// renders the same caption with its own layout, shifted style statistics and
// weaker, noisier semantics, which gives the real/synthetic gap that the
// alignment terms act on.

#include <cstdint>
#include <string>
#include <vector>

#include "palot/model.hpp"

namespace palot::toy {

inline constexpr int kColors = 8;
inline constexpr int kShapes = 8;
inline constexpr int kStyle = 4;
inline constexpr int kRawDim = kColors + kShapes + kStyle;

inline constexpr int kTokA = 3;
inline constexpr int kTokAnd = 4;
inline constexpr int kFirstColor = 8;
inline constexpr int kFirstShape = 16;

struct DataConfig {
  int grid = 4;                 // grid x grid patches
  int samples = 32;
  int batch_size = 8;
  double style_shift = 0.8;     // real style mean +shift, synthetic -shift
  double syn_semantic = 0.6;    // synthetic semantic channel scale
  double noise = 0.1;
  double syn_noise = 0.25;
  double two_object_prob = 0.5;
  bool synthetic = true;
  std::uint64_t seed = 42;

  void validate() const;
};

// One scene: up to two (color, shape) objects.
struct Scene {
  std::vector<std::pair<int, int>> objects;
};

std::vector<int> caption_of(const Scene& s, const ToyConfig& cfg);
std::string detokenize(const std::vector<int>& tokens, const ToyConfig& cfg);

// Model config that fits the generated data (raw_dim, vocab, max_len).
ToyConfig model_config_for(const DataConfig& d);

std::vector<TripletBatch> make_dataset(const DataConfig& d, const ToyConfig& cfg);

// Drops synthetic images from every batch.
std::vector<TripletBatch> strip_synthetic(std::vector<TripletBatch> batches);

}  // namespace palot::toy
