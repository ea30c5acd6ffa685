#include "palot/toydata.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace palot::toy {

namespace {

const char* const kColorNames[kColors] = {"red", "green", "blue", "yellow", "purple", "orange", "white", "black"};
const char* const kShapeNames[kShapes] = {"circle", "square", "triangle", "star", "cross", "ring", "heart", "moon"};

ad::Matrix render(const Scene& scene, const DataConfig& d, bool synthetic, std::mt19937_64& rng) {
  const int S = d.grid * d.grid;
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double shift = synthetic ? -d.style_shift : d.style_shift;
  const double noise = synthetic ? d.syn_noise : d.noise;
  const double semantic = synthetic ? d.syn_semantic : 1.0;
  ad::Matrix m(S, kRawDim);
  for (int s = 0; s < S; ++s) {
    for (int c = 0; c < kColors + kShapes; ++c) m(s, c) = noise * gauss(rng);
    for (int c = 0; c < kStyle; ++c) m(s, kColors + kShapes + c) = shift + noise * gauss(rng);
  }
  std::vector<int> cells(S);
  std::iota(cells.begin(), cells.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);
  // Each object covers two random cells.
  std::size_t next = 0;
  for (const auto& [color, shape] : scene.objects)
    for (int k = 0; k < 2; ++k) {
      const int s = cells[next++];
      m(s, color) += semantic;
      m(s, kColors + shape) += semantic;
    }
  return m;
}

}  // namespace

void DataConfig::validate() const {
  if (grid < 2) throw DomainError("grid must be at least 2");
  if (samples < 1 || batch_size < 1) throw DomainError("samples and batch_size must be positive");
  if (noise < 0 || syn_noise < 0) throw DomainError("noise must be nonnegative");
  if (two_object_prob < 0 || two_object_prob > 1) throw DomainError("two_object_prob must lie in [0, 1]");
}

std::vector<int> caption_of(const Scene& s, const ToyConfig& cfg) {
  std::vector<int> out{cfg.bos_id, kTokA};
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    if (i > 0) out.push_back(kTokAnd);
    out.push_back(kFirstColor + s.objects[i].first);
    out.push_back(kFirstShape + s.objects[i].second);
  }
  out.push_back(cfg.eos_id);
  if (static_cast<int>(out.size()) > cfg.max_len) throw DomainError("caption exceeds max_len");
  out.resize(cfg.max_len, cfg.pad_id);
  return out;
}

std::string detokenize(const std::vector<int>& tokens, const ToyConfig& cfg) {
  std::string out;
  for (int t : tokens) {
    if (t == cfg.bos_id || t == cfg.pad_id) continue;
    if (t == cfg.eos_id) break;
    std::string w;
    if (t == kTokA)
      w = "a";
    else if (t == kTokAnd)
      w = "and";
    else if (t >= kFirstColor && t < kFirstColor + kColors)
      w = kColorNames[t - kFirstColor];
    else if (t >= kFirstShape && t < kFirstShape + kShapes)
      w = kShapeNames[t - kFirstShape];
    else
      w = "<" + std::to_string(t) + ">";
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

ToyConfig model_config_for(const DataConfig& d) {
  ToyConfig c;
  c.raw_dim = kRawDim;
  c.max_len = 8;
  c.seed = d.seed;
  return c;
}

std::vector<TripletBatch> make_dataset(const DataConfig& d, const ToyConfig& cfg) {
  d.validate();
  cfg.validate();
  if (cfg.raw_dim != kRawDim) throw ShapeError("model raw_dim does not match toy data");
  if (cfg.vocab < kFirstShape + kShapes) throw DomainError("vocabulary too small for toy captions");
  // Distinct stream from model initialisation, which also starts from the seed.
  std::mt19937_64 rng(d.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> color(0, kColors - 1), shape(0, kShapes - 1);
  std::bernoulli_distribution two(d.two_object_prob);

  std::vector<TripletBatch> out;
  for (int start = 0; start < d.samples; start += d.batch_size) {
    TripletBatch b;
    if (d.synthetic) b.syn_patches.emplace();
    for (int i = start; i < std::min(d.samples, start + d.batch_size); ++i) {
      Scene s;
      s.objects.emplace_back(color(rng), shape(rng));
      if (two(rng)) {
        std::pair<int, int> o{color(rng), shape(rng)};
        while (o == s.objects.front()) o = {color(rng), shape(rng)};
        s.objects.push_back(o);
      }
      b.captions.push_back(caption_of(s, cfg));
      b.real_patches.push_back(render(s, d, false, rng));
      if (d.synthetic) b.syn_patches->push_back(render(s, d, true, rng));
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<TripletBatch> strip_synthetic(std::vector<TripletBatch> batches) {
  for (auto& b : batches) b.syn_patches.reset();
  return batches;
}

}  // namespace palot::toy
