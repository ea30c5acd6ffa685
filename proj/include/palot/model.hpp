#pragma once

// Desk-scale captioner: frozen random patch encoder, trainable Linear+LN
// bridge, and a small pre-LN transformer decoder with cross-attention over
// the bridged patch tokens. Patches carry no positional encoding.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "palot/attnpool.hpp"
#include "palot/losses.hpp"
#include "palot/tape.hpp"

namespace palot {

struct ToyConfig {
  int raw_dim = 20;     // per-patch input features
  int channels = 32;    // encoder output width C
  int width = 32;       // decoder width D
  int heads = 2;
  int layers = 2;
  int ffn = 64;
  int vocab = 64;
  int max_len = 8;      // caption length including BOS/EOS/PAD
  int pad_id = 0;
  int bos_id = 1;
  int eos_id = 2;
  std::uint64_t seed = 42;

  void validate() const;
};

nlohmann::json to_json(const ToyConfig& c);
ToyConfig toy_config_from_json(const nlohmann::json& j);

// Which part of the trainable model a parameter belongs to.
enum class ParamGroup { Bridge, Embedding, Layer, Head };

struct Param {
  std::string name;
  ad::Matrix value;
  ParamGroup group;
  int layer = -1;  // decoder layer for ParamGroup::Layer
};

// Triplets (real, synthetic, caption) for B samples. Patch grids are S x raw_dim.
struct TripletBatch {
  std::vector<ad::Matrix> real_patches;
  std::optional<std::vector<ad::Matrix>> syn_patches;
  std::vector<std::vector<int>> captions;  // each of length max_len, starts with BOS, PAD only at the end

  std::size_t size() const noexcept { return captions.size(); }
  bool has_synthetic() const noexcept { return syn_patches.has_value(); }
  // Throws ShapeError/DomainError on contract violations.
  void validate(const ToyConfig& cfg) const;
};

// Teacher forcing split of a caption: inputs are tokens[0..T-2], targets are
// tokens[1..T-1]; a step is valid when its target is not PAD.
struct TeacherForcing {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<bool> valid;
};
TeacherForcing teacher_forcing(const std::vector<int>& caption, int pad_id);

class ToyModel {
 public:
  explicit ToyModel(const ToyConfig& cfg);

  const ToyConfig& config() const noexcept { return cfg_; }

  // Frozen encoder: tanh(raw * W + b), S x raw_dim -> S x C.
  ad::Matrix encode(const ad::Matrix& raw) const;
  const ad::Matrix& encoder_weight() const noexcept { return enc_w_; }
  const ad::Matrix& encoder_bias() const noexcept { return enc_b_; }

  std::vector<Param>& params() noexcept { return params_; }
  const std::vector<Param>& params() const noexcept { return params_; }
  std::size_t param_count() const;
  Param& param(const std::string& name);
  const Param& param(const std::string& name) const;

  void save(const std::filesystem::path& dir, const nlohmann::json& extra_manifest = {}) const;
  static ToyModel load(const std::filesystem::path& dir);

  // Parameter indices in params().
  struct LayerIndex {
    int ln1_g, ln1_b, sa_q, sa_k, sa_v, sa_o;
    int ln2_g, ln2_b, ca_q, ca_k, ca_v, ca_o;
    int ln3_g, ln3_b, ff_w1, ff_b1, ff_w2, ff_b2;
  };
  struct Index {
    int bridge_w, bridge_b, bridge_ln_g, bridge_ln_b;
    int tok_emb, pos_emb;
    std::vector<LayerIndex> layer;
    int final_ln_g, final_ln_b, head_w, head_b;
  };
  const Index& index() const noexcept { return idx_; }

 private:
  ToyModel(const ToyConfig& cfg, bool init);
  void build_layout(bool init);

  ToyConfig cfg_;
  ad::Matrix enc_w_;
  ad::Matrix enc_b_;
  std::vector<Param> params_;
  Index idx_{};
};

// Parameters placed on a tape for one forward/backward pass.
struct BoundParams {
  std::vector<ad::Var> vars;
};

// requires_grad[i] selects which parameters accumulate gradients; empty = all.
BoundParams bind(ad::Tape& tape, const ToyModel& model, const std::vector<bool>& requires_grad = {});

struct DecoderPass {
  ad::Var patch_tokens;               // S x D, bridged (Linear + LN)
  ad::Var logits;                     // T x V (invalid when the head was skipped)
  std::vector<ad::Var> cross_attn;    // [layer * heads + head] -> T x S
};

// Runs the decoder over `tokens` attending to `features` (S x C, already
// encoded). `with_head` = false skips the vocabulary projection.
DecoderPass decode(ad::Tape& tape, const BoundParams& p, const ToyModel& model, const ad::Matrix& features,
                   const std::vector<int>& tokens, bool with_head = true);

// Plain-value view of a teacher-forced forward pass over a batch.
struct ForwardResult {
  LogitsBatch<double> logits;
  std::vector<AttentionStack<double>> real_attention;
  std::vector<AttentionStack<double>> syn_attention;  // empty when the batch has no synthetic images
};
ForwardResult forward(const ToyModel& model, const TripletBatch& batch);

struct GenerateOptions {
  int max_len = 8;
  int beams = 1;
  int no_repeat_ngram = 0;      // 0 disables the constraint
  double length_penalty = 0.0;  // score / len^length_penalty
};

// Beam search from a forced BOS. The result starts with BOS and stops at EOS
// or max_len tokens.
std::vector<int> generate(const ToyModel& model, const ad::Matrix& raw_patches, const GenerateOptions& opt);

}  // namespace palot
