#include "palot/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

namespace palot {

void ToyConfig::validate() const {
  if (raw_dim < 1 || channels < 1 || width < 1 || ffn < 1) throw DomainError("model dimensions must be positive");
  if (heads < 1 || width % heads != 0) throw DomainError("width must be divisible by heads");
  if (layers < 1) throw DomainError("decoder needs at least one layer");
  if (vocab < 4) throw DomainError("vocabulary too small");
  if (max_len < 2) throw DomainError("max_len must be at least 2");
  for (int id : {pad_id, bos_id, eos_id})
    if (id < 0 || id >= vocab) throw DomainError("special token id outside vocabulary");
  if (pad_id == bos_id || pad_id == eos_id || bos_id == eos_id) throw DomainError("special token ids must differ");
}

nlohmann::json to_json(const ToyConfig& c) {
  return {{"raw_dim", c.raw_dim}, {"channels", c.channels}, {"width", c.width},   {"heads", c.heads},
          {"layers", c.layers},   {"ffn", c.ffn},           {"vocab", c.vocab},   {"max_len", c.max_len},
          {"pad_id", c.pad_id},   {"bos_id", c.bos_id},     {"eos_id", c.eos_id}, {"seed", c.seed}};
}

ToyConfig toy_config_from_json(const nlohmann::json& j) {
  ToyConfig c;
  c.raw_dim = j.at("raw_dim").get<int>();
  c.channels = j.at("channels").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.layers = j.at("layers").get<int>();
  c.ffn = j.at("ffn").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.pad_id = j.at("pad_id").get<int>();
  c.bos_id = j.at("bos_id").get<int>();
  c.eos_id = j.at("eos_id").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

void TripletBatch::validate(const ToyConfig& cfg) const {
  const auto B = captions.size();
  if (B == 0) throw ShapeError("empty triplet batch");
  if (real_patches.size() != B) throw ShapeError("real patch count does not match captions");
  if (syn_patches && syn_patches->size() != B) throw ShapeError("synthetic patch count does not match captions");
  const auto S = real_patches.front().rows();
  auto check_grid = [&](const ad::Matrix& m) {
    if (m.rows() != S || m.cols() != cfg.raw_dim) throw ShapeError("patch grid has the wrong shape");
    if (!m.allFinite()) throw NumericError("patch grid has non-finite entries");
  };
  for (const auto& m : real_patches) check_grid(m);
  if (syn_patches)
    for (const auto& m : *syn_patches) check_grid(m);
  for (const auto& c : captions) {
    if (static_cast<int>(c.size()) > cfg.max_len)
      throw DomainError("caption longer than the configured maximum " + std::to_string(cfg.max_len));
    if (c.size() < 2) throw DomainError("caption needs BOS and at least one more token");
    if (c.front() != cfg.bos_id) throw DomainError("caption must start with BOS");
    bool padding = false;
    for (int tok : c) {
      if (tok < 0 || tok >= cfg.vocab) throw DomainError("caption token outside vocabulary");
      if (tok == cfg.pad_id) padding = true;
      else if (padding) throw DomainError("PAD tokens must be contiguous at the end of a caption");
    }
    if (c[1] == cfg.pad_id) throw DomainError("caption has no non-PAD target");
    if (c.size() != captions.front().size()) throw ShapeError("captions in a batch must share a length");
  }
}

TeacherForcing teacher_forcing(const std::vector<int>& caption, int pad_id) {
  TeacherForcing tf;
  tf.inputs.assign(caption.begin(), caption.end() - 1);
  tf.targets.assign(caption.begin() + 1, caption.end());
  tf.valid.resize(tf.targets.size());
  for (std::size_t t = 0; t < tf.targets.size(); ++t) tf.valid[t] = tf.targets[t] != pad_id;
  return tf;
}

// ---------------------------------------------------------------------------

ToyModel::ToyModel(const ToyConfig& cfg) : ToyModel(cfg, true) {}

ToyModel::ToyModel(const ToyConfig& cfg, bool init) : cfg_(cfg) {
  cfg_.validate();
  build_layout(init);
}

void ToyModel::build_layout(bool init) {
  std::mt19937_64 rng(cfg_.seed);
  auto normal = [&rng](Eigen::Index r, Eigen::Index c, double sd) {
    std::normal_distribution<double> dist(0.0, sd);
    ad::Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = dist(rng);
    return m;
  };
  const int D = cfg_.width;
  const int C = cfg_.channels;
  enc_w_ = normal(cfg_.raw_dim, C, 1.5 / std::sqrt(static_cast<double>(cfg_.raw_dim)));
  enc_b_ = normal(1, C, 0.1);

  params_.clear();
  auto add = [&](std::string name, ad::Matrix v, ParamGroup g, int layer = -1) {
    params_.push_back({std::move(name), init ? std::move(v) : ad::Matrix::Zero(v.rows(), v.cols()), g, layer});
    return static_cast<int>(params_.size() - 1);
  };
  auto linear = [&](int in, int out) { return normal(in, out, 1.0 / std::sqrt(static_cast<double>(in))); };
  auto ones = [](int n) { return ad::Matrix::Ones(1, n); };
  auto zeros = [](int r, int c) { return ad::Matrix::Zero(r, c); };

  idx_.bridge_w = add("bridge.w", linear(C, D), ParamGroup::Bridge);
  idx_.bridge_b = add("bridge.b", zeros(1, D), ParamGroup::Bridge);
  idx_.bridge_ln_g = add("bridge.ln.g", ones(D), ParamGroup::Bridge);
  idx_.bridge_ln_b = add("bridge.ln.b", zeros(1, D), ParamGroup::Bridge);
  idx_.tok_emb = add("embed.tokens", normal(cfg_.vocab, D, 0.5), ParamGroup::Embedding);
  idx_.pos_emb = add("embed.positions", normal(cfg_.max_len, D, 0.1), ParamGroup::Embedding);
  idx_.layer.clear();
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerIndex li{};
    li.ln1_g = add(p + "ln1.g", ones(D), ParamGroup::Layer, l);
    li.ln1_b = add(p + "ln1.b", zeros(1, D), ParamGroup::Layer, l);
    li.sa_q = add(p + "self.q", linear(D, D), ParamGroup::Layer, l);
    li.sa_k = add(p + "self.k", linear(D, D), ParamGroup::Layer, l);
    li.sa_v = add(p + "self.v", linear(D, D), ParamGroup::Layer, l);
    li.sa_o = add(p + "self.o", linear(D, D), ParamGroup::Layer, l);
    li.ln2_g = add(p + "ln2.g", ones(D), ParamGroup::Layer, l);
    li.ln2_b = add(p + "ln2.b", zeros(1, D), ParamGroup::Layer, l);
    li.ca_q = add(p + "cross.q", linear(D, D), ParamGroup::Layer, l);
    li.ca_k = add(p + "cross.k", linear(D, D), ParamGroup::Layer, l);
    li.ca_v = add(p + "cross.v", linear(D, D), ParamGroup::Layer, l);
    li.ca_o = add(p + "cross.o", linear(D, D), ParamGroup::Layer, l);
    li.ln3_g = add(p + "ln3.g", ones(D), ParamGroup::Layer, l);
    li.ln3_b = add(p + "ln3.b", zeros(1, D), ParamGroup::Layer, l);
    li.ff_w1 = add(p + "ffn.w1", linear(D, cfg_.ffn), ParamGroup::Layer, l);
    li.ff_b1 = add(p + "ffn.b1", zeros(1, cfg_.ffn), ParamGroup::Layer, l);
    li.ff_w2 = add(p + "ffn.w2", linear(cfg_.ffn, D), ParamGroup::Layer, l);
    li.ff_b2 = add(p + "ffn.b2", zeros(1, D), ParamGroup::Layer, l);
    idx_.layer.push_back(li);
  }
  idx_.final_ln_g = add("final.ln.g", ones(D), ParamGroup::Head);
  idx_.final_ln_b = add("final.ln.b", zeros(1, D), ParamGroup::Head);
  idx_.head_w = add("head.w", linear(D, cfg_.vocab), ParamGroup::Head);
  idx_.head_b = add("head.b", zeros(1, cfg_.vocab), ParamGroup::Head);
}

std::size_t ToyModel::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

Param& ToyModel::param(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw DomainError("no parameter named " + name);
}

const Param& ToyModel::param(const std::string& name) const {
  return const_cast<ToyModel*>(this)->param(name);
}

ad::Matrix ToyModel::encode(const ad::Matrix& raw) const {
  if (raw.cols() != cfg_.raw_dim) throw ShapeError("patch grid width does not match the encoder");
  ad::Matrix z = (raw * enc_w_).rowwise() + enc_b_.row(0);
  return z.array().tanh().matrix();
}

void ToyModel::save(const std::filesystem::path& dir, const nlohmann::json& extra) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
  manifest["model"] = to_json(cfg_);
  nlohmann::json names = nlohmann::json::array();
  for (const auto& p : params_) {
    write_tensor(dir / (p.name + ".tnsr"), Tensor::from_matrix(p.value));
    names.push_back(p.name);
  }
  write_tensor(dir / "encoder.w.tnsr", Tensor::from_matrix(enc_w_));
  write_tensor(dir / "encoder.b.tnsr", Tensor::from_matrix(enc_b_));
  manifest["params"] = names;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

ToyModel ToyModel::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing checkpoint manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint manifest: ") + e.what(), 0);
  }
  ToyModel m(toy_config_from_json(manifest.at("model")), false);
  for (auto& p : m.params_) {
    const auto t = as_matrix<double>(read_tensor(dir / (p.name + ".tnsr")));
    if (t.rows() != p.value.rows() || t.cols() != p.value.cols())
      throw ShapeError("checkpoint tensor " + p.name + " has the wrong shape");
    p.value = t;
  }
  m.enc_w_ = as_matrix<double>(read_tensor(dir / "encoder.w.tnsr"));
  m.enc_b_ = as_matrix<double>(read_tensor(dir / "encoder.b.tnsr"));
  return m;
}

// ---------------------------------------------------------------------------

BoundParams bind(ad::Tape& tape, const ToyModel& model, const std::vector<bool>& requires_grad) {
  const auto& ps = model.params();
  if (!requires_grad.empty() && requires_grad.size() != ps.size())
    throw ShapeError("requires_grad mask must cover every parameter");
  BoundParams b;
  b.vars.reserve(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i)
    b.vars.push_back(tape.leaf(ps[i].value, requires_grad.empty() ? true : bool(requires_grad[i])));
  return b;
}

namespace {

ad::Var multi_head(const ad::Var& q, const ad::Var& k, const ad::Var& v, int heads, const ad::Matrix* mask,
                   std::vector<ad::Var>* probs_out) {
  const auto dh = q.cols() / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> outs;
  for (int h = 0; h < heads; ++h) {
    const auto qh = ad::slice_cols(q, h * dh, dh);
    const auto kh = ad::slice_cols(k, h * dh, dh);
    const auto vh = ad::slice_cols(v, h * dh, dh);
    const auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv);
    const auto probs = ad::softmax_rows(scores, mask);
    if (probs_out) probs_out->push_back(probs);
    outs.push_back(ad::matmul(probs, vh));
  }
  return heads == 1 ? outs.front() : ad::concat_cols(outs);
}

}  // namespace

DecoderPass decode(ad::Tape& tape, const BoundParams& p, const ToyModel& model, const ad::Matrix& features,
                   const std::vector<int>& tokens, bool with_head) {
  const auto& cfg = model.config();
  const auto& ix = model.index();
  const auto& v = p.vars;
  const auto T = static_cast<Eigen::Index>(tokens.size());
  if (T < 1) throw ShapeError("decode needs at least one token");
  if (T > cfg.max_len) throw DomainError("sequence longer than the configured maximum");
  if (features.cols() != cfg.channels) throw ShapeError("encoded features have the wrong width");

  DecoderPass out;
  const auto feats = tape.constant(features);
  const auto projected = ad::add_row(ad::matmul(feats, v[ix.bridge_w]), v[ix.bridge_b]);
  out.patch_tokens = ad::layer_norm_rows(projected, v[ix.bridge_ln_g], v[ix.bridge_ln_b]);

  std::vector<int> positions(static_cast<std::size_t>(T));
  for (Eigen::Index t = 0; t < T; ++t) positions[t] = static_cast<int>(t);
  ad::Var x = ad::add(ad::gather_rows(v[ix.tok_emb], tokens), ad::gather_rows(v[ix.pos_emb], positions));

  ad::Matrix causal = ad::Matrix::Zero(T, T);
  for (Eigen::Index i = 0; i < T; ++i)
    for (Eigen::Index j = i + 1; j < T; ++j) causal(i, j) = -std::numeric_limits<double>::infinity();

  for (const auto& L : ix.layer) {
    auto h = ad::layer_norm_rows(x, v[L.ln1_g], v[L.ln1_b]);
    auto sa = multi_head(ad::matmul(h, v[L.sa_q]), ad::matmul(h, v[L.sa_k]), ad::matmul(h, v[L.sa_v]), cfg.heads,
                         &causal, nullptr);
    x = ad::add(x, ad::matmul(sa, v[L.sa_o]));

    h = ad::layer_norm_rows(x, v[L.ln2_g], v[L.ln2_b]);
    auto ca = multi_head(ad::matmul(h, v[L.ca_q]), ad::matmul(out.patch_tokens, v[L.ca_k]),
                         ad::matmul(out.patch_tokens, v[L.ca_v]), cfg.heads, nullptr, &out.cross_attn);
    x = ad::add(x, ad::matmul(ca, v[L.ca_o]));

    h = ad::layer_norm_rows(x, v[L.ln3_g], v[L.ln3_b]);
    auto f = ad::relu(ad::add_row(ad::matmul(h, v[L.ff_w1]), v[L.ff_b1]));
    x = ad::add(x, ad::add_row(ad::matmul(f, v[L.ff_w2]), v[L.ff_b2]));
  }
  if (with_head) {
    const auto h = ad::layer_norm_rows(x, v[ix.final_ln_g], v[ix.final_ln_b]);
    out.logits = ad::add_row(ad::matmul(h, v[ix.head_w]), v[ix.head_b]);
  }
  return out;
}

namespace {

AttentionStack<double> stack_of(const DecoderPass& pass, const ToyConfig& cfg, const std::vector<bool>& valid) {
  std::vector<Mat<double>> maps;
  for (const auto& a : pass.cross_attn) maps.push_back(a.value());
  return AttentionStack<double>(cfg.layers, cfg.heads, std::move(maps), valid);
}

}  // namespace

ForwardResult forward(const ToyModel& model, const TripletBatch& batch) {
  const auto& cfg = model.config();
  batch.validate(cfg);
  ForwardResult out;
  const auto B = static_cast<Eigen::Index>(batch.size());
  const auto T = static_cast<Eigen::Index>(batch.captions.front().size()) - 1;
  out.logits.targets.resize(B, T);
  out.logits.valid.resize(B, T);
  ad::Tape tape;
  const auto params = palot::bind(tape, model, std::vector<bool>(model.params().size(), false));
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto tf = teacher_forcing(batch.captions[b], cfg.pad_id);
    for (Eigen::Index t = 0; t < T; ++t) {
      out.logits.targets(b, t) = tf.targets[t];
      out.logits.valid(b, t) = tf.valid[t];
    }
    const auto real = decode(tape, params, model, model.encode(batch.real_patches[b]), tf.inputs, true);
    out.logits.logits.push_back(real.logits.value());
    out.real_attention.push_back(stack_of(real, cfg, tf.valid));
    if (batch.syn_patches) {
      const auto syn = decode(tape, params, model, model.encode((*batch.syn_patches)[b]), tf.inputs, false);
      out.syn_attention.push_back(stack_of(syn, cfg, tf.valid));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct Hypothesis {
  std::vector<int> tokens;
  double logp = 0.0;
};

bool repeats_ngram(const std::vector<int>& seq, int next, int n) {
  if (n <= 0 || static_cast<int>(seq.size()) + 1 < n) return false;
  // The n-gram that `next` would complete.
  std::vector<int> tail(seq.end() - (n - 1), seq.end());
  tail.push_back(next);
  for (std::size_t i = 0; i + n <= seq.size(); ++i)
    if (std::equal(tail.begin(), tail.end(), seq.begin() + i)) return true;
  return false;
}

double normalized(const Hypothesis& h, double penalty) {
  if (penalty == 0.0) return h.logp;
  return h.logp / std::pow(static_cast<double>(h.tokens.size()), penalty);
}

}  // namespace

std::vector<int> generate(const ToyModel& model, const ad::Matrix& raw_patches, const GenerateOptions& opt) {
  const auto& cfg = model.config();
  if (opt.beams < 1) throw DomainError("beams must be at least 1");
  if (opt.max_len < 1) throw DomainError("max_len must be at least 1");
  const int max_len = std::min(opt.max_len, cfg.max_len);
  if (max_len == 1) return {cfg.bos_id};
  const auto features = model.encode(raw_patches);

  std::vector<Hypothesis> alive{{{cfg.bos_id}, 0.0}};
  std::vector<Hypothesis> finished;
  while (!alive.empty()) {
    std::vector<Hypothesis> candidates;
    for (const auto& hyp : alive) {
      ad::Tape tape;
      const auto params = palot::bind(tape, model, std::vector<bool>(model.params().size(), false));
      const auto pass = decode(tape, params, model, features, hyp.tokens, true);
      const Eigen::RowVectorXd last = pass.logits.value().bottomRows(1);
      const double lse = log_sum_exp(last);
      for (int tok = 0; tok < cfg.vocab; ++tok) {
        if (tok == cfg.pad_id || tok == cfg.bos_id) continue;
        if (repeats_ngram(hyp.tokens, tok, opt.no_repeat_ngram)) continue;
        Hypothesis next = hyp;
        next.tokens.push_back(tok);
        next.logp += last(tok) - lse;
        candidates.push_back(std::move(next));
      }
    }
    if (candidates.empty()) break;
    // Highest score first; equal scores keep parent order then lower token id.
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.logp > b.logp; });
    if (static_cast<int>(candidates.size()) > opt.beams) candidates.resize(opt.beams);
    alive.clear();
    for (auto& c : candidates) {
      if (c.tokens.back() == cfg.eos_id || static_cast<int>(c.tokens.size()) >= max_len)
        finished.push_back(std::move(c));
      else
        alive.push_back(std::move(c));
    }
  }
  if (finished.empty()) return {cfg.bos_id};
  const auto best = std::max_element(finished.begin(), finished.end(), [&](const auto& a, const auto& b) {
    return normalized(a, opt.length_penalty) < normalized(b, opt.length_penalty);
  });
  return best->tokens;
}

}  // namespace palot
