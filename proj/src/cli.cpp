#include "palot/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <random>

#include <CLI11.hpp>

#include "palot/attnpool.hpp"
#include "palot/datapipe.hpp"
#include "palot/diagnostics.hpp"
#include "palot/objective.hpp"
#include "palot/ot.hpp"
#include "palot/toydata.hpp"
#include "palot/train.hpp"

namespace palot::cli {

namespace {

using nlohmann::json;

class UsageError : public Error {
 public:
  using Error::Error;
};

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

Level log_level() {
  const char* env = std::getenv("PALOT_LOG_LEVEL");
  if (!env) return Level::Warn;
  const std::string v(env);
  if (v == "error") return Level::Error;
  if (v == "info") return Level::Info;
  if (v == "debug") return Level::Debug;
  return Level::Warn;
}

class Log {
 public:
  explicit Log(std::ostream& err) : err_(err), level_(log_level()) {}
  void info(const std::string& m) const { emit(Level::Info, "info", m); }
  void debug(const std::string& m) const { emit(Level::Debug, "debug", m); }
  void warn(const std::string& m) const { emit(Level::Warn, "warn", m); }
  void error(const std::string& m) const { emit(Level::Error, "error", m); }

 private:
  void emit(Level l, const char* tag, const std::string& m) const {
    if (l <= level_) err_ << "palot " << tag << ": " << m << '\n';
  }
  std::ostream& err_;
  Level level_;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Flags shared by every command plus the RunConfig overrides; each command
// reads the subset it needs.
struct Context {
  std::int64_t seed = 42;
  std::string config_path;
  CLI::Option* seed_opt = nullptr;

  std::map<std::string, CLI::Option*> run_opts;
  double lambda_pal = 0, alpha = 0, beta = 0, tau_attn = 0, rho = 0, nce_temp = 0, ot_eps = 0;
  int last_k = 0, ot_iters = 0;
  std::string retention;

  json config_json = json::object();

  void add_common(CLI::App* app) {
    seed_opt = app->add_option("--seed", seed, "random seed (default 42)");
    app->add_option("--config", config_path, "JSON config; explicit flags take precedence")->check(CLI::ExistingFile);
  }

  void add_run_flags(CLI::App* app, std::initializer_list<std::string> which) {
    for (const auto& name : which) {
      CLI::Option* o = nullptr;
      if (name == "lambda_pal") o = app->add_option("--lambda-pal", lambda_pal, "PAL weight");
      if (name == "alpha") o = app->add_option("--alpha", alpha, "InfoNCE weight");
      if (name == "beta") o = app->add_option("--beta", beta, "OT weight");
      if (name == "tau_attn") o = app->add_option("--tau-attn", tau_attn, "attention softmax temperature");
      if (name == "rho") o = app->add_option("--rho", rho, "retained attention mass");
      if (name == "last_k") o = app->add_option("--last-k", last_k, "decoder layers averaged");
      if (name == "nce_temp") o = app->add_option("--nce-temp", nce_temp, "InfoNCE temperature");
      if (name == "ot_eps") o = app->add_option("--eps,--ot-eps", ot_eps, "entropic regularisation");
      if (name == "ot_iters") o = app->add_option("--iters,--ot-iters", ot_iters, "Sinkhorn iterations");
      if (name == "retention")
        o = app->add_option("--retention", retention, "mass or count")->check(CLI::IsMember({"mass", "count"}));
      if (!o) throw std::logic_error("unknown run flag " + name);
    }
  }

  // Options live per subcommand; point at the ones of the command being run.
  void bind(CLI::App* s) {
    seed_opt = s->get_option("--seed");
    static const std::map<std::string, std::string> flags{
        {"lambda_pal", "--lambda-pal"}, {"alpha", "--alpha"},       {"beta", "--beta"},
        {"tau_attn", "--tau-attn"},     {"rho", "--rho"},           {"last_k", "--last-k"},
        {"nce_temp", "--nce-temp"},     {"ot_eps", "--eps"},        {"ot_iters", "--iters"},
        {"retention", "--retention"}};
    run_opts.clear();
    for (const auto& [name, flag] : flags)
      if (auto* o = s->get_option_no_throw(flag)) run_opts[name] = o;
  }

  void load_config() {
    if (config_path.empty()) return;
    config_json = read_json_file(config_path);
    if (!config_json.is_object()) throw UsageError("--config must hold a JSON object");
  }

  // Config sections other than the RunConfig keys.
  json section(const std::string& name) const {
    return config_json.contains(name) ? config_json.at(name) : json::object();
  }

  RunConfig run_config(std::initializer_list<std::string> sections = {}) const {
    json base = config_json;
    for (const auto& s : sections) base.erase(s);
    RunConfig cfg;
    try {
      cfg = merge_config(cfg, base);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    const auto given = [&](const std::string& k) {
      const auto it = run_opts.find(k);
      return it != run_opts.end() && it->second->count() > 0;
    };
    if (given("lambda_pal")) cfg.lambda_pal = lambda_pal;
    if (given("alpha")) cfg.alpha = alpha;
    if (given("beta")) cfg.beta = beta;
    if (given("tau_attn")) cfg.tau_attn = tau_attn;
    if (given("rho")) cfg.rho = rho;
    if (given("last_k")) cfg.last_k = last_k;
    if (given("nce_temp")) cfg.nce_temp = nce_temp;
    if (given("ot_eps")) cfg.ot_eps = ot_eps;
    if (given("ot_iters")) cfg.ot_iters = ot_iters;
    if (given("retention")) cfg.retention = retention == "count" ? RetentionMode::Count : RetentionMode::Mass;
    if (seed_opt->count() > 0) cfg.seed = seed;
    try {
      cfg.validate();
    } catch (const DomainError& e) {
      throw UsageError(e.what());
    }
    return cfg;
  }

  std::int64_t effective_seed() const {
    if (seed_opt->count() > 0) return seed;
    if (config_json.contains("seed")) return config_json.at("seed").get<std::int64_t>();
    return 42;
  }
};

RecordFormat format_for(const std::string& path) {
  try {
    return record_format_from_path(path);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

// ---------------------------------------------------------------------------

struct VerifyPairs {
  std::vector<std::string> records, embeddings, ids;
  double threshold = kDefaultThreshold;
  std::string out;
  unsigned threads = 0;

  void add(CLI::App* app) {
    app->add_option("--records", records, "CSV/JSONL record shard (repeatable)")->required()->check(CLI::ExistingFile);
    app->add_option("--embeddings", embeddings, "N x 2 x E tensor per shard")->required()->check(CLI::ExistingFile);
    app->add_option("--ids", ids, "int64 caption ids per shard")->required()->check(CLI::ExistingFile);
    app->add_option("--threshold", threshold, "acceptance threshold")->check(CLI::Range(-1.0, 1.0));
    app->add_option("--out", out, "merged CSV/JSONL output");
    app->add_option("--threads", threads, "parallel shard workers (0 = auto)");
  }

  json run(const Context&, const Log& log) const {
    if (records.size() != embeddings.size() || records.size() != ids.size())
      throw UsageError("--records, --embeddings and --ids must be given the same number of times");
    std::vector<Shard> shards(records.size());
    for (std::size_t i = 0; i < shards.size(); ++i) {
      shards[i].records = read_records(records[i], format_for(records[i]));
      shards[i].embeddings = embeddings_from_tensors(read_tensor(embeddings[i]), read_tensor(ids[i]));
    }
    const auto summaries = verify_shards(shards, threshold, threads);
    std::vector<std::vector<CaptionPairRecord>> verified;
    for (auto& s : shards) verified.push_back(std::move(s.records));
    const auto merged = merge_shards(verified);
    if (!out.empty()) write_records(out, merged.records, format_for(out));
    json per = json::array();
    for (const auto& s : summaries) per.push_back(to_json(s));
    log.info("verified " + std::to_string(merged.summary.total) + " records");
    return {{"command", "verify-pairs"}, {"threshold", threshold},     {"shards", per},
            {"total", merged.summary.total}, {"accepted", merged.summary.accepted},
            {"rejected", merged.summary.rejected}, {"duplicates", merged.summary.duplicates}};
  }
};

struct BuildPrompts {
  std::string records, out_dir, negative;
  std::vector<std::string> versions;
  TruncateOptions trunc;

  void add(CLI::App* app) {
    app->add_option("--records", records, "CSV/JSONL records")->required()->check(CLI::ExistingFile);
    app->add_option("--out-dir", out_dir, "directory for <caption_id>.json sidecars");
    app->add_option("--cap", trunc.cap, "combined token cap")->check(CLI::NonNegativeNumber);
    app->add_option("--en-budget", trunc.en_budget, "English token budget")->check(CLI::NonNegativeNumber);
    app->add_option("--bn-budget", trunc.bn_budget, "Bengali token budget")->check(CLI::NonNegativeNumber);
    app->add_option("--negative-prompt", negative, "negative prompt recorded in sidecars");
    app->add_option("--model-version", versions, "name=version (repeatable)");
  }

  json run(const Context& ctx, const Log& log) const {
    std::map<std::string, std::string> vmap;
    for (const auto& v : versions) {
      const auto eq = v.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--model-version expects name=version");
      vmap[v.substr(0, eq)] = v.substr(eq + 1);
    }
    const auto recs = read_records(records, format_for(records));
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
    json items = json::array();
    std::size_t truncated = 0;
    for (const auto& r : recs) {
      const auto en = split_tokens(r.text_en), bn = split_tokens(r.text_bn);
      if (en.empty()) throw DomainError("caption_id " + std::to_string(r.caption_id) + " has empty English text");
      const auto [te, tb] = truncate_bilingual(en, bn, trunc);
      if (te.size() != en.size() || tb.size() != bn.size()) ++truncated;
      auto sc = sidecar_for(build_prompt(join_tokens(te), join_tokens(tb)), vmap, ctx.effective_seed());
      if (!negative.empty()) sc.negative_prompt = negative;
      if (!out_dir.empty())
        write_json_file(std::filesystem::path(out_dir) / (std::to_string(r.caption_id) + ".json"), to_json(sc));
      items.push_back({{"caption_id", r.caption_id},
                       {"prompt", sc.prompt},
                       {"sha256_of_prompt", sc.sha256_of_prompt},
                       {"en_tokens", te.size()},
                       {"bn_tokens", tb.size()}});
    }
    log.info("built " + std::to_string(items.size()) + " prompts");
    return {{"command", "build-prompts"}, {"count", items.size()}, {"truncated", truncated}, {"prompts", items}};
  }
};

struct MergeShards {
  std::vector<std::string> shards;
  std::string out;
  double threshold = kDefaultThreshold;

  void add(CLI::App* app) {
    app->add_option("--shards", shards, "record shards in merge order")->required()->check(CLI::ExistingFile);
    app->add_option("--out", out, "merged CSV/JSONL output");
    app->add_option("--threshold", threshold, "threshold used for the re-audit")->check(CLI::Range(-1.0, 1.0));
  }

  json run(const Context&, const Log& log) const {
    std::vector<std::filesystem::path> paths(shards.begin(), shards.end());
    for (const auto& p : paths) format_for(p.string());
    const auto merged = merge_shards(paths);
    if (!out.empty()) write_records(out, merged.records, format_for(out));
    const auto bad = audit_records(merged.records, threshold);
    std::size_t inconsistent = 0;
    for (const auto& r : merged.records)
      if (r.similarity && r.valid && *r.valid != (*r.similarity >= threshold)) ++inconsistent;
    if (merged.summary.duplicates > 0) log.warn(std::to_string(merged.summary.duplicates) + " duplicate records dropped");
    return {{"command", "merge-shards"},
            {"summary", to_json(merged.summary)},
            {"threshold", threshold},
            {"audit", {{"inconsistent", inconsistent}, {"unverified", bad.size() - inconsistent}}}};
  }
};

struct TrainToy {
  TrainOptions topt;
  toy::DataConfig data;
  int probe_samples = 32;
  bool ce_only = false;
  std::string out, history_out;
  std::map<std::string, CLI::Option*> opts;

  void add(CLI::App* app) {
    opts["epochs"] = app->add_option("--epochs", topt.epochs, "passes over the dataset");
    opts["peak_lr"] = app->add_option("--peak-lr", topt.peak_lr, "One-Cycle peak learning rate");
    opts["floor_lr"] = app->add_option("--floor-lr", topt.floor_lr, "One-Cycle final learning rate");
    opts["warmup"] = app->add_option("--warmup", topt.warmup, "warmup fraction of steps");
    opts["clip_norm"] = app->add_option("--clip-norm", topt.clip_norm, "global gradient norm cap");
    opts["accumulation"] = app->add_option("--accumulation", topt.accumulation, "micro-batches per step");
    opts["progressive_unfreeze"] =
        app->add_flag("--progressive-unfreeze", topt.progressive_unfreeze, "bridge -> top layer -> all");
    opts["stop_grad_weights"] =
        app->add_flag("--stop-grad-weights", topt.stop_grad_weights, "treat pooling weights as constants");
    opts["weight_decay"] = app->add_option("--weight-decay", topt.adamw.weight_decay, "AdamW decoupled decay");
    opts["samples"] = app->add_option("--samples", data.samples, "training scenes");
    opts["batch_size"] = app->add_option("--batch-size", data.batch_size, "scenes per micro-batch");
    opts["grid"] = app->add_option("--grid", data.grid, "patch grid side");
    app->add_option("--probe-samples", probe_samples, "held-out scenes for the alignment probe (0 = skip)");
    app->add_flag("--ce-only", ce_only, "drop synthetic images (captioning loss only)");
    app->add_option("--out", out, "checkpoint directory");
    app->add_option("--history-out", history_out, "write the metrics history JSON here too");
  }

  json run(const Context& ctx, const Log& log) {
    const auto cfg = ctx.run_config({"train", "data"});
    const auto seed = static_cast<std::uint64_t>(cfg.seed);
    TrainOptions o = topt;
    toy::DataConfig d = data;
    try {
      const auto tj = ctx.section("train");
      o = merge_train_options(TrainOptions{}, tj);
      const auto dj = ctx.section("data");
      toy::DataConfig base;
      for (const auto& [k, v] : dj.items()) {
        if (k == "samples")
          base.samples = v.get<int>();
        else if (k == "batch_size")
          base.batch_size = v.get<int>();
        else if (k == "grid")
          base.grid = v.get<int>();
        else
          throw UsageError("unknown data option: " + k);
      }
      d = base;
    } catch (const ParseError& e) {
      throw UsageError(e.what());
    } catch (const json::exception& e) {
      throw UsageError(std::string("bad config value: ") + e.what());
    }
    const auto given = [&](const char* k) { return opts.at(k)->count() > 0; };
    if (given("epochs")) o.epochs = topt.epochs;
    if (given("peak_lr")) o.peak_lr = topt.peak_lr;
    if (given("floor_lr")) o.floor_lr = topt.floor_lr;
    if (given("warmup")) o.warmup = topt.warmup;
    if (given("clip_norm")) o.clip_norm = topt.clip_norm;
    if (given("accumulation")) o.accumulation = topt.accumulation;
    if (given("progressive_unfreeze")) o.progressive_unfreeze = topt.progressive_unfreeze;
    if (given("stop_grad_weights")) o.stop_grad_weights = topt.stop_grad_weights;
    if (given("weight_decay")) o.adamw.weight_decay = topt.adamw.weight_decay;
    if (given("samples")) d.samples = data.samples;
    if (given("batch_size")) d.batch_size = data.batch_size;
    if (given("grid")) d.grid = data.grid;
    d.seed = seed;
    d.synthetic = !ce_only;
    try {
      o.validate();
      d.validate();
    } catch (const DomainError& e) {
      throw UsageError(e.what());
    }
    if (probe_samples < 0) throw UsageError("--probe-samples must be nonnegative");

    const auto mc = toy::model_config_for(d);
    const auto dataset = toy::make_dataset(d, mc);
    std::vector<TripletBatch> probe;
    if (probe_samples > 0) {
      toy::DataConfig pd = d;
      pd.samples = probe_samples;
      pd.synthetic = true;
      pd.seed = seed + 1;
      probe = toy::make_dataset(pd, mc);
    }
    ToyModel model(mc);
    log.info("training " + std::to_string(dataset.size()) + " batches for " + std::to_string(o.epochs) + " epochs");
    const auto res = train(model, dataset, cfg, o, probe);
    const auto& last = res.history.back().loss;
    log.info("final total loss " + std::to_string(last.total));

    json result = to_json(res);
    result["command"] = "train-toy";
    result["seed"] = cfg.seed;
    result["config"] = to_json(cfg);
    result["train"] = to_json(o);
    result["data"] = {{"samples", d.samples}, {"batch_size", d.batch_size}, {"grid", d.grid}, {"synthetic", d.synthetic}};
    result["final"] = to_json(last);
    if (!out.empty()) {
      model.save(out, {{"step", res.steps}, {"seed", cfg.seed}, {"run_config", to_json(cfg)}, {"train", to_json(o)}});
      result["checkpoint"] = out;
    }
    if (!history_out.empty()) write_json_file(history_out, result);
    return result;
  }
};

struct Generate {
  std::string checkpoint, patches;
  int sample = -1;
  GenerateOptions g;

  void add(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "directory written by train-toy")->required();
    app->add_option("--patches", patches, "S x raw_dim patch grid tensor")->check(CLI::ExistingFile);
    app->add_option("--toy-sample", sample, "use scene i of the seeded toy data instead of --patches");
    app->add_option("--max-len", g.max_len, "maximum sequence length including BOS");
    app->add_option("--beams", g.beams, "beam width");
    app->add_option("--no-repeat-ngram", g.no_repeat_ngram, "forbid repeated n-grams (0 = off)");
    app->add_option("--length-penalty", g.length_penalty, "score / length^penalty");
  }

  json run(const Context& ctx, const Log&) const {
    if (patches.empty() == (sample < 0)) throw UsageError("give exactly one of --patches and --toy-sample");
    if (g.beams < 1) throw UsageError("--beams must be at least 1");
    if (g.max_len < 1) throw UsageError("--max-len must be at least 1");
    const auto model = ToyModel::load(checkpoint);
    ad::Matrix raw;
    json j{{"command", "generate"}};
    if (!patches.empty()) {
      raw = as_matrix<double>(read_tensor(patches));
    } else {
      toy::DataConfig d;
      d.samples = sample + 1;
      d.batch_size = sample + 1;
      d.seed = static_cast<std::uint64_t>(ctx.effective_seed());
      const auto batch = toy::make_dataset(d, model.config()).front();
      raw = batch.real_patches.back();
      j["reference"] = toy::detokenize(batch.captions.back(), model.config());
    }
    const auto tokens = generate(model, raw, g);
    j["tokens"] = tokens;
    j["text"] = toy::detokenize(tokens, model.config());
    return j;
  }
};

struct SinkhornCmd {
  std::string cost, a, b, plan_out;
  bool converged = false;
  bool exact = false;
  double tol = 1e-12;

  void add(CLI::App* app) {
    app->add_option("--cost", cost, "m x n cost tensor")->required()->check(CLI::ExistingFile);
    app->add_option("--a", a, "row marginal (length m)")->required()->check(CLI::ExistingFile);
    app->add_option("--b", b, "column marginal (length n)")->required()->check(CLI::ExistingFile);
    app->add_option("--plan-out", plan_out, "write the plan tensor here");
    app->add_flag("--converged", converged, "iterate until the residual falls below --tol (--iters is the cap)");
    app->add_option("--tol", tol, "residual tolerance for --converged");
    app->add_flag("--exact", exact, "also solve the unregularised problem (sides <= 8)");
  }

  json run(const Context& ctx, const Log& log) const {
    const auto cfg = ctx.run_config();
    const Eigen::MatrixXd c = as_matrix<double>(read_tensor(cost));
    const Eigen::VectorXd av = as_vector<double>(read_tensor(a)), bv = as_vector<double>(read_tensor(b));
    SinkhornOptions opt;
    opt.eps = cfg.ot_eps;
    opt.iters = cfg.ot_iters;
    opt.stop = converged ? StopRule::Converged : StopRule::FixedIterations;
    opt.tol = tol;
    const auto t = sinkhorn(c, av, bv, opt);
    if (!plan_out.empty()) write_tensor(plan_out, Tensor::from_matrix(t.plan));
    json j{{"command", "sinkhorn"},         {"eps", opt.eps},
           {"iterations", t.iterations},    {"cost", t.cost},
           {"row_residual", t.row_residual}, {"col_residual", t.col_residual}};
    json plan = json::array();
    for (Eigen::Index i = 0; i < t.plan.rows(); ++i) {
      json row = json::array();
      for (Eigen::Index k = 0; k < t.plan.cols(); ++k) row.push_back(t.plan(i, k));
      plan.push_back(row);
    }
    j["plan"] = plan;
    if (exact) {
      const auto lp = lp_oracle(c, av, bv);
      j["exact_cost"] = lp.cost;
      j["gap"] = t.cost - lp.cost;
    }
    log.debug("sinkhorn ran " + std::to_string(t.iterations) + " iterations");
    return j;
  }
};

struct GradCheckCmd {
  int points = 20;
  int batch = 3, dim = 5, patches = 6, vocab = 7, steps = 4;

  void add(CLI::App* app) {
    app->add_option("--points", points, "random points per term")->check(CLI::PositiveNumber);
    app->add_option("--batch", batch, "InfoNCE / CE batch size")->check(CLI::PositiveNumber);
    app->add_option("--dim", dim, "descriptor width")->check(CLI::PositiveNumber);
    app->add_option("--patches", patches, "patches per image for OT / pooling")->check(CLI::PositiveNumber);
    app->add_option("--vocab", vocab, "vocabulary size for CE")->check(CLI::Range(2, 1000));
    app->add_option("--steps", steps, "caption steps for CE")->check(CLI::PositiveNumber);
  }

  json run(const Context& ctx, const Log& log) const {
    const auto cfg = ctx.run_config();
    std::mt19937_64 rng(static_cast<std::uint64_t>(cfg.seed));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const auto randn = [&](Eigen::Index n) {
      Eigen::VectorXd v(n);
      for (Eigen::Index i = 0; i < n; ++i) v(i) = gauss(rng);
      return v;
    };
    const auto simplex = [&](Eigen::Index n) {
      Eigen::VectorXd v = randn(n).array().exp();
      return Eigen::VectorXd(v / v.sum());
    };
    struct Term {
      const char* name;
      double limit;
      double worst = 0.0;
      int checked = 0;
      int skipped = 0;
    };
    Term terms[] = {{"pal", 1e-5}, {"infonce", 1e-5}, {"masked_ce", 1e-5}, {"ot", 1e-3}, {"topk_pool", 1e-5}};
    for (int p = 0; p < points; ++p) {
      {
        const auto fn = checks::pal_wrt_r(randn(dim));
        terms[0].worst = std::max(terms[0].worst, grad_check(fn, randn(dim)).max_rel_error);
        ++terms[0].checked;
      }
      {
        const auto fn = checks::infonce_wrt_inputs(batch, dim, cfg.nce_temp);
        terms[1].worst = std::max(terms[1].worst, grad_check(fn, randn(2 * batch * dim)).max_rel_error);
        ++terms[1].checked;
      }
      {
        std::uniform_int_distribution<int> tok(0, vocab - 1);
        std::vector<std::vector<int>> targets(batch, std::vector<int>(steps));
        std::vector<std::vector<bool>> valid(batch, std::vector<bool>(steps, true));
        for (auto& row : targets)
          for (auto& t : row) t = tok(rng);
        for (auto& row : valid) row.back() = false;
        const auto fn = checks::masked_ce_wrt_logits(targets, valid, vocab);
        terms[2].worst = std::max(terms[2].worst, grad_check(fn, randn(batch * steps * vocab)).max_rel_error);
        ++terms[2].checked;
      }
      {
        Eigen::MatrixXd es(patches, dim);
        for (Eigen::Index i = 0; i < patches; ++i) es.row(i) = randn(dim).transpose();
        const auto fn = checks::ot_wrt_patches(es, simplex(patches), simplex(patches), cfg.ot_eps, cfg.ot_iters);
        terms[3].worst = std::max(terms[3].worst, grad_check(fn, randn(patches * dim)).max_rel_error);
        ++terms[3].checked;
      }
      {
        const Eigen::VectorXd x = randn(patches + patches * dim);
        if (!checks::away_from_retention_boundary(x.head(patches), cfg.tau_attn, cfg.rho, 1e-4)) {
          ++terms[4].skipped;
        } else {
          const auto fn = checks::topk_pool_wrt_inputs(patches, randn(dim), cfg.tau_attn, cfg.rho);
          terms[4].worst = std::max(terms[4].worst, grad_check(fn, x).max_rel_error);
          ++terms[4].checked;
        }
      }
    }
    json out{{"command", "grad-check"}, {"points", points}, {"seed", cfg.seed}};
    bool pass = true;
    json tj = json::object();
    for (const auto& t : terms) {
      const bool ok = t.worst < t.limit;
      pass = pass && ok;
      tj[t.name] = {{"max_rel_error", t.worst}, {"limit", t.limit}, {"checked", t.checked},
                    {"skipped", t.skipped},     {"pass", ok}};
      log.info(std::string(t.name) + " worst relative error " + std::to_string(t.worst));
    }
    out["terms"] = tj;
    out["pass"] = pass;
    return out;
  }
};

struct Diagnose {
  std::string real, synthetic;
  double bandwidth = 0.0;

  void add(CLI::App* app) {
    app->add_option("--real", real, "N x D real embeddings")->required()->check(CLI::ExistingFile);
    app->add_option("--synthetic", synthetic, "M x D synthetic embeddings")->required()->check(CLI::ExistingFile);
    app->add_option("--bandwidth", bandwidth, "RBF bandwidth (default: median heuristic)");
  }

  json run(const Context&, const Log&) const {
    const EmbeddingSet<double> a{as_matrix<double>(read_tensor(real)), SetLabel::Real};
    const EmbeddingSet<double> b{as_matrix<double>(read_tensor(synthetic)), SetLabel::Synthetic};
    if (a.points.cols() != b.points.cols()) throw ShapeError("real and synthetic dimensions differ");
    const double bw = bandwidth > 0.0 ? bandwidth : median_bandwidth(a.points, b.points);
    json j{{"command", "diagnose"},
           {"n_real", a.points.rows()},
           {"n_synthetic", b.points.rows()},
           {"dim", a.points.cols()},
           {"centroid_distance", centroid_distance(a.points, b.points)},
           {"bandwidth", bw},
           {"mmd", mmd_rbf(a.points, b.points, bw)}};
    Mat<double> both(a.points.rows() + b.points.rows(), a.points.cols());
    both << a.points, b.points;
    if (both.rows() >= 2) {
      const auto proj = pca_2d(both);
      const Mat<double> pa = proj.coords.topRows(a.points.rows()), pb = proj.coords.bottomRows(b.points.rows());
      const double bw2 = median_bandwidth(pa, pb);
      j["projected"] = {{"bandwidth", bw2},
                        {"mmd", mmd_rbf(pa, pb, bw2)},
                        {"centroid_distance", centroid_distance(pa, pb)},
                        {"explained_variance", {proj.explained(0), proj.explained(1)}},
                        {"total_variance", proj.total_variance}};
    }
    return j;
  }
};

std::vector<TokenList> read_token_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<TokenList> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path + ": " + e.what(), n);
    }
    if (j.is_string())
      out.push_back(split_whitespace(j.get<std::string>()));
    else if (j.is_object() && j.contains("text") && j.at("text").is_string())
      out.push_back(split_whitespace(j.at("text").get<std::string>()));
    else if (j.is_object() && j.contains("tokens") && j.at("tokens").is_array())
      out.push_back(j.at("tokens").get<TokenList>());
    else
      throw ParseError(path + ": expected a string or an object with \"text\" or \"tokens\"", n);
  }
  return out;
}

struct BleuCmd {
  std::string candidates, references;
  int max_n = 4;

  void add(CLI::App* app) {
    app->add_option("--candidates", candidates, "JSONL hypotheses")->required()->check(CLI::ExistingFile);
    app->add_option("--references", references, "JSONL references")->required()->check(CLI::ExistingFile);
    app->add_option("--max-n", max_n, "highest n-gram order")->check(CLI::Range(1, 4));
  }

  json run(const Context&, const Log&) const {
    const auto c = read_token_lines(candidates);
    const auto r = read_token_lines(references);
    const auto stats = bleu_stats(c, r, max_n);
    const auto scores = bleu_n(c, r, max_n);
    json j{{"command", "bleu"}, {"max_n", max_n}, {"sentences", c.size()}, {"bleu", scores}};
    j["candidate_length"] = stats.candidate_length;
    j["reference_length"] = stats.reference_length;
    return j;
  }
};

struct PalEval {
  std::string attention, patches, syn_attention, syn_patches, mask;

  void add(CLI::App* app) {
    app->add_option("--attention", attention, "L x H x T x S real cross-attention")->required()->check(CLI::ExistingFile);
    app->add_option("--patches", patches, "S x D real patch tokens")->required()->check(CLI::ExistingFile);
    app->add_option("--syn-attention", syn_attention, "synthetic cross-attention")->required()->check(CLI::ExistingFile);
    app->add_option("--syn-patches", syn_patches, "synthetic patch tokens")->required()->check(CLI::ExistingFile);
    app->add_option("--mask", mask, "int64 length-T token mask (1 = valid; default all valid)")
        ->check(CLI::ExistingFile);
  }

  json run(const Context& ctx, const Log&) const {
    const auto cfg = ctx.run_config();
    const auto at = read_tensor(attention), ast = read_tensor(syn_attention);
    if (at.rank() != 4) throw ShapeError("attention must be L x H x T x S");
    const auto T = at.shape()[2];
    Tensor m(std::vector<std::uint64_t>{T}, std::vector<std::int64_t>(T, 1));
    if (!mask.empty()) m = read_tensor(mask);
    const auto real = AttentionStack<double>::from_tensor(at, m);
    const auto syn = AttentionStack<double>::from_tensor(ast, m);
    const Eigen::MatrixXd e = as_matrix<double>(read_tensor(patches)), es = as_matrix<double>(read_tensor(syn_patches));
    const auto w = topk_softmax(aggregate_attention(real, cfg.last_k), cfg.tau_attn, cfg.rho, cfg.retention);
    const auto ws = topk_softmax(aggregate_attention(syn, cfg.last_k), cfg.tau_attn, cfg.rho, cfg.retention);
    const Eigen::VectorXd r = weighted_pool(w, e);
    const Eigen::VectorXd rs = weighted_pool(ws, es);
    SinkhornOptions so;
    so.eps = cfg.ot_eps;
    so.iters = cfg.ot_iters;
    const auto plan = sinkhorn(cosine_cost(e, es), w, ws, so);
    const auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    return {{"command", "pal-eval"},
            {"weights", vec(w)},
            {"weights_syn", vec(ws)},
            {"pooled", vec(r)},
            {"pooled_syn", vec(rs)},
            {"pal", pal_loss(r, rs)},
            {"ot", plan.cost},
            {"ot_row_residual", plan.row_residual},
            {"ot_col_residual", plan.col_residual}};
  }
};

json error_json(const std::string& kind, const std::string& message, int code) {
  return {{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}};
}

std::string kind_of(const std::exception& e) {
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const OverflowError*>(&e)) return "overflow";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const DomainError*>(&e)) return "domain";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const ParseError*>(&e)) return "parse";
  if (dynamic_cast<const ConflictError*>(&e)) return "conflict";
  return "runtime";
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"verify-pairs", "build-prompts", "merge-shards", "train-toy", "generate",
                                              "sinkhorn",     "grad-check",    "diagnose",     "bleu",      "pal-eval"};
  return names;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Log log(err);
  CLI::App app{"Patch-alignment toolkit: data pipeline, toy captioner and alignment diagnostics", "palot"};
  app.require_subcommand(1, 1);

  Context ctx;
  VerifyPairs verify;
  BuildPrompts prompts;
  MergeShards merge;
  TrainToy train_cmd;
  Generate gen;
  SinkhornCmd sk;
  GradCheckCmd gc;
  Diagnose diag;
  BleuCmd bleu;
  PalEval pal;

  std::map<CLI::App*, std::function<json()>> handlers;
  const auto sub = [&](const char* name, const char* help, auto& cmd, std::initializer_list<std::string> run_flags) {
    auto* s = app.add_subcommand(name, help);
    ctx.add_common(s);
    if (run_flags.size() > 0) ctx.add_run_flags(s, run_flags);
    cmd.add(s);
    handlers[s] = [&cmd, &ctx, &log] { return cmd.run(ctx, log); };
  };
  const std::initializer_list<std::string> all_run = {"lambda_pal", "alpha",    "beta",   "tau_attn", "rho",
                                                       "last_k",     "nce_temp", "ot_eps", "ot_iters", "retention"};
  sub("verify-pairs", "gate caption pairs on embedding similarity", verify, {});
  sub("build-prompts", "bilingual prompts and hashed sidecars", prompts, {});
  sub("merge-shards", "merge verified shards and re-audit", merge, {});
  sub("train-toy", "train the toy captioner", train_cmd, all_run);
  sub("generate", "beam-search a caption from a checkpoint", gen, {});
  sub("sinkhorn", "entropic transport between two marginals", sk, {"ot_eps", "ot_iters"});
  sub("grad-check", "finite-difference check of every loss gradient", gc,
      {"tau_attn", "rho", "nce_temp", "ot_eps", "ot_iters"});
  sub("diagnose", "centroid distance, MMD and PCA of two embedding sets", diag, {});
  sub("bleu", "corpus BLEU-1..n", bleu, {});
  sub("pal-eval", "attention pooling, PAL and OT for one real/synthetic pair", pal,
      {"tau_attn", "rho", "last_k", "ot_eps", "ot_iters", "retention"});

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    out << error_json("usage", e.what(), kExitUsage).dump(2) << '\n';
    log.error(e.what());
    return kExitUsage;
  }

  try {
    for (auto* s : app.get_subcommands()) ctx.bind(s);
    ctx.load_config();
    for (auto* s : app.get_subcommands()) {
      const auto result = handlers.at(s)();
      out << result.dump(2) << '\n';
    }
    return kExitOk;
  } catch (const UsageError& e) {
    out << error_json("usage", e.what(), kExitUsage).dump(2) << '\n';
    log.error(e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    out << error_json(kind_of(e), e.what(), kExitRuntime).dump(2) << '\n';
    log.error(e.what());
    return kExitRuntime;
  }
}

}  // namespace palot::cli
