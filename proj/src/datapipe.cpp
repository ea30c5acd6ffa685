#include "palot/datapipe.hpp"

#include <algorithm>
#include <future>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <openssl/evp.h>

#include "palot/losses.hpp"

namespace palot {

Verdict verify_pair(const EmbeddingPair& pair, double threshold) {
  if (pair.emb_en.size() == 0 || pair.emb_en.size() != pair.emb_bn.size())
    throw ShapeError("embedding pair " + std::to_string(pair.caption_id) + " has mismatched dimensions");
  if (!pair.emb_en.allFinite() || !pair.emb_bn.allFinite())
    throw DomainError("embedding pair " + std::to_string(pair.caption_id) + " is not finite");
  Verdict v;
  v.similarity = cosine(pair.emb_en, pair.emb_bn);
  v.valid = v.similarity >= threshold;
  return v;
}

std::vector<EmbeddingPair> embeddings_from_tensors(const Tensor& embeddings, const Tensor& ids) {
  const auto& s = embeddings.shape();
  if (s.size() != 3 || s[1] != 2) throw ShapeError("embeddings must have shape N x 2 x E");
  if (ids.dtype() != DType::Int64 || ids.shape().size() != 1 || ids.shape()[0] != s[0])
    throw ShapeError("ids must be an int64 vector of length N");
  const auto n = static_cast<Eigen::Index>(s[0]);
  const auto e = static_cast<Eigen::Index>(s[2]);
  if (embeddings.dtype() == DType::Int64) throw ShapeError("embeddings must be floating point");
  Eigen::VectorXd flat(static_cast<Eigen::Index>(embeddings.numel()));
  for (Eigen::Index i = 0; i < flat.size(); ++i) flat(i) = embeddings.at(i);
  const auto& id = std::get<std::vector<std::int64_t>>(ids.payload());
  std::vector<EmbeddingPair> out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out[i].caption_id = id[i];
    out[i].emb_en = flat.segment(2 * i * e, e);
    out[i].emb_bn = flat.segment((2 * i + 1) * e, e);
  }
  return out;
}

nlohmann::json to_json(const VerifySummary& s) {
  return {{"total", s.total}, {"accepted", s.accepted}, {"rejected", s.rejected}, {"threshold", s.threshold}};
}

VerifySummary verify_records(std::vector<CaptionPairRecord>& records, const std::vector<EmbeddingPair>& embeddings,
                             double threshold) {
  if (!(threshold >= -1.0 && threshold <= 1.0)) throw DomainError("threshold must lie in [-1, 1]");
  std::unordered_map<std::int64_t, const EmbeddingPair*> by_id;
  for (const auto& e : embeddings)
    if (!by_id.emplace(e.caption_id, &e).second)
      throw ConflictError("duplicate embedding for caption_id " + std::to_string(e.caption_id));
  VerifySummary s;
  s.threshold = threshold;
  for (auto& r : records) {
    const auto it = by_id.find(r.caption_id);
    if (it == by_id.end()) throw DomainError("no embedding for caption_id " + std::to_string(r.caption_id));
    const auto v = verify_pair(*it->second, threshold);
    r.similarity = v.similarity;
    r.valid = v.valid;
    ++s.total;
    ++(v.valid ? s.accepted : s.rejected);
  }
  return s;
}

std::vector<VerifySummary> verify_shards(std::vector<Shard>& shards, double threshold, unsigned threads) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  std::vector<VerifySummary> out(shards.size());
  for (std::size_t first = 0; first < shards.size(); first += threads) {
    const std::size_t last = std::min(shards.size(), first + threads);
    std::vector<std::future<VerifySummary>> jobs;
    for (std::size_t i = first; i < last; ++i)
      jobs.push_back(std::async(std::launch::async, [&shards, i, threshold] {
        return verify_records(shards[i].records, shards[i].embeddings, threshold);
      }));
    for (std::size_t i = first; i < last; ++i) out[i] = jobs[i - first].get();
  }
  return out;
}

std::vector<std::int64_t> audit_records(const std::vector<CaptionPairRecord>& records, double threshold) {
  std::vector<std::int64_t> bad;
  for (const auto& r : records)
    if (!r.similarity || !r.valid || *r.valid != (*r.similarity >= threshold)) bad.push_back(r.caption_id);
  return bad;
}

std::string build_prompt(const std::string& text_en, const std::string& text_bn) {
  return "A photo of: " + text_en + ". In Bengali: " + text_bn;
}

Tokens split_tokens(const std::string& text) {
  std::istringstream in(text);
  Tokens out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

const std::set<std::string>& default_en_stopwords() {
  static const std::set<std::string> words{"a",    "an",   "the",  "of",   "in",   "on",   "at",   "to",  "and",
                                           "or",   "is",   "are",  "was",  "were", "with", "for",  "by",  "from",
                                           "this", "that", "its",  "it",   "as",   "be",   "has",  "have", "some",
                                           "while", "into", "onto", "near", "their", "his", "her"};
  return words;
}

const std::set<std::string>& default_bn_stopwords() {
  static const std::set<std::string> words{"এবং", "ও", "একটি", "একজন", "এক", "এই", "সেই", "যে", "তার", "তাদের",
                                           "করে", "হয়", "আছে", "থেকে", "সাথে", "জন্য", "মধ্যে", "উপর"};
  return words;
}

namespace {

Tokens fit_budget(const Tokens& in, std::size_t budget, const std::set<std::string>& stop) {
  if (in.size() <= budget) return in;
  std::vector<bool> keep(in.size(), true);
  std::size_t size = in.size();
  for (std::size_t i = in.size(); i-- > 0 && size > budget;)
    if (stop.contains(in[i])) {
      keep[i] = false;
      --size;
    }
  Tokens out;
  for (std::size_t i = 0; i < in.size() && out.size() < budget; ++i)
    if (keep[i]) out.push_back(in[i]);
  return out;
}

}  // namespace

std::pair<Tokens, Tokens> truncate_bilingual(const Tokens& en, const Tokens& bn, const TruncateOptions& opt,
                                             const std::set<std::string>& en_stop,
                                             const std::set<std::string>& bn_stop) {
  if (opt.cap < 0 || opt.en_budget < 0 || opt.bn_budget < 0) throw DomainError("budgets must be nonnegative");
  auto e = fit_budget(en, static_cast<std::size_t>(std::min(opt.en_budget, opt.cap)), en_stop);
  const auto room = static_cast<std::size_t>(opt.cap) - e.size();
  auto b = fit_budget(bn, std::min(static_cast<std::size_t>(opt.bn_budget), room), bn_stop);
  return {std::move(e), std::move(b)};
}

std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

PromptSidecar sidecar_for(const std::string& prompt, const std::map<std::string, std::string>& versions,
                          std::int64_t seed) {
  PromptSidecar s;
  s.prompt = prompt;
  s.model_versions = versions;
  s.seed = seed;
  s.sha256_of_prompt = sha256_hex(prompt);
  return s;
}

bool validate_sidecar(const PromptSidecar& s) { return s.sha256_of_prompt == sha256_hex(s.prompt); }

nlohmann::json to_json(const PromptSidecar& s) {
  return {{"prompt", s.prompt},
          {"model_versions", s.model_versions},
          {"negative_prompt", s.negative_prompt},
          {"seed", s.seed},
          {"sha256_of_prompt", s.sha256_of_prompt}};
}

PromptSidecar sidecar_from_json(const nlohmann::json& j) {
  PromptSidecar s;
  try {
    s.prompt = j.at("prompt").get<std::string>();
    s.model_versions = j.at("model_versions").get<std::map<std::string, std::string>>();
    s.negative_prompt = j.at("negative_prompt").get<std::string>();
    s.seed = j.at("seed").get<std::int64_t>();
    s.sha256_of_prompt = j.at("sha256_of_prompt").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed sidecar: ") + e.what());
  }
  return s;
}

nlohmann::json to_json(const MergeSummary& s) {
  return {{"shards", s.shards},     {"total", s.total},       {"duplicates", s.duplicates},
          {"accepted", s.accepted}, {"rejected", s.rejected}, {"unverified", s.unverified}};
}

MergeResult merge_shards(const std::vector<std::vector<CaptionPairRecord>>& shards) {
  MergeResult out;
  out.summary.shards = shards.size();
  std::unordered_map<std::int64_t, std::size_t> seen;
  for (const auto& shard : shards)
    for (const auto& r : shard) {
      const auto [it, fresh] = seen.emplace(r.caption_id, out.records.size());
      if (!fresh) {
        if (!(out.records[it->second] == r))
          throw ConflictError("conflicting records for caption_id " + std::to_string(r.caption_id));
        ++out.summary.duplicates;
        continue;
      }
      out.records.push_back(r);
      if (!r.valid)
        ++out.summary.unverified;
      else
        ++(*r.valid ? out.summary.accepted : out.summary.rejected);
    }
  out.summary.total = out.records.size();
  return out;
}

MergeResult merge_shards(const std::vector<std::filesystem::path>& paths) {
  std::vector<std::vector<CaptionPairRecord>> shards;
  for (const auto& p : paths) shards.push_back(read_records(p, record_format_from_path(p)));
  return merge_shards(shards);
}

}  // namespace palot
