#pragma once

// Bookkeeping for the translate -> verify -> synthesize stage: similarity
// gating on precomputed sentence embeddings, bilingual prompt construction
// and truncation, hashed prompt sidecars, and deterministic shard merging.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "palot/numio.hpp"

namespace palot {

inline constexpr double kDefaultThreshold = 0.55;

struct EmbeddingPair {
  std::int64_t caption_id = 0;
  Eigen::VectorXd emb_en;
  Eigen::VectorXd emb_bn;
};

struct Verdict {
  double similarity = 0.0;
  bool valid = false;
};

// Cosine similarity of the two embeddings; valid iff similarity >= threshold.
Verdict verify_pair(const EmbeddingPair& pair, double threshold = kDefaultThreshold);

// embeddings: N x 2 x E (float32 or float64), ids: int64 of length N.
std::vector<EmbeddingPair> embeddings_from_tensors(const Tensor& embeddings, const Tensor& ids);

struct VerifySummary {
  std::size_t total = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  double threshold = kDefaultThreshold;
};

nlohmann::json to_json(const VerifySummary& s);

// Fills similarity/valid for every record. Each caption_id needs exactly one
// embedding pair; missing ids are an error.
VerifySummary verify_records(std::vector<CaptionPairRecord>& records, const std::vector<EmbeddingPair>& embeddings,
                             double threshold = kDefaultThreshold);

struct Shard {
  std::vector<CaptionPairRecord> records;
  std::vector<EmbeddingPair> embeddings;
};

// Verifies shards concurrently (at most `threads` at a time, 0 = hardware
// concurrency). Results are identical to verifying them one by one.
std::vector<VerifySummary> verify_shards(std::vector<Shard>& shards, double threshold = kDefaultThreshold,
                                         unsigned threads = 0);

// Records whose valid flag disagrees with similarity >= threshold, or that
// lack either field.
std::vector<std::int64_t> audit_records(const std::vector<CaptionPairRecord>& records,
                                        double threshold = kDefaultThreshold);

std::string build_prompt(const std::string& text_en, const std::string& text_bn);

using Tokens = std::vector<std::string>;
using Splitter = std::function<Tokens(const std::string&)>;

Tokens split_tokens(const std::string& text);
std::string join_tokens(const Tokens& tokens);

struct TruncateOptions {
  int cap = 77;
  int en_budget = 37;
  int bn_budget = 40;
};

const std::set<std::string>& default_en_stopwords();
const std::set<std::string>& default_bn_stopwords();

// Per side: drop stopwords from the last occurrence backwards until within
// budget, then cut the tail. Unused budget is not moved between languages;
// the BN budget is lowered when needed so the combined length stays within cap.
std::pair<Tokens, Tokens> truncate_bilingual(const Tokens& en, const Tokens& bn, const TruncateOptions& opt = {},
                                             const std::set<std::string>& en_stop = default_en_stopwords(),
                                             const std::set<std::string>& bn_stop = default_bn_stopwords());

std::string sha256_hex(const std::string& data);

inline constexpr const char* kDefaultNegativePrompt = "low quality, bad anatomy, watermark";

struct PromptSidecar {
  std::string prompt;
  std::map<std::string, std::string> model_versions;
  std::string negative_prompt = kDefaultNegativePrompt;
  std::int64_t seed = 42;
  std::string sha256_of_prompt;

  friend bool operator==(const PromptSidecar&, const PromptSidecar&) = default;
};

PromptSidecar sidecar_for(const std::string& prompt, const std::map<std::string, std::string>& versions = {},
                          std::int64_t seed = 42);
bool validate_sidecar(const PromptSidecar& s);

nlohmann::json to_json(const PromptSidecar& s);
PromptSidecar sidecar_from_json(const nlohmann::json& j);

struct MergeSummary {
  std::size_t shards = 0;
  std::size_t total = 0;
  std::size_t duplicates = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t unverified = 0;
};

nlohmann::json to_json(const MergeSummary& s);

struct MergeResult {
  std::vector<CaptionPairRecord> records;
  MergeSummary summary;
};

// Concatenates in shard order. A repeated caption_id identical to the first
// occurrence is dropped and counted; any difference throws ConflictError.
MergeResult merge_shards(const std::vector<std::vector<CaptionPairRecord>>& shards);
MergeResult merge_shards(const std::vector<std::filesystem::path>& paths);

}  // namespace palot
