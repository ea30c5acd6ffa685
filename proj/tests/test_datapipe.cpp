#include <doctest.h>

#include <fstream>

#include "palot/datapipe.hpp"
#include "support.hpp"

using namespace palot;
using doctest::Approx;

namespace {

EmbeddingPair pair_of(std::int64_t id, Eigen::VectorXd en, Eigen::VectorXd bn) { return {id, std::move(en), std::move(bn)}; }

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

CaptionPairRecord rec(std::int64_t id, std::string en = "en", std::optional<double> sim = std::nullopt) {
  CaptionPairRecord r{id, id * 10, std::move(en), "bn", sim, std::nullopt};
  if (sim) r.valid = *sim >= kDefaultThreshold;
  return r;
}

// Drop the last stopword occurrences one at a time, then cut the tail.
Tokens reference_fit(Tokens t, std::size_t budget, const std::set<std::string>& stop) {
  for (std::size_t i = t.size(); i-- > 0 && t.size() > budget;)
    if (stop.count(t[i])) t.erase(t.begin() + static_cast<std::ptrdiff_t>(i));
  if (t.size() > budget) t.resize(budget);
  return t;
}

bool is_subsequence(const Tokens& sub, const Tokens& full) {
  std::size_t j = 0;
  for (const auto& tok : full)
    if (j < sub.size() && sub[j] == tok) ++j;
  return j == sub.size();
}

}  // namespace

TEST_CASE("verification verdicts") {
  const auto e = testing::randv(8);
  const auto same = verify_pair(pair_of(1, e, e));
  CHECK(same.similarity == Approx(1.0).epsilon(1e-15));
  CHECK(same.valid);

  const auto orth = verify_pair(pair_of(2, vec({1, 0}), vec({0, 3})));
  CHECK(orth.similarity == 0.0);
  CHECK_FALSE(orth.valid);

  // 11 / (1 * 20) lands exactly on the threshold.
  const auto edge = verify_pair(pair_of(3, vec({1, 0, 0, 0, 0}), vec({11, 13, 10, 3, 1})));
  CHECK(edge.similarity == 0.55);
  CHECK(edge.valid);
  CHECK_FALSE(verify_pair(pair_of(3, vec({1, 0, 0, 0, 0}), vec({11, 13, 10, 3, 1})), 0.5500001).valid);

  CHECK_THROWS_AS(verify_pair(pair_of(4, vec({0, 0}), vec({1, 0}))), DomainError);
  CHECK_THROWS_AS(verify_pair(pair_of(5, vec({1, 0, 0}), vec({1, 0}))), ShapeError);
}

TEST_CASE("verification is symmetric and scale invariant") {
  std::mt19937_64 g(3);
  for (int i = 0; i < 30; ++i) {
    const auto a = testing::randv(6, g), b = testing::randv(6, g);
    const auto v = verify_pair(pair_of(i, a, b));
    CHECK(verify_pair(pair_of(i, b, a)).similarity == Approx(v.similarity).epsilon(1e-14));
    CHECK(verify_pair(pair_of(i, a * 5.0, b * 0.2)).similarity == Approx(v.similarity).epsilon(1e-12));
    CHECK(v.similarity == Approx(testing::oracle::cos(std::vector<double>(a.data(), a.data() + 6),
                                                      std::vector<double>(b.data(), b.data() + 6)))
                              .epsilon(1e-12));
  }
}

TEST_CASE("embeddings from tensors") {
  const Tensor emb({2, 2, 2}, std::vector<double>{1, 0, 1, 0, 0, 1, 1, 0});
  const Tensor ids({2}, std::vector<std::int64_t>{7, 9});
  const auto pairs = embeddings_from_tensors(emb, ids);
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[1].caption_id == 9);
  CHECK(verify_pair(pairs[0]).valid);
  CHECK_FALSE(verify_pair(pairs[1]).valid);
  CHECK_THROWS_AS(embeddings_from_tensors(emb, Tensor({3}, std::vector<std::int64_t>{1, 2, 3})), ShapeError);
  CHECK_THROWS_AS(embeddings_from_tensors(Tensor({2, 3, 2}, std::vector<double>(12, 1.0)), ids), ShapeError);
}

TEST_CASE("verify records fills similarity and valid") {
  std::vector<CaptionPairRecord> recs{rec(1), rec(2), rec(3)};
  const std::vector<EmbeddingPair> emb{pair_of(3, vec({1, 0}), vec({1, 0})), pair_of(1, vec({1, 0}), vec({0, 1})),
                                       pair_of(2, vec({1, 1}), vec({1, 0}))};
  const auto s = verify_records(recs, emb);
  CHECK(s.total == 3);
  CHECK(s.accepted == 2);
  CHECK(s.rejected == 1);
  CHECK(recs[0].valid == false);
  CHECK(recs[1].similarity == Approx(std::sqrt(0.5)));
  CHECK(recs[2].valid == true);
  CHECK(audit_records(recs).empty());

  std::vector<CaptionPairRecord> orphan{rec(42)};
  CHECK_THROWS_AS(verify_records(orphan, emb), DomainError);
  auto dup = emb;
  dup.push_back(emb[0]);
  CHECK_THROWS_AS(verify_records(recs, dup), ConflictError);
}

TEST_CASE("audit flags inconsistent and unverified records") {
  std::vector<CaptionPairRecord> recs{rec(1, "a", 0.7), rec(2, "b", 0.3), rec(3)};
  recs[1].valid = true;
  CHECK(audit_records(recs) == std::vector<std::int64_t>{2, 3});
}

TEST_CASE("parallel shard verification matches serial") {
  std::mt19937_64 g(11);
  std::vector<Shard> shards;
  std::int64_t id = 0;
  for (int s = 0; s < 7; ++s) {
    Shard sh;
    for (int k = 0; k < 40; ++k, ++id) {
      sh.records.push_back(rec(id));
      sh.embeddings.push_back(pair_of(id, testing::randv(4, g), testing::randv(4, g)));
    }
    shards.push_back(std::move(sh));
  }
  auto serial = shards, parallel = shards;
  const auto a = verify_shards(serial, kDefaultThreshold, 1);
  const auto b = verify_shards(parallel, kDefaultThreshold, 4);
  REQUIRE(a.size() == b.size());
  for (std::size_t s = 0; s < a.size(); ++s) {
    CHECK(a[s].accepted == b[s].accepted);
    CHECK(serial[s].records == parallel[s].records);
  }
}

TEST_CASE("prompt template") {
  CHECK(build_prompt("a dog", "একটি কুকুর") == "A photo of: a dog. In Bengali: একটি কুকুর");
  CHECK(build_prompt("x", "") == "A photo of: x. In Bengali: ");
  const auto p = build_prompt("a cat", "বিড়াল");
  CHECK(sidecar_for(p).sha256_of_prompt == sha256_hex(p));
}

TEST_CASE("token splitting") {
  CHECK(split_tokens("  a  dog\tran\n") == Tokens{"a", "dog", "ran"});
  CHECK(split_tokens("").empty());
  CHECK(join_tokens({"a", "b"}) == "a b");
}

TEST_CASE("bilingual truncation examples") {
  const Tokens en{"a", "dog", "runs"}, bn{"কুকুর", "দৌড়ায়"};
  const auto same = truncate_bilingual(en, bn);
  CHECK(same.first == en);
  CHECK(same.second == bn);

  const auto& stop = default_en_stopwords();
  const std::vector<std::string> stops(stop.begin(), stop.end());
  Tokens long_en;
  std::mt19937_64 g(5);
  int n_stop = 0;
  for (int i = 0; i < 50; ++i) {
    if (n_stop < 15 && (g() % 3 == 0 || 50 - i <= 15 - n_stop)) {
      long_en.push_back(stops[g() % stops.size()]);
      ++n_stop;
    } else {
      long_en.push_back("w" + std::to_string(i));
    }
  }
  REQUIRE(n_stop == 15);
  const auto out = truncate_bilingual(long_en, {}).first;
  CHECK(out.size() <= 37);
  CHECK(out == reference_fit(long_en, 37, stop));
  // 35 content words fit, so only stopwords were removed.
  for (const auto& t : long_en)
    if (!stop.count(t)) CHECK(std::find(out.begin(), out.end(), t) != out.end());

  TruncateOptions zero;
  zero.en_budget = zero.bn_budget = 0;
  const auto none = truncate_bilingual(en, bn, zero);
  CHECK(none.first.empty());
  CHECK(none.second.empty());

  TruncateOptions neg;
  neg.bn_budget = -1;
  CHECK_THROWS_AS(truncate_bilingual(en, bn, neg), DomainError);
}

TEST_CASE("truncation never reorders and never exceeds the cap") {
  std::mt19937_64 g(9);
  const std::vector<std::string> vocab{"a", "the", "of", "cat", "dog", "red", "blue", "এবং", "একটি", "বিড়াল"};
  for (int trial = 0; trial < 200; ++trial) {
    Tokens en, bn;
    const auto ne = g() % 60, nb = g() % 60;
    for (std::size_t i = 0; i < ne; ++i) en.push_back(vocab[g() % vocab.size()]);
    for (std::size_t i = 0; i < nb; ++i) bn.push_back(vocab[g() % vocab.size()]);
    TruncateOptions o;
    o.cap = static_cast<int>(g() % 80);
    o.en_budget = static_cast<int>(g() % 50);
    o.bn_budget = static_cast<int>(g() % 50);
    const auto [te, tb] = truncate_bilingual(en, bn, o);
    CHECK(te.size() + tb.size() <= static_cast<std::size_t>(o.cap));
    CHECK(te.size() <= static_cast<std::size_t>(o.en_budget));
    CHECK(tb.size() <= static_cast<std::size_t>(o.bn_budget));
    CHECK(is_subsequence(te, en));
    CHECK(is_subsequence(tb, bn));
    CHECK(te == reference_fit(en, std::min<std::size_t>(o.en_budget, o.cap), default_en_stopwords()));
  }
}

TEST_CASE("sha256 and sidecars") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");

  const auto a = sidecar_for("A photo of: x. In Bengali: y", {{"sd", "1.5"}});
  const auto b = sidecar_for("A photo of: x. In Bengali: y", {{"sd", "1.5"}});
  CHECK(a == b);
  CHECK(a.seed == 42);
  CHECK(a.negative_prompt == "low quality, bad anatomy, watermark");
  CHECK(validate_sidecar(a));
  auto m = a;
  m.prompt += "!";
  CHECK_FALSE(validate_sidecar(m));
  CHECK(sidecar_from_json(to_json(a)) == a);
  CHECK_THROWS_AS(sidecar_from_json(nlohmann::json{{"prompt", 1}}), ParseError);
}

TEST_CASE("merging shards") {
  const std::vector<std::vector<CaptionPairRecord>> two{{rec(1), rec(2), rec(3)}, {rec(4), rec(5), rec(6)}};
  const auto m = merge_shards(two);
  REQUIRE(m.records.size() == 6);
  for (std::int64_t i = 0; i < 6; ++i) CHECK(m.records[static_cast<std::size_t>(i)].caption_id == i + 1);
  CHECK(m.summary.shards == 2);
  CHECK(m.summary.unverified == 6);

  const std::vector<std::vector<CaptionPairRecord>> dup{{rec(1), rec(2), rec(3)}, {rec(3), rec(4), rec(5)}};
  const auto d = merge_shards(dup);
  CHECK(d.records.size() == 5);
  CHECK(d.summary.duplicates == 1);

  const std::vector<std::vector<CaptionPairRecord>> clash{{rec(1, "x")}, {rec(1, "y")}};
  CHECK_THROWS_AS(merge_shards(clash), ConflictError);
}

TEST_CASE("merge summary counts match a hand count") {
  std::mt19937_64 g(21);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<std::vector<CaptionPairRecord>> shards(10);
  std::size_t accepted = 0, rejected = 0;
  std::int64_t id = 0;
  for (auto& s : shards)
    for (int k = 0; k < 25; ++k) {
      const double sim = u(g);
      s.push_back(rec(id++, "t", sim));
      (sim >= 0.55 ? accepted : rejected) += 1;
    }
  testing::TempDir dir;
  std::vector<std::filesystem::path> paths;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    paths.push_back(dir / ("shard" + std::to_string(i) + (i % 2 ? ".csv" : ".jsonl")));
    write_records(paths.back(), shards[i], record_format_from_path(paths.back()));
  }
  const auto m = merge_shards(paths);
  CHECK(m.summary.shards == 10);
  CHECK(m.summary.total == 250);
  CHECK(m.summary.accepted == accepted);
  CHECK(m.summary.rejected == rejected);
  CHECK(m.summary.unverified == 0);
  CHECK(audit_records(m.records).empty());
}
