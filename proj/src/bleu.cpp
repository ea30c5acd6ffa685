#include <cmath>
#include <map>
#include <sstream>

#include "palot/diagnostics.hpp"

namespace palot {

namespace {

using NgramCounts = std::map<std::vector<std::string>, long>;

NgramCounts count_ngrams(const TokenList& tokens, int n) {
  NgramCounts counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

}  // namespace

TokenList split_whitespace(const std::string& text) {
  std::istringstream in(text);
  TokenList out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

BleuStats bleu_stats(const std::vector<TokenList>& candidates, const std::vector<TokenList>& references, int max_n) {
  if (candidates.empty()) throw DomainError("bleu: empty corpus");
  if (candidates.size() != references.size())
    throw ShapeError("bleu: " + std::to_string(candidates.size()) + " candidates but " +
                     std::to_string(references.size()) + " references");
  if (max_n < 1 || max_n > 4) throw DomainError("bleu: max_n must lie in [1, 4]");
  BleuStats s;
  s.matches.assign(max_n, 0);
  s.totals.assign(max_n, 0);
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const auto& cand = candidates[k];
    const auto& ref = references[k];
    s.candidate_length += static_cast<long>(cand.size());
    s.reference_length += static_cast<long>(ref.size());
    for (int n = 1; n <= max_n; ++n) {
      const auto cc = count_ngrams(cand, n);
      const auto rc = count_ngrams(ref, n);
      for (const auto& [gram, cnt] : cc) {
        s.totals[n - 1] += cnt;
        const auto it = rc.find(gram);
        if (it != rc.end()) s.matches[n - 1] += std::min(cnt, it->second);
      }
    }
  }
  return s;
}

std::vector<double> bleu_n(const std::vector<TokenList>& candidates, const std::vector<TokenList>& references,
                           int max_n) {
  const auto s = bleu_stats(candidates, references, max_n);
  std::vector<double> out(max_n, 0.0);
  if (s.candidate_length == 0) return out;
  const double c = static_cast<double>(s.candidate_length);
  const double r = static_cast<double>(s.reference_length);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  double prod = 1.0;
  for (int n = 1; n <= max_n; ++n) {
    if (s.matches[n - 1] == 0 || s.totals[n - 1] == 0) break;  // this and higher orders stay 0
    const double m = static_cast<double>(s.matches[n - 1]), t = static_cast<double>(s.totals[n - 1]);
    prod *= m / t;
    out[n - 1] = n == 1 ? 100.0 * bp * m / t : 100.0 * bp * (n == 2 ? std::sqrt(prod) : std::pow(prod, 1.0 / n));
  }
  return out;
}

}  // namespace palot
