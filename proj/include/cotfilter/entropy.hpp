#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cotfilter/common.hpp"
#include "cotfilter/sample.hpp"

namespace cotfilter {

/// Top-m logprob record for one realized token, as delivered by a scoring
/// backend. Logprobs are natural-log units, each ≤ 0.
struct TokenLogprobTopM {
  std::string token_text;
  int position = 0;
  std::vector<std::pair<std::string, double>> top;
};

using ScoringResult = std::vector<TokenLogprobTopM>;

struct TokenEntropy {
  int position = 0;
  std::string token;
  double entropy = 0.0;
};

/// Per-token entropies for one trace. Token texts concatenate back to the
/// trace exactly; positions are 0..L-1.
struct EntropyProfile {
  std::string sample_id;
  std::vector<TokenEntropy> tokens;

  int length() const { return static_cast<int>(tokens.size()); }
};

/// The K' highest-entropy positions, ascending. K' < K when fewer than K
/// positions are eligible (position 0 never is).
struct HighEntropySet {
  std::vector<int> indices;
  int requested_k = 0;
  int effective_k = 0;
};

inline constexpr double kProbSumTolerance = 1e-6;
inline constexpr double kResidualFloor = 1e-12;

/// Shannon entropy in nats over the top-m outcomes plus one residual
/// pseudo-outcome carrying mass 1 - Σp (never renormalized).
inline double token_entropy(const TokenLogprobTopM& record) {
  if (record.top.empty())
    throw std::invalid_argument("token_entropy: empty top-logprob list");
  double sum_p = 0.0;
  double h = 0.0;
  for (const auto& [tok, logprob] : record.top) {
    double p = std::exp(logprob);
    sum_p += p;
    if (p > 0.0) h -= p * logprob;
  }
  if (sum_p > 1.0 + kProbSumTolerance)
    throw std::invalid_argument(
        "token_entropy: probabilities sum beyond 1 at position " +
        std::to_string(record.position));
  double residual = 1.0 - sum_p;
  if (residual > kResidualFloor) h -= residual * std::log(residual);
  return h < 0.0 ? 0.0 : h;
}

/// Profile from a raw scoring result. Enforces the reconstruction
/// invariant: token texts must concatenate to `trace` byte-exactly.
inline EntropyProfile profile_from_scoring(const std::string& sample_id,
                                           const std::string& trace,
                                           const ScoringResult& scored) {
  std::size_t total = 0;
  for (const auto& rec : scored) total += rec.token_text.size();
  bool match = total == trace.size();
  if (match) {
    std::size_t at = 0;
    for (const auto& rec : scored) {
      if (trace.compare(at, rec.token_text.size(), rec.token_text) != 0) {
        match = false;
        break;
      }
      at += rec.token_text.size();
    }
  }
  if (!match)
    throw ReconstructionError("sample " + sample_id +
                              ": scored tokens do not reconstruct the trace");
  EntropyProfile profile;
  profile.sample_id = sample_id;
  profile.tokens.reserve(scored.size());
  int pos = 0;
  for (const auto& rec : scored) {
    profile.tokens.push_back({pos, rec.token_text, token_entropy(rec)});
    ++pos;
  }
  return profile;
}

/// Scores a sample's trace through any backend exposing
/// score_tokens(question, trace) -> ScoringResult and derives the profile.
/// Backend failures are rethrown tagged with the sample id.
template <typename ScoringBackend>
EntropyProfile entropy_profile(const Sample& sample, ScoringBackend& backend) {
  ScoringResult scored;
  try {
    scored = backend.score_tokens(sample.question, sample.trace);
  } catch (const BackendError& e) {
    throw BackendError("sample " + sample.id + ": " + e.what());
  }
  return profile_from_scoring(sample.id, sample.trace, scored);
}

/// K highest-entropy positions among indices 1..L-1 (a split at 0 would
/// make an empty first segment). Ties go to the lower index.
inline HighEntropySet top_k_positions(const EntropyProfile& profile, int k) {
  if (k < 1) throw std::invalid_argument("top_k_positions: K must be >= 1");
  const int L = profile.length();
  if (L < 2)
    throw std::invalid_argument("top_k_positions: trace shorter than 2 tokens");
  std::vector<int> order(static_cast<std::size_t>(L - 1));
  std::iota(order.begin(), order.end(), 1);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return profile.tokens[static_cast<std::size_t>(a)].entropy >
           profile.tokens[static_cast<std::size_t>(b)].entropy;
  });
  HighEntropySet out;
  out.requested_k = k;
  out.effective_k = std::min<int>(k, L - 1);
  out.indices.assign(order.begin(), order.begin() + out.effective_k);
  std::sort(out.indices.begin(), out.indices.end());
  return out;
}

}  // namespace cotfilter
