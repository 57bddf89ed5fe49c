#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cotfilter/entropy.hpp"
#include "cotfilter/model_client.hpp"
#include "cotfilter/rollout_eval.hpp"
#include "cotfilter/sample.hpp"
#include "cotfilter/segmentation.hpp"
#include "cotfilter/verifier.hpp"

namespace cotfilter {

struct Classification {
  BucketKind kind = BucketKind::Deferred;
  std::optional<int> first_violation;  // 1-based, present iff Deferred
};

/// Least k (1-based) with â_k > â_{k+1}; absent when non-decreasing.
inline std::optional<int> first_violation(const std::vector<double>& accuracy) {
  for (std::size_t i = 0; i + 1 < accuracy.size(); ++i)
    if (accuracy[i] > accuracy[i + 1]) return static_cast<int>(i) + 1;
  return std::nullopt;
}

/// Three disjoint buckets. AllZero is carved out first: an all-zero vector
/// is non-decreasing, but those samples are a separate population (too hard
/// or broken) rather than evidence that every prefix helps. Flat profiles
/// are Reliable: the criterion is non-strict.
inline Classification classify(const std::vector<double>& accuracy) {
  if (accuracy.empty())
    throw std::invalid_argument("classify: empty accuracy profile");
  bool all_zero = true;
  for (double a : accuracy)
    if (a != 0.0) {
      all_zero = false;
      break;
    }
  if (all_zero) return {BucketKind::AllZero, std::nullopt};
  auto violation = first_violation(accuracy);
  if (!violation) return {BucketKind::Reliable, std::nullopt};
  return {BucketKind::Deferred, violation};
}

inline Classification classify(const AccuracyProfile& profile) {
  return classify(profile.accuracy);
}

// ---------------------------------------------------------------------------
// Repair of deferred samples
// ---------------------------------------------------------------------------

struct RepairAuditEntry {
  std::string parent_id;
  int k_star = 0;
  int attempt = 0;
  bool answer_correct = false;
  bool promoted = false;
};

/// Everything a repair candidate needs to re-enter the pipeline: the same
/// scorer and rollout backends and the same segmentation/rollout settings
/// the original sample went through.
struct RepairContext {
  Backend* scorer = nullptr;
  Backend* rollout = nullptr;
  int top_k = 0;
  int n_segments = 0;
  SplitStrategy strategy = SplitStrategy::EntropyGreedy;
  std::uint64_t seed = 0;
  int rollouts = 0;
};

struct RepairOutcome {
  bool promoted = false;
  int attempts = 0;
  int survivors = 0;  // candidates whose final answer was correct
  std::string repaired_trace;
  SegmentPlan plan;          // candidate's plan, set when promoted
  AccuracyProfile profile;   // candidate's profile, set when promoted
  std::vector<RepairAuditEntry> audit;
};

/// Keeps T_1..T_{k*} (the last prefix whose accuracy had not degraded),
/// regenerates the continuation with the stronger backend, discards
/// wrong-answer candidates, and re-runs each survivor through entropy ->
/// segmentation -> rollout -> classify. First Reliable candidate, in seed
/// order, wins. Candidates are evaluated under a derived sub-id so their
/// rollout seeds never collide with the parent's.
inline RepairOutcome repair_sample(const Sample& sample,
                                   const SegmentPlan& plan, int k_star,
                                   Backend& repair_backend, int candidates,
                                   const RepairContext& ctx) {
  if (k_star < 1 || k_star >= plan.n_effective)
    throw std::invalid_argument("repair_sample: k* out of range");
  if (candidates < 1)
    throw std::invalid_argument("repair_sample: candidate count must be >= 1");
  if (!ctx.scorer || !ctx.rollout)
    throw std::invalid_argument("repair_sample: missing pipeline backends");

  std::string prefix = sample.trace.substr(
      0, static_cast<std::size_t>(
             plan.split_char_offsets[static_cast<std::size_t>(k_star - 1)]));
  std::string prompt =
      flatten_messages(rollout_messages(sample.question, prefix));
  CanonicalAnswer gold = normalize_answer(sample.answer);

  RepairOutcome outcome;
  for (int attempt = 0; attempt < candidates; ++attempt) {
    ++outcome.attempts;
    std::uint64_t seed =
        derive_seed(sample.id, "repair", static_cast<std::uint64_t>(k_star),
                    static_cast<std::uint64_t>(attempt));
    Generation gen = repair_backend.generate(
        prompt, repair_backend.config().generation, seed);
    bool answer_correct = completion_correct(gen.text, gold);
    outcome.audit.push_back(
        {sample.id, k_star, attempt, answer_correct, false});
    if (!answer_correct) continue;
    ++outcome.survivors;

    Sample candidate{sample.id + "#repair" + std::to_string(attempt),
                     sample.question, sample.answer, prefix + gen.text};
    try {
      EntropyProfile eprofile = entropy_profile(candidate, *ctx.scorer);
      SegmentPlan cplan = segment_trace(eprofile, ctx.top_k, ctx.n_segments,
                                        ctx.strategy, ctx.seed);
      AccuracyProfile aprofile =
          evaluate_sample(candidate, cplan, ctx.rollouts, *ctx.rollout);
      if (classify(aprofile).kind != BucketKind::Reliable) continue;
      outcome.promoted = true;
      outcome.repaired_trace = candidate.trace;
      outcome.plan = std::move(cplan);
      outcome.profile = std::move(aprofile);
      outcome.audit.back().promoted = true;
      break;
    } catch (const UnsegmentableError&) {
      continue;  // candidate cannot be prefix-evaluated; reject it
    }
  }
  return outcome;
}

struct PreferencePair {
  std::string prompt;
  std::string chosen;
  std::string rejected;
  std::string parent_id;
};

/// Pairs a promoted repair with its deferred original. A repair that
/// reproduced the original trace byte-for-byte carries no preference
/// signal, so it is suppressed.
inline std::optional<PreferencePair> make_dpo_pair(
    const Sample& original, const std::string& repaired_trace) {
  if (repaired_trace == original.trace) return std::nullopt;
  return PreferencePair{original.question, repaired_trace, original.trace,
                        original.id};
}

}  // namespace cotfilter
