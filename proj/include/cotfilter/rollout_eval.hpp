#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "cotfilter/common.hpp"
#include "cotfilter/model_client.hpp"
#include "cotfilter/sample.hpp"
#include "cotfilter/segmentation.hpp"
#include "cotfilter/verifier.hpp"

namespace cotfilter {

inline constexpr std::string_view kBoxedInstruction =
    "Please reason step by step, and put your final answer within \\boxed{}.";

struct ChatMessage {
  std::string role;
  std::string content;
};

/// The rollout template: fixed system line, user turn = question plus the
/// boxed-answer instruction, assistant turn prefilled with the prefix so
/// the model continues mid-reasoning instead of restarting.
inline std::vector<ChatMessage> rollout_messages(const std::string& question,
                                                 const std::string& prefix) {
  return {
      {"system", std::string(kSystemMessage)},
      {"user", question + "\n" + std::string(kBoxedInstruction)},
      {"assistant", prefix},
  };
}

/// Completion-style flattening of the chat turns. No trailing newline: the
/// completion continues the assistant text directly.
inline std::string flatten_messages(const std::vector<ChatMessage>& messages) {
  std::string out;
  for (std::size_t i = 0; i < messages.size(); ++i) {
    if (i > 0) out += '\n';
    out += messages[i].role;
    out += ": ";
    out += messages[i].content;
  }
  return out;
}

struct PrefixPrompt {
  std::string sample_id;
  int k = 0;  // 1-based prefix length in segments
  std::string prompt;
};

/// Prompts P_k for k = 1..N_effective-1. The final segment never appears:
/// it would leak the answer.
inline std::vector<PrefixPrompt> build_prefix_prompts(
    const std::string& question, const SegmentPlan& plan) {
  if (plan.n_effective < 2)
    throw std::invalid_argument("build_prefix_prompts: plan has one segment");
  std::vector<PrefixPrompt> out;
  std::string prefix;
  for (int k = 1; k < plan.n_effective; ++k) {
    prefix += plan.segments[static_cast<std::size_t>(k - 1)].text;
    out.push_back({plan.sample_id, k,
                   flatten_messages(rollout_messages(question, prefix))});
  }
  return out;
}

struct PrefixAccuracy {
  double accuracy = 0.0;
  int correct = 0;
};

/// Monte-Carlo accuracy of one prefix: R generations under derived seeds,
/// each judged by boxed-answer extraction against the gold answer. A
/// completion without a boxed answer counts as wrong; the denominator is
/// always R.
inline PrefixAccuracy estimate_prefix_accuracy(const PrefixPrompt& prompt,
                                               const CanonicalAnswer& gold,
                                               int rollouts, Backend& backend) {
  if (rollouts < 1)
    throw std::invalid_argument("estimate_prefix_accuracy: R must be >= 1");
  int correct = 0;
  for (int r = 0; r < rollouts; ++r) {
    std::uint64_t seed = derive_seed(prompt.sample_id, "rollout",
                                     static_cast<std::uint64_t>(prompt.k),
                                     static_cast<std::uint64_t>(r));
    Generation gen =
        backend.generate(prompt.prompt, backend.config().generation, seed);
    if (completion_correct(gen.text, gold)) ++correct;
  }
  return {static_cast<double>(correct) / rollouts, correct};
}

/// (â_1 .. â_{N_eff-1}) plus raw correct counts. Length is always
/// N_effective - 1 ≥ 1.
struct AccuracyProfile {
  std::string sample_id;
  std::vector<double> accuracy;
  std::vector<int> correct;
  int rollouts = 0;
};

inline AccuracyProfile evaluate_sample(const Sample& sample,
                                       const SegmentPlan& plan, int rollouts,
                                       Backend& backend) {
  auto prompts = build_prefix_prompts(sample.question, plan);
  CanonicalAnswer gold = normalize_answer(sample.answer);
  AccuracyProfile profile;
  profile.sample_id = sample.id;
  profile.rollouts = rollouts;
  for (const auto& prompt : prompts) {
    auto acc = estimate_prefix_accuracy(prompt, gold, rollouts, backend);
    profile.accuracy.push_back(acc.accuracy);
    profile.correct.push_back(acc.correct);
  }
  return profile;
}

}  // namespace cotfilter
