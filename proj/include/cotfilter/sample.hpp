#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include "cotfilter/common.hpp"

namespace cotfilter {

/// System line shared by the rollout template and the SFT export format.
inline constexpr std::string_view kSystemMessage =
    "You are a helpful AI assistant, who always ready to help user.";

/// One corpus record: a question, its gold answer, and a chain-of-thought
/// trace produced by some generator model.
struct Sample {
  std::string id;
  std::string question;
  std::string answer;
  std::string trace;
};

/// Disjoint output buckets a trace lands in after rollout evaluation.
enum class BucketKind { Reliable, Deferred, AllZero };

inline std::string_view to_string(BucketKind b) {
  switch (b) {
    case BucketKind::Reliable: return "reliable";
    case BucketKind::Deferred: return "deferred";
    case BucketKind::AllZero: return "all_zero";
  }
  throw std::logic_error("bad BucketKind");
}

inline BucketKind bucket_from_string(std::string_view s) {
  if (s == "reliable") return BucketKind::Reliable;
  if (s == "deferred") return BucketKind::Deferred;
  if (s == "all_zero") return BucketKind::AllZero;
  throw std::invalid_argument("unknown bucket name: " + std::string(s));
}

}  // namespace cotfilter
