#pragma once

// Hand-sized six-sample corpus plus a fully scripted backend, including the
// repair path. Geometry, hand-derived:
//   trace = 30 single-char tokens, entropy spikes at {2,4,6,8,9,12}
//   regions [0,10) [10,20) [20,30) -> anchor counts r = (5,1,0)
//   N=3 -> allocation (3,0,0) -> splits {2,9} -> prefixes "ab", "abcdefghi"
// Accuracy profiles (correct counts of 8):
//   s1 (2,6) reliable   s2 (4,4) reliable-flat  s3 (0,1) reliable
//   s4 (0,0) all_zero   s5 (6,2) deferred k*=1  s6 (4,2) deferred k*=1
// Repair (2 candidates): s5 attempt 0 wrong, attempt 1 correct and its
// 39-char candidate re-evaluates to (4,8) -> promoted; s6 both wrong.

#include <atomic>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <utility>
#include <vector>

#include "cotfilter/config.hpp"
#include "cotfilter/model_client.hpp"
#include "cotfilter/rollout_eval.hpp"
#include "cotfilter/sample.hpp"

namespace fixture {

inline const std::string kQuestion = "What is 3+4?";
inline const std::string kAnswer = "7";
inline const std::string kTrace = "abcdefghijklmnopqrstuvwxyz0123";
inline const std::vector<int> kSpikes = {2, 4, 6, 8, 9, 12};
inline const std::vector<std::string> kIds = {"s1", "s2", "s3",
                                              "s4", "s5", "s6"};

// Correct-rollout counts per sample for prefixes k=1 and k=2.
inline const std::vector<std::pair<int, int>> kCorrectCounts = {
    {2, 6}, {4, 4}, {0, 1}, {0, 0}, {6, 2}, {4, 2}};

inline const std::string kRepairContinuation =
    "cdefghijklmnopqrstuvwxyz0123\\boxed{7}";
inline const std::string kRepairedTrace = "ab" + kRepairContinuation;

inline const std::string kCorrectResponse = " so the answer is \\boxed{7}.";
inline const std::string kWrongBoxed = " so the answer is \\boxed{999}.";
inline const std::string kWrongUnboxed = " and no conclusion was reached.";

inline std::string wrong_response(std::uint64_t r) {
  return r % 2 == 0 ? kWrongBoxed : kWrongUnboxed;
}

/// Single-char tokens; spike positions get a uniform 5-way top list
/// (entropy ln 5), everything else is one-hot (entropy 0).
inline cotfilter::ScoringResult scored_tokens(const std::string& trace,
                                              const std::vector<int>& spikes) {
  cotfilter::ScoringResult out;
  const double ln_fifth = std::log(0.2);
  for (std::size_t i = 0; i < trace.size(); ++i) {
    cotfilter::TokenLogprobTopM rec;
    rec.token_text = trace.substr(i, 1);
    rec.position = static_cast<int>(i);
    bool spike = false;
    for (int s : spikes)
      if (s == static_cast<int>(i)) spike = true;
    if (spike) {
      for (int v = 0; v < 5; ++v)
        rec.top.emplace_back(std::string(1, static_cast<char>('A' + v)),
                             ln_fifth);
    } else {
      rec.top.emplace_back(rec.token_text, 0.0);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::string prefix_prompt(const std::string& prefix) {
  return cotfilter::flatten_messages(
      cotfilter::rollout_messages(kQuestion, prefix));
}

inline void add_rollouts(cotfilter::MockScript& script, const std::string& id,
                         const std::string& prompt, int k, int correct,
                         int rollouts = 8) {
  for (int r = 0; r < rollouts; ++r) {
    auto seed = cotfilter::derive_seed(id, "rollout",
                                       static_cast<std::uint64_t>(k),
                                       static_cast<std::uint64_t>(r));
    script.add_generation(prompt, seed,
                          r < correct ? kCorrectResponse
                                      : wrong_response(static_cast<std::uint64_t>(r)));
  }
}

inline cotfilter::MockScript build_script() {
  cotfilter::MockScript script;
  script.add_scoring(kQuestion, kTrace, scored_tokens(kTrace, kSpikes));
  script.add_scoring(kQuestion, kRepairedTrace,
                     scored_tokens(kRepairedTrace, kSpikes));

  const std::string p1 = prefix_prompt("ab");
  const std::string p2 = prefix_prompt("abcdefghi");
  for (std::size_t i = 0; i < kIds.size(); ++i) {
    add_rollouts(script, kIds[i], p1, 1, kCorrectCounts[i].first);
    add_rollouts(script, kIds[i], p2, 2, kCorrectCounts[i].second);
  }

  // Repair generations share the k*=1 prefix prompt but use the repair
  // seed stream.
  auto repair_seed = [](const std::string& id, int attempt) {
    return cotfilter::derive_seed(id, "repair", 1,
                                  static_cast<std::uint64_t>(attempt));
  };
  script.add_generation(p1, repair_seed("s5", 0), kWrongBoxed);
  script.add_generation(p1, repair_seed("s5", 1), kRepairContinuation);
  script.add_generation(p1, repair_seed("s6", 0), kWrongBoxed);
  script.add_generation(p1, repair_seed("s6", 1), kWrongUnboxed);

  // The promoted candidate re-enters rollout under its sub-id. Its trace is
  // 39 chars; regions [0,13) [13,26) [26,39) put every spike in region 0,
  // so splits are {2,12} and the prefixes are chars [0,2) and [0,12).
  const std::string c2 = prefix_prompt(kRepairedTrace.substr(0, 12));
  add_rollouts(script, "s5#repair1", p1, 1, 4);
  add_rollouts(script, "s5#repair1", c2, 2, 8);

  // Seed-collision tripwire: every entry above must be distinct.
  std::size_t total = 0;
  for (const auto& [key, by_seed] : script.generation) total += by_seed.size();
  assert(total == 6 * 16 + 4 + 16);
  return script;
}

inline void write_corpus(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  for (const auto& id : kIds) {
    nlohmann::ordered_json j;
    j["id"] = id;
    j["question"] = kQuestion;
    j["answer"] = kAnswer;
    j["trace"] = kTrace;
    out << j.dump() << '\n';
  }
}

/// Corpus + script on disk under `dir`, returning a ready config.
inline cotfilter::PipelineConfig make_config(const std::filesystem::path& dir,
                                             bool repair_enabled) {
  std::filesystem::create_directories(dir);
  auto corpus = dir / "corpus.jsonl";
  auto script_path = dir / "mock_script.json";
  write_corpus(corpus);
  build_script().save_file(script_path.string());

  cotfilter::PipelineConfig cfg;
  cfg.input_path = corpus.string();
  cfg.output_dir = (dir / "out").string();
  cfg.top_k = 6;
  cfg.n_segments = 3;
  cfg.rollouts = 8;
  cfg.strategy = cotfilter::SplitStrategy::EntropyGreedy;
  cfg.seed = 1234;
  cfg.repair.enabled = repair_enabled;
  cfg.repair.candidates = 2;
  cfg.mock_script = script_path.string();
  return cfg;
}

/// Fresh scratch directory under the system temp root.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             ("cotfilter-" + tag + "-" + std::to_string(::getpid()) + "-" +
              std::to_string(counter.fetch_add(1)));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixture
