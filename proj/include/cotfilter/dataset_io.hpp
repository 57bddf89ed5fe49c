#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "cotfilter/common.hpp"
#include "cotfilter/sample.hpp"

namespace cotfilter {

// Ordered JSON keeps record fields in a fixed, human-stable order so bucket
// files are byte-reproducible.
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Streaming corpus ingestion
// ---------------------------------------------------------------------------

/// Single-cursor JSON Lines reader. Holds one record in memory at a time;
/// only the id set (for duplicate detection) grows with the corpus.
class SampleReader {
 public:
  SampleReader(const std::string& path, bool strict)
      : path_(path), strict_(strict), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open corpus file: " + path);
  }

  /// Next sample in file order, or nullopt at end. Malformed lines abort in
  /// strict mode and are counted + skipped otherwise. Duplicate ids are
  /// fatal in both modes.
  std::optional<Sample> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++lines_read_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      Sample sample;
      try {
        sample = parse_line(line);
      } catch (const CorpusError&) {
        if (strict_) throw;
        ++malformed_skipped_;
        continue;
      }
      if (!seen_ids_.insert(sample.id).second)
        throw CorpusError(path_ + ":" + std::to_string(lines_read_) +
                          ": duplicate sample id \"" + sample.id + "\"");
      return sample;
    }
    return std::nullopt;
  }

  std::size_t malformed_skipped() const { return malformed_skipped_; }
  std::size_t lines_read() const { return lines_read_; }

  /// Bytes of the file consumed so far; stays far below file size while
  /// records are still pending, which is what the streaming test checks.
  std::uint64_t bytes_consumed() {
    auto pos = in_.tellg();
    return pos < 0 ? last_offset_ : last_offset_ = static_cast<std::uint64_t>(pos);
  }

 private:
  Sample parse_line(const std::string& line) {
    auto fail = [&](const std::string& why) -> CorpusError {
      return CorpusError(path_ + ":" + std::to_string(lines_read_) + ": " + why);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw fail("line is not valid JSON");
    }
    if (!j.is_object()) throw fail("line is not a JSON object");
    Sample sample;
    struct Field {
      const char* key;
      std::string Sample::* member;
    };
    static constexpr Field kFields[] = {{"id", &Sample::id},
                                        {"question", &Sample::question},
                                        {"answer", &Sample::answer},
                                        {"trace", &Sample::trace}};
    for (const auto& f : kFields) {
      if (!j.contains(f.key)) throw fail(std::string("missing key \"") + f.key + "\"");
      if (!j.at(f.key).is_string())
        throw fail(std::string("key \"") + f.key + "\" is not a string");
      sample.*(f.member) = j.at(f.key).get<std::string>();
    }
    if (sample.id.empty()) throw fail("empty id");
    if (sample.question.empty()) throw fail("empty question");
    if (sample.trace.empty()) throw fail("empty trace");
    return sample;
  }

  std::string path_;
  bool strict_;
  std::ifstream in_;
  std::set<std::string> seen_ids_;
  std::size_t lines_read_ = 0;
  std::size_t malformed_skipped_ = 0;
  std::uint64_t last_offset_ = 0;
};

/// Whole-file convenience wrapper over SampleReader.
inline std::vector<Sample> load_samples(const std::string& path, bool strict,
                                        std::size_t* malformed_skipped = nullptr) {
  SampleReader reader(path, strict);
  std::vector<Sample> out;
  while (auto sample = reader.next()) out.push_back(std::move(*sample));
  if (malformed_skipped) *malformed_skipped = reader.malformed_skipped();
  return out;
}

// ---------------------------------------------------------------------------
// Bucket persistence
// ---------------------------------------------------------------------------

/// One classified sample as persisted in a bucket file: the original record
/// plus its accuracy profile, split positions, and classification.
struct BucketRecord {
  Sample sample;
  std::vector<double> accuracy_profile;
  std::vector<int> split_positions;
  BucketKind classification = BucketKind::Deferred;
  std::optional<int> first_violation;
};

inline ojson bucket_record_to_json(const BucketRecord& rec) {
  ojson j;
  j["id"] = rec.sample.id;
  j["question"] = rec.sample.question;
  j["answer"] = rec.sample.answer;
  j["trace"] = rec.sample.trace;
  j["accuracy_profile"] = rec.accuracy_profile;
  j["split_positions"] = rec.split_positions;
  j["classification"] = to_string(rec.classification);
  if (rec.first_violation)
    j["first_violation"] = *rec.first_violation;
  else
    j["first_violation"] = nullptr;
  return j;
}

inline BucketRecord bucket_record_from_json(const nlohmann::json& j) {
  BucketRecord rec;
  rec.sample.id = j.at("id").get<std::string>();
  rec.sample.question = j.at("question").get<std::string>();
  rec.sample.answer = j.at("answer").get<std::string>();
  rec.sample.trace = j.at("trace").get<std::string>();
  rec.accuracy_profile = j.at("accuracy_profile").get<std::vector<double>>();
  rec.split_positions = j.at("split_positions").get<std::vector<int>>();
  rec.classification = bucket_from_string(j.at("classification").get<std::string>());
  if (j.contains("first_violation") && !j.at("first_violation").is_null())
    rec.first_violation = j.at("first_violation").get<int>();
  return rec;
}

/// Routes records into reliable/deferred/all_zero JSONL files under one
/// directory. Append order defines file order, so feed it in input order
/// for reproducible bytes. A sample may only ever land in one bucket.
class BucketSink {
 public:
  explicit BucketSink(const std::filesystem::path& dir) : dir_(dir) {
    std::filesystem::create_directories(dir);
    for (auto kind : {BucketKind::Reliable, BucketKind::Deferred,
                      BucketKind::AllZero}) {
      auto path = dir / (std::string(to_string(kind)) + ".jsonl");
      auto& out = file(kind);
      out.open(path, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot open bucket file: " + path.string());
    }
  }

  void append(const BucketRecord& rec) {
    std::lock_guard lock(mu_);
    auto [it, inserted] = written_.emplace(rec.sample.id, rec.classification);
    if (!inserted)
      throw CorpusError("sample \"" + rec.sample.id +
                        "\" already written to bucket " +
                        std::string(to_string(it->second)));
    file(rec.classification) << bucket_record_to_json(rec).dump() << '\n';
    ++counts_[index(rec.classification)];
  }

  std::size_t count(BucketKind kind) const { return counts_[index(kind)]; }

  void close() {
    for (auto& out : files_) out.close();
  }

 private:
  static std::size_t index(BucketKind kind) {
    return static_cast<std::size_t>(kind);
  }
  std::ofstream& file(BucketKind kind) { return files_[index(kind)]; }

  std::filesystem::path dir_;
  std::array<std::ofstream, 3> files_;
  std::array<std::size_t, 3> counts_{};
  std::map<std::string, BucketKind> written_;
  std::mutex mu_;
};

/// One-shot bucket write. All records must belong to `kind`; returns the
/// count written.
inline std::size_t write_bucket(const std::vector<BucketRecord>& records,
                                BucketKind kind,
                                const std::filesystem::path& path) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open bucket file: " + path.string());
  std::set<std::string> ids;
  for (const auto& rec : records) {
    if (rec.classification != kind)
      throw std::invalid_argument("record " + rec.sample.id +
                                  " does not belong to bucket " +
                                  std::string(to_string(kind)));
    if (!ids.insert(rec.sample.id).second)
      throw CorpusError("duplicate sample id in bucket write: " +
                        rec.sample.id);
    out << bucket_record_to_json(rec).dump() << '\n';
  }
  return records.size();
}

// ---------------------------------------------------------------------------
// Checkpoint state
// ---------------------------------------------------------------------------

enum class Stage {
  Pending = 0,
  Ingested,
  EntropyDone,
  Segmented,
  RolledOut,
  Classified,
  Repaired,
  Exported,
};

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Pending: return "pending";
    case Stage::Ingested: return "ingested";
    case Stage::EntropyDone: return "entropy-done";
    case Stage::Segmented: return "segmented";
    case Stage::RolledOut: return "rolled-out";
    case Stage::Classified: return "classified";
    case Stage::Repaired: return "repaired";
    case Stage::Exported: return "exported";
  }
  throw std::logic_error("bad Stage");
}

inline Stage stage_from_string(std::string_view s) {
  for (auto stage : {Stage::Pending, Stage::Ingested, Stage::EntropyDone,
                     Stage::Segmented, Stage::RolledOut, Stage::Classified,
                     Stage::Repaired, Stage::Exported})
    if (s == to_string(stage)) return stage;
  throw std::invalid_argument("unknown stage: " + std::string(s));
}

struct SampleState {
  Stage stage = Stage::Pending;
  std::optional<std::string> failure;  // failed samples are retried on resume
  bool unsegmentable = false;
  std::optional<BucketKind> bucket;
  std::optional<int> first_violation;

  bool operator==(const SampleState&) const = default;
};

inline constexpr std::size_t kEntropyHistogramBins = 12;

struct PipelineState {
  std::string config_digest;
  std::vector<std::string> sample_order;
  std::map<std::string, SampleState> samples;
  std::uint64_t input_lines = 0;
  std::uint64_t malformed_skipped = 0;
  std::vector<std::uint64_t> entropy_histogram =
      std::vector<std::uint64_t>(kEntropyHistogramBins, 0);
  std::uint64_t rollout_calls = 0;
  std::uint64_t repair_attempts = 0;
  std::uint64_t repair_promotions = 0;
  std::map<std::string, bool> stage_complete;
  std::map<std::string, double> stage_seconds;

  bool operator==(const PipelineState&) const = default;
};

inline nlohmann::json pipeline_state_to_json(const PipelineState& state) {
  nlohmann::json samples = nlohmann::json::object();
  for (const auto& [id, s] : state.samples) {
    nlohmann::json js{{"stage", to_string(s.stage)},
                      {"unsegmentable", s.unsegmentable}};
    js["failure"] = s.failure ? nlohmann::json(*s.failure) : nullptr;
    js["bucket"] = s.bucket ? nlohmann::json(to_string(*s.bucket)) : nullptr;
    js["first_violation"] =
        s.first_violation ? nlohmann::json(*s.first_violation) : nullptr;
    samples[id] = std::move(js);
  }
  return nlohmann::json{{"config_digest", state.config_digest},
                        {"sample_order", state.sample_order},
                        {"samples", std::move(samples)},
                        {"input_lines", state.input_lines},
                        {"malformed_skipped", state.malformed_skipped},
                        {"entropy_histogram", state.entropy_histogram},
                        {"rollout_calls", state.rollout_calls},
                        {"repair_attempts", state.repair_attempts},
                        {"repair_promotions", state.repair_promotions},
                        {"stage_complete", state.stage_complete},
                        {"stage_seconds", state.stage_seconds}};
}

inline PipelineState pipeline_state_from_json(const nlohmann::json& j) {
  PipelineState state;
  state.config_digest = j.at("config_digest").get<std::string>();
  state.sample_order = j.at("sample_order").get<std::vector<std::string>>();
  for (const auto& [id, js] : j.at("samples").items()) {
    SampleState s;
    s.stage = stage_from_string(js.at("stage").get<std::string>());
    s.unsegmentable = js.at("unsegmentable").get<bool>();
    if (!js.at("failure").is_null())
      s.failure = js.at("failure").get<std::string>();
    if (!js.at("bucket").is_null())
      s.bucket = bucket_from_string(js.at("bucket").get<std::string>());
    if (!js.at("first_violation").is_null())
      s.first_violation = js.at("first_violation").get<int>();
    state.samples[id] = std::move(s);
  }
  state.input_lines = j.at("input_lines").get<std::uint64_t>();
  state.malformed_skipped = j.at("malformed_skipped").get<std::uint64_t>();
  state.entropy_histogram =
      j.at("entropy_histogram").get<std::vector<std::uint64_t>>();
  state.rollout_calls = j.at("rollout_calls").get<std::uint64_t>();
  state.repair_attempts = j.at("repair_attempts").get<std::uint64_t>();
  state.repair_promotions = j.at("repair_promotions").get<std::uint64_t>();
  state.stage_complete =
      j.at("stage_complete").get<std::map<std::string, bool>>();
  state.stage_seconds =
      j.at("stage_seconds").get<std::map<std::string, double>>();
  return state;
}

/// Atomic checkpoint write: temp file in the same directory, then rename.
inline void save_checkpoint(const PipelineState& state,
                            const std::filesystem::path& path) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp.string());
    out << pipeline_state_to_json(state).dump(1, ' ') << '\n';
    if (!out) throw IoError("short write on checkpoint: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Loads a checkpoint. With `expected_config_digest` set, a state written
/// under any other configuration is rejected: resuming would silently mix
/// incompatible artifacts.
inline PipelineState load_checkpoint(
    const std::filesystem::path& path,
    const std::optional<std::string>& expected_config_digest = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": " +
                          e.what());
  }
  PipelineState state;
  try {
    state = pipeline_state_from_json(j);
  } catch (const std::exception& e) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": " +
                          e.what());
  }
  if (expected_config_digest && state.config_digest != *expected_config_digest)
    throw DigestMismatchError(
        "checkpoint " + path.string() + " was written under config digest " +
        state.config_digest + ", current config digest is " +
        *expected_config_digest);
  return state;
}

// ---------------------------------------------------------------------------
// Training-format export
// ---------------------------------------------------------------------------

/// Three-turn chat record for SFT export. Only Reliable samples qualify.
inline ojson format_sft_record(const Sample& sample, BucketKind bucket) {
  if (bucket != BucketKind::Reliable)
    throw std::invalid_argument("sample " + sample.id +
                                " is not in the reliable bucket");
  ojson messages = ojson::array();
  messages.push_back({{"role", "system"}, {"content", kSystemMessage}});
  messages.push_back({{"role", "user"}, {"content", sample.question}});
  messages.push_back({{"role", "assistant"}, {"content", sample.trace}});
  return ojson{{"messages", std::move(messages)}};
}

}  // namespace cotfilter
