#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "cotfilter/classifier.hpp"
#include "cotfilter/config.hpp"
#include "cotfilter/dataset_io.hpp"
#include "cotfilter/entropy.hpp"
#include "cotfilter/model_client.hpp"
#include "cotfilter/rollout_eval.hpp"
#include "cotfilter/sample.hpp"
#include "cotfilter/segmentation.hpp"

namespace cotfilter {

// ---------------------------------------------------------------------------
// Worker plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

  bool push(T item) {
    std::unique_lock lock(mu_);
    cv_push_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    cv_pop_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    cv_pop_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    cv_push_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_push_.notify_all();
    cv_pop_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::deque<T> items_;
  bool closed_ = false;
  std::mutex mu_;
  std::condition_variable cv_push_;
  std::condition_variable cv_pop_;
};

/// Fixed worker pool over a bounded queue. Fail-soft handling belongs
/// inside the worker function; any exception escaping it aborts the pool
/// and is rethrown from finish().
template <typename Item>
class WorkerPool {
 public:
  WorkerPool(int workers, std::function<void(Item&)> fn)
      : queue_(static_cast<std::size_t>(workers) * 2 + 1), fn_(std::move(fn)) {
    for (int w = 0; w < workers; ++w)
      threads_.emplace_back([this] { run(); });
  }

  ~WorkerPool() {
    queue_.close();
    join();
  }

  /// False when a worker already failed: the producer should stop early.
  bool push(Item item) { return queue_.push(std::move(item)); }

  void finish() {
    queue_.close();
    join();
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void run() {
    while (auto item = queue_.pop()) {
      try {
        fn_(*item);
      } catch (...) {
        {
          std::lock_guard lock(error_mu_);
          if (!error_) error_ = std::current_exception();
        }
        queue_.close();
        return;
      }
    }
  }

  void join() {
    for (auto& t : threads_)
      if (t.joinable()) t.join();
  }

  BoundedQueue<Item> queue_;
  std::function<void(Item&)> fn_;
  std::vector<std::thread> threads_;
  std::mutex error_mu_;
  std::exception_ptr error_;
};

/// Serializes out-of-order worker results back into input order. The
/// on-drained callback fires only after a line is physically written, so
/// state markers never run ahead of the artifact file.
class OrderedAppender {
 public:
  using Drained = std::function<void(const std::string& id)>;

  OrderedAppender(const std::filesystem::path& path, bool truncate,
                  Drained on_drained)
      : on_drained_(std::move(on_drained)) {
    if (path.has_parent_path())
      std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::binary |
                        (truncate ? std::ios::trunc : std::ios::app));
    if (!out_) throw IoError("cannot open artifact file: " + path.string());
  }

  void put(std::size_t slot, std::string id, std::optional<std::string> line) {
    std::lock_guard lock(mu_);
    pending_.emplace(slot, Entry{std::move(id), std::move(line)});
    while (true) {
      auto it = pending_.find(next_);
      if (it == pending_.end()) break;
      if (it->second.line) {
        out_ << *it->second.line << '\n';
        out_.flush();
      }
      std::string done_id = std::move(it->second.id);
      pending_.erase(it);
      ++next_;
      if (on_drained_) on_drained_(done_id);
    }
  }

 private:
  struct Entry {
    std::string id;
    std::optional<std::string> line;
  };
  std::ofstream out_;
  std::map<std::size_t, Entry> pending_;
  std::size_t next_ = 0;
  std::mutex mu_;
  Drained on_drained_;
};

inline void for_each_jsonl(const std::filesystem::path& path,
                           const std::function<void(nlohmann::json&)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open artifact file: " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(path.string() + ":" + std::to_string(line_no) +
                            ": corrupt artifact line: " + e.what());
    }
    fn(j);
  }
}

/// Random access into a JSON Lines artifact by "id", last occurrence wins
/// (a resumed stage may have rewritten a sample's line). Only offsets stay
/// in memory.
class JsonlOffsetIndex {
 public:
  explicit JsonlOffsetIndex(const std::filesystem::path& path)
      : in_(path, std::ios::binary), path_(path.string()) {
    if (!in_) throw IoError("cannot open artifact file: " + path_);
    std::string line;
    std::streamoff offset = 0;
    while (std::getline(in_, line)) {
      auto next_offset = static_cast<std::streamoff>(in_.tellg());
      if (!line.empty()) {
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(line);
          offsets_[j.at("id").get<std::string>()] = offset;
        } catch (const nlohmann::json::exception& e) {
          throw CheckpointError(path_ + ": corrupt artifact line: " + e.what());
        }
      }
      if (next_offset < 0) break;  // final line without trailing newline
      offset = next_offset;
    }
    in_.clear();
  }

  nlohmann::json get(const std::string& id) {
    auto it = offsets_.find(id);
    if (it == offsets_.end())
      throw CheckpointError(path_ + ": no artifact line for sample " + id);
    in_.clear();
    in_.seekg(it->second);
    std::string line;
    if (!std::getline(in_, line))
      throw CheckpointError(path_ + ": cannot reread line for sample " + id);
    return nlohmann::json::parse(line);
  }

  bool contains(const std::string& id) const { return offsets_.count(id) > 0; }

 private:
  std::ifstream in_;
  std::string path_;
  std::unordered_map<std::string, std::streamoff> offsets_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct RunReport {
  std::uint64_t input_lines = 0;
  std::uint64_t ingested = 0;
  std::uint64_t malformed_skipped = 0;
  std::array<std::uint64_t, 3> bucket_counts{};  // indexed by BucketKind
  double retention = 0.0;
  std::vector<std::uint64_t> entropy_histogram;
  std::uint64_t rollout_calls = 0;
  std::uint64_t repair_attempts = 0;
  std::uint64_t repair_promotions = 0;
  std::uint64_t sft_records = 0;
  std::uint64_t preference_pairs = 0;
  std::uint64_t failed_samples = 0;
  bool partial = false;
  std::map<std::string, double> stage_completion;  // fraction of samples
  std::map<std::string, double> stage_seconds;
  std::string config_digest;

  std::uint64_t count(BucketKind kind) const {
    return bucket_counts[static_cast<std::size_t>(kind)];
  }

  nlohmann::json to_json() const {
    return nlohmann::json{
        {"input_lines", input_lines},
        {"ingested", ingested},
        {"malformed_skipped", malformed_skipped},
        {"buckets",
         {{"reliable", count(BucketKind::Reliable)},
          {"deferred", count(BucketKind::Deferred)},
          {"all_zero", count(BucketKind::AllZero)}}},
        {"retention", retention},
        {"entropy_histogram", entropy_histogram},
        {"rollout_calls", rollout_calls},
        {"repair", {{"attempts", repair_attempts}, {"promotions", repair_promotions}}},
        {"sft_records", sft_records},
        {"preference_pairs", preference_pairs},
        {"failed_samples", failed_samples},
        {"partial", partial},
        {"stage_completion", stage_completion},
        {"stage_seconds", stage_seconds},
        {"config_digest", config_digest}};
  }

  std::string render() const {
    auto line = [](std::string key, std::string value) {
      key.resize(22, ' ');
      return "  " + key + value + "\n";
    };
    std::string out;
    out += "pipeline report";
    out += partial ? "  [PARTIAL]\n" : "\n";
    out += line("input lines", std::to_string(input_lines));
    out += line("ingested", std::to_string(ingested));
    out += line("malformed skipped", std::to_string(malformed_skipped));
    out += line("reliable", std::to_string(count(BucketKind::Reliable)));
    out += line("deferred", std::to_string(count(BucketKind::Deferred)));
    out += line("all_zero", std::to_string(count(BucketKind::AllZero)));
    out += line("failed", std::to_string(failed_samples));
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", retention);
    out += line("retention", buf);
    out += line("rollout calls", std::to_string(rollout_calls));
    out += line("repair attempts", std::to_string(repair_attempts));
    out += line("repair promotions", std::to_string(repair_promotions));
    out += line("sft records", std::to_string(sft_records));
    out += line("preference pairs", std::to_string(preference_pairs));
    if (partial) {
      out += "  stage completion:\n";
      for (const auto& [stage, frac] : stage_completion) {
        std::snprintf(buf, sizeof buf, "%5.1f%%", frac * 100.0);
        out += line("    " + stage, buf);
      }
    }
    return out;
  }
};

/// Report assembled from a pipeline state plus the artifact files next to it.
inline RunReport report_from_state(const PipelineState& state,
                                   const std::filesystem::path& out_dir) {
  auto stage_done = [&](std::string_view name) {
    auto it = state.stage_complete.find(std::string(name));
    return it != state.stage_complete.end() && it->second;
  };
  auto count_lines = [](const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::uint64_t count = 0;
    std::string line;
    while (in && std::getline(in, line))
      if (!line.empty()) ++count;
    return count;
  };
  static constexpr std::array<std::pair<Stage, std::string_view>, 7> kStages{
      {{Stage::Ingested, "ingest"},
       {Stage::EntropyDone, "entropy"},
       {Stage::Segmented, "segment"},
       {Stage::RolledOut, "rollout"},
       {Stage::Classified, "classify"},
       {Stage::Repaired, "repair"},
       {Stage::Exported, "export"}}};

  RunReport report;
  report.config_digest = state.config_digest;
  report.input_lines = state.input_lines;
  report.ingested = state.sample_order.size();
  report.malformed_skipped = state.malformed_skipped;
  report.entropy_histogram = state.entropy_histogram;
  report.rollout_calls = state.rollout_calls;
  report.repair_attempts = state.repair_attempts;
  report.repair_promotions = state.repair_promotions;
  report.stage_seconds = state.stage_seconds;

  for (const auto& [id, s] : state.samples) {
    if (s.failure) ++report.failed_samples;
    if (s.bucket && s.stage >= Stage::Classified)
      ++report.bucket_counts[static_cast<std::size_t>(*s.bucket)];
  }
  report.retention =
      report.ingested == 0
          ? 0.0
          : static_cast<double>(report.count(BucketKind::Reliable)) /
                static_cast<double>(report.ingested);

  for (const auto& [marker, name] : kStages) {
    if (report.ingested == 0) {
      report.stage_completion[std::string(name)] = stage_done(name) ? 1.0 : 0.0;
      continue;
    }
    std::uint64_t reached = 0;
    for (const auto& [id, s] : state.samples)
      if (s.stage >= marker) ++reached;
    report.stage_completion[std::string(name)] =
        static_cast<double>(reached) / static_cast<double>(report.ingested);
  }

  report.sft_records = count_lines(out_dir / "sft.jsonl");
  report.preference_pairs = count_lines(out_dir / "preference_pairs.jsonl");

  report.partial = report.failed_samples > 0;
  for (const auto& [id, s] : state.samples)
    if (s.stage < Stage::Exported) report.partial = true;
  if (!stage_done("export")) report.partial = true;
  return report;
}

// ---------------------------------------------------------------------------
// Orchestrator
// ---------------------------------------------------------------------------

struct Backends {
  std::shared_ptr<Backend> scorer;
  std::shared_ptr<Backend> rollout;
  std::shared_ptr<Backend> repair;
};

/// Backends from config: every role scripted from one mock file when
/// mock_script is set, HTTP otherwise.
inline Backends make_backends(const PipelineConfig& cfg) {
  Backends b;
  if (!cfg.mock_script.empty()) {
    auto script = std::make_shared<const MockScript>(
        MockScript::load_file(cfg.mock_script));
    b.scorer = std::make_shared<ScriptedBackend>(cfg.scorer, script);
    b.rollout = std::make_shared<ScriptedBackend>(cfg.rollout, script);
    b.repair = std::make_shared<ScriptedBackend>(cfg.repair_backend, script);
  } else {
    b.scorer = std::make_shared<HttpBackend>(cfg.scorer);
    b.rollout = std::make_shared<HttpBackend>(cfg.rollout);
    b.repair = std::make_shared<HttpBackend>(cfg.repair_backend);
  }
  return b;
}

class Orchestrator {
 public:
  Orchestrator(PipelineConfig cfg, Backends backends)
      : cfg_(std::move(cfg)), backends_(std::move(backends)) {
    cfg_.validate();
    out_dir_ = cfg_.output_dir;
    std::filesystem::create_directories(out_dir_);
    auto state_path = out_dir_ / "state.json";
    if (std::filesystem::exists(state_path)) {
      state_ = load_checkpoint(state_path, cfg_.digest());
    } else {
      state_.config_digest = cfg_.digest();
    }
  }

  /// Executes every stage through `stop_after` (inclusive), resuming from
  /// the on-disk state. Per-sample failures are recorded and skipped unless
  /// fail_fast is set.
  RunReport run(Stage stop_after = Stage::Exported) {
    for (const auto& [marker, name] : stage_table()) {
      run_stage(marker, name);
      if (marker == stop_after) break;
    }
    return build_report();
  }

  /// Executes exactly one stage; its predecessor must already be complete.
  RunReport run_single(Stage stage) {
    const auto& table = stage_table();
    for (std::size_t i = 0; i < table.size(); ++i) {
      if (table[i].first != stage) continue;
      if (i > 0) {
        const auto& prev = table[i - 1];
        if (!stage_done(prev.second))
          throw std::invalid_argument(
              std::string("stage \"") + std::string(table[i].second) +
              "\" requires completed stage \"" + std::string(prev.second) +
              "\"; run it first or use the run command");
      }
      run_stage(stage, table[i].second);
      return build_report();
    }
    throw std::invalid_argument("unknown stage");
  }

  /// Report assembled from the current state and artifact files.
  RunReport build_report() const {
    std::lock_guard lock(state_mu_);
    return report_from_state(state_, out_dir_);
  }

  const PipelineState& state() const { return state_; }

 private:
  using StageTable = std::array<std::pair<Stage, std::string_view>, 7>;

  static const StageTable& stage_table() {
    static const StageTable table{{{Stage::Ingested, "ingest"},
                                   {Stage::EntropyDone, "entropy"},
                                   {Stage::Segmented, "segment"},
                                   {Stage::RolledOut, "rollout"},
                                   {Stage::Classified, "classify"},
                                   {Stage::Repaired, "repair"},
                                   {Stage::Exported, "export"}}};
    return table;
  }

  bool stage_done(std::string_view name) const {
    auto it = state_.stage_complete.find(std::string(name));
    return it != state_.stage_complete.end() && it->second;
  }

  void run_stage(Stage marker, std::string_view name) {
    if (stage_done(name)) return;
    auto started = std::chrono::steady_clock::now();
    switch (marker) {
      case Stage::Ingested: ingest_stage(); break;
      case Stage::EntropyDone: entropy_stage(); break;
      case Stage::Segmented: segment_stage(); break;
      case Stage::RolledOut: rollout_stage(); break;
      case Stage::Classified: classify_stage(); break;
      case Stage::Repaired: repair_stage(); break;
      case Stage::Exported: export_stage(); break;
      default: throw std::logic_error("bad stage");
    }
    double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
            .count();
    {
      std::lock_guard lock(state_mu_);
      state_.stage_seconds[std::string(name)] += elapsed;
      state_.stage_complete[std::string(name)] = true;
    }
    save_state();
  }

  // -- stage: ingest --------------------------------------------------------

  void ingest_stage() {
    // All-or-nothing: cheap positional I/O, so a partial ingest restarts.
    {
      std::lock_guard lock(state_mu_);
      state_.sample_order.clear();
      state_.samples.clear();
      state_.input_lines = 0;
      state_.malformed_skipped = 0;
    }
    SampleReader reader(cfg_.input_path, cfg_.strict_ingest);
    std::ofstream out(out_dir_ / "samples.jsonl",
                      std::ios::binary | std::ios::trunc);
    if (!out)
      throw IoError("cannot write " + (out_dir_ / "samples.jsonl").string());
    while (auto sample = reader.next()) {
      ojson j;
      j["id"] = sample->id;
      j["question"] = sample->question;
      j["answer"] = sample->answer;
      j["trace"] = sample->trace;
      out << j.dump() << '\n';
      std::lock_guard lock(state_mu_);
      state_.sample_order.push_back(sample->id);
      state_.samples[sample->id].stage = Stage::Ingested;
    }
    std::lock_guard lock(state_mu_);
    state_.input_lines = reader.lines_read();
    state_.malformed_skipped = reader.malformed_skipped();
  }

  // -- stage: entropy -------------------------------------------------------

  struct EntropyItem {
    std::size_t slot = 0;
    Sample sample;
  };

  void entropy_stage() {
    bool fresh = no_sample_reached(Stage::EntropyDone);
    detail::OrderedAppender appender(
        out_dir_ / "entropy.jsonl", fresh,
        [&](const std::string& id) { mark_done(id, Stage::EntropyDone); });

    detail::WorkerPool<EntropyItem> pool(
        cfg_.workers, [&](EntropyItem& item) {
          std::optional<std::string> line;
          try {
            EntropyProfile profile = entropy_profile(item.sample, *backends_.scorer);
            ojson j;
            j["id"] = profile.sample_id;
            ojson tokens = ojson::array();
            ojson values = ojson::array();
            std::array<std::uint64_t, kEntropyHistogramBins> bins{};
            for (const auto& tok : profile.tokens) {
              tokens.push_back(tok.token);
              values.push_back(tok.entropy);
              ++bins[histogram_bin(tok.entropy)];
            }
            j["tokens"] = std::move(tokens);
            j["entropy"] = std::move(values);
            line = j.dump();
            std::lock_guard lock(state_mu_);
            for (std::size_t b = 0; b < bins.size(); ++b)
              state_.entropy_histogram[b] += bins[b];
          } catch (const BackendError& e) {
            handle_sample_failure(item.sample.id, e.what());
          } catch (const ReconstructionError& e) {
            handle_sample_failure(item.sample.id, e.what());
          }
          appender.put(item.slot, item.sample.id, std::move(line));
        });

    stream_pending_samples(Stage::Ingested, [&](std::size_t slot, Sample sample) {
      return pool.push({slot, std::move(sample)});
    });
    pool.finish();
  }

  // -- stage: segment -------------------------------------------------------

  void segment_stage() {
    bool fresh = no_sample_reached(Stage::Segmented);
    detail::OrderedAppender appender(
        out_dir_ / "segments.jsonl", fresh,
        [&](const std::string& id) { mark_done(id, Stage::Segmented); });
    detail::JsonlOffsetIndex entropy_index(out_dir_ / "entropy.jsonl");

    std::size_t slot = 0;
    for (const auto& id : state_.sample_order) {
      {
        std::lock_guard lock(state_mu_);
        auto it = state_.samples.find(id);
        if (it == state_.samples.end() ||
            it->second.stage != Stage::EntropyDone)
          continue;
        it->second.failure.reset();
      }
      std::size_t my_slot = slot++;
      std::optional<std::string> line;
      try {
        auto ej = entropy_index.get(id);
        EntropyProfile profile;
        profile.sample_id = id;
        const auto& tokens = ej.at("tokens");
        const auto& values = ej.at("entropy");
        for (std::size_t i = 0; i < tokens.size(); ++i)
          profile.tokens.push_back({static_cast<int>(i),
                                    tokens.at(i).get<std::string>(),
                                    values.at(i).get<double>()});
        SegmentPlan plan =
            segment_trace(profile, cfg_.effective_top_k(), cfg_.n_segments,
                          cfg_.strategy, cfg_.seed);
        ojson j;
        j["id"] = id;
        j["strategy"] = to_string(plan.strategy);
        j["n_target"] = plan.n_target;
        j["n_effective"] = plan.n_effective;
        j["n_tokens"] = profile.length();
        j["split_positions"] = plan.split_positions;
        j["split_char_offsets"] = plan.split_char_offsets;
        j["warnings"] = plan.warnings;
        j["unsegmentable"] = false;
        line = j.dump();
      } catch (const UnsegmentableError& e) {
        ojson j;
        j["id"] = id;
        j["unsegmentable"] = true;
        j["reason"] = e.what();
        line = j.dump();
        std::lock_guard lock(state_mu_);
        state_.samples[id].unsegmentable = true;
      } catch (const std::exception& e) {
        handle_sample_failure(id, e.what());
      }
      appender.put(my_slot, id, std::move(line));
    }
  }

  // -- stage: rollout -------------------------------------------------------

  struct PlanLite {
    SplitStrategy strategy = SplitStrategy::EntropyGreedy;
    std::vector<int> split_positions;
    std::vector<int> split_char_offsets;
    int n_target = 0;
    int n_effective = 0;
    int n_tokens = 0;
    bool unsegmentable = false;
  };

  static SegmentPlan plan_from_lite(const std::string& id, const PlanLite& lite,
                                    const std::string& trace) {
    SegmentPlan plan;
    plan.sample_id = id;
    plan.strategy = lite.strategy;
    plan.split_positions = lite.split_positions;
    plan.split_char_offsets = lite.split_char_offsets;
    plan.n_target = lite.n_target;
    plan.n_effective = lite.n_effective;
    std::vector<int> tok_bounds{0};
    tok_bounds.insert(tok_bounds.end(), lite.split_positions.begin(),
                      lite.split_positions.end());
    tok_bounds.push_back(lite.n_tokens);
    std::vector<std::size_t> chr_bounds{0};
    for (int off : lite.split_char_offsets)
      chr_bounds.push_back(static_cast<std::size_t>(off));
    chr_bounds.push_back(trace.size());
    for (std::size_t i = 0; i + 1 < chr_bounds.size(); ++i) {
      Segment seg;
      seg.begin = tok_bounds[i];
      seg.end = tok_bounds[i + 1];
      seg.text = trace.substr(chr_bounds[i], chr_bounds[i + 1] - chr_bounds[i]);
      plan.segments.push_back(std::move(seg));
    }
    return plan;
  }

  std::unordered_map<std::string, PlanLite> load_plan_map() const {
    std::unordered_map<std::string, PlanLite> plans;
    detail::for_each_jsonl(out_dir_ / "segments.jsonl", [&](nlohmann::json& j) {
      PlanLite lite;
      auto id = j.at("id").get<std::string>();
      lite.unsegmentable = j.at("unsegmentable").get<bool>();
      if (!lite.unsegmentable) {
        lite.strategy = strategy_from_string(j.at("strategy").get<std::string>());
        lite.split_positions = j.at("split_positions").get<std::vector<int>>();
        lite.split_char_offsets =
            j.at("split_char_offsets").get<std::vector<int>>();
        lite.n_target = j.at("n_target").get<int>();
        lite.n_effective = j.at("n_effective").get<int>();
        lite.n_tokens = j.at("n_tokens").get<int>();
      }
      plans[id] = std::move(lite);
    });
    return plans;
  }

  struct RolloutItem {
    std::size_t slot = 0;
    Sample sample;
    PlanLite plan;
  };

  void rollout_stage() {
    bool fresh = no_sample_reached(Stage::RolledOut);
    detail::OrderedAppender appender(
        out_dir_ / "rollouts.jsonl", fresh,
        [&](const std::string& id) { mark_done(id, Stage::RolledOut); });
    auto plans = load_plan_map();

    detail::WorkerPool<RolloutItem> pool(cfg_.workers, [&](RolloutItem& item) {
      std::optional<std::string> line;
      if (item.plan.unsegmentable) {
        appender.put(item.slot, item.sample.id, std::nullopt);
        return;
      }
      try {
        SegmentPlan plan =
            plan_from_lite(item.sample.id, item.plan, item.sample.trace);
        AccuracyProfile profile =
            evaluate_sample(item.sample, plan, cfg_.rollouts, *backends_.rollout);
        ojson j;
        j["id"] = profile.sample_id;
        j["rollouts"] = profile.rollouts;
        j["accuracy"] = profile.accuracy;
        j["correct"] = profile.correct;
        line = j.dump();
        std::lock_guard lock(state_mu_);
        state_.rollout_calls +=
            static_cast<std::uint64_t>(plan.n_effective - 1) *
            static_cast<std::uint64_t>(cfg_.rollouts);
      } catch (const BackendError& e) {
        handle_sample_failure(item.sample.id, e.what());
      }
      appender.put(item.slot, item.sample.id, std::move(line));
    });

    stream_pending_samples(Stage::Segmented, [&](std::size_t slot, Sample sample) {
      auto it = plans.find(sample.id);
      if (it == plans.end())
        throw CheckpointError("segments.jsonl has no entry for sample " +
                              sample.id);
      return pool.push({slot, std::move(sample), it->second});
    });
    pool.finish();
  }

  // -- stage: classify ------------------------------------------------------

  struct ProfileLite {
    std::vector<double> accuracy;
    std::vector<int> correct;
    int rollouts = 0;
  };

  std::unordered_map<std::string, ProfileLite> load_profile_map() const {
    std::unordered_map<std::string, ProfileLite> profiles;
    auto path = out_dir_ / "rollouts.jsonl";
    if (!std::filesystem::exists(path)) return profiles;
    detail::for_each_jsonl(path, [&](nlohmann::json& j) {
      ProfileLite lite;
      lite.accuracy = j.at("accuracy").get<std::vector<double>>();
      lite.correct = j.at("correct").get<std::vector<int>>();
      lite.rollouts = j.at("rollouts").get<int>();
      profiles[j.at("id").get<std::string>()] = std::move(lite);
    });
    return profiles;
  }

  void classify_stage() { write_buckets(/*apply_repairs=*/false); }

  struct RepairLite {
    int k_star = 0;
    std::string repaired_trace;
    std::vector<double> accuracy;
    std::vector<int> split_positions;
  };

  std::unordered_map<std::string, RepairLite> load_repair_map() const {
    std::unordered_map<std::string, RepairLite> repairs;
    auto path = out_dir_ / "repair_results.jsonl";
    if (!std::filesystem::exists(path)) return repairs;
    detail::for_each_jsonl(path, [&](nlohmann::json& j) {
      RepairLite lite;
      lite.k_star = j.at("k_star").get<int>();
      lite.repaired_trace = j.at("repaired_trace").get<std::string>();
      lite.accuracy = j.at("accuracy").get<std::vector<double>>();
      lite.split_positions = j.at("split_positions").get<std::vector<int>>();
      repairs[j.at("id").get<std::string>()] = std::move(lite);
    });
    return repairs;
  }

  /// Streams samples.jsonl in input order and routes every classified
  /// sample into its bucket file. With apply_repairs set, promoted samples
  /// carry their repaired trace, profile, and splits instead.
  void write_buckets(bool apply_repairs) {
    auto plans = load_plan_map();
    auto profiles = load_profile_map();
    auto repairs =
        apply_repairs ? load_repair_map()
                      : std::unordered_map<std::string, RepairLite>{};
    BucketSink sink(out_dir_ / "buckets");
    Stage gate = apply_repairs ? Stage::Repaired : Stage::RolledOut;

    stream_samples_file([&](Sample sample) {
      auto st = sample_stage(sample.id);
      if (st < gate) return;
      BucketRecord rec;
      rec.sample = std::move(sample);
      const auto& id = rec.sample.id;
      if (auto rit = repairs.find(id); apply_repairs && rit != repairs.end()) {
        rec.sample.trace = rit->second.repaired_trace;
        rec.accuracy_profile = rit->second.accuracy;
        rec.split_positions = rit->second.split_positions;
        rec.classification = BucketKind::Reliable;
      } else {
        auto pit = plans.find(id);
        if (pit != plans.end() && pit->second.unsegmentable) {
          rec.classification = BucketKind::Deferred;
        } else {
          auto ait = profiles.find(id);
          if (ait == profiles.end())
            throw CheckpointError("rollouts.jsonl has no entry for sample " + id);
          rec.accuracy_profile = ait->second.accuracy;
          if (pit != plans.end()) rec.split_positions = pit->second.split_positions;
          Classification cls = classify(rec.accuracy_profile);
          rec.classification = cls.kind;
          rec.first_violation = cls.first_violation;
        }
      }
      sink.append(rec);
      std::lock_guard lock(state_mu_);
      auto& s = state_.samples[id];
      if (s.stage < Stage::Classified) s.stage = Stage::Classified;
      s.bucket = rec.classification;
      s.first_violation = rec.first_violation;
    });
    sink.close();
  }

  // -- stage: repair --------------------------------------------------------

  struct RepairItem {
    std::size_t slot = 0;
    Sample sample;
    PlanLite plan;
    int k_star = 0;
  };

  void repair_stage() {
    if (!cfg_.repair.enabled) {
      std::lock_guard lock(state_mu_);
      for (auto& [id, s] : state_.samples)
        if (s.stage == Stage::Classified) s.stage = Stage::Repaired;
      return;
    }

    bool fresh = no_sample_reached(Stage::Repaired);
    detail::OrderedAppender results(
        out_dir_ / "repair_results.jsonl", fresh, nullptr);
    detail::OrderedAppender audit(
        out_dir_ / "repair_audit.jsonl", fresh,
        [&](const std::string& id) { mark_done(id, Stage::Repaired); });
    auto plans = load_plan_map();

    RepairContext ctx;
    ctx.scorer = backends_.scorer.get();
    ctx.rollout = backends_.rollout.get();
    ctx.top_k = cfg_.effective_top_k();
    ctx.n_segments = cfg_.n_segments;
    ctx.strategy = cfg_.strategy;
    ctx.seed = cfg_.seed;
    ctx.rollouts = cfg_.rollouts;

    detail::WorkerPool<RepairItem> pool(cfg_.workers, [&](RepairItem& item) {
      std::optional<std::string> result_line;
      std::optional<std::string> audit_lines;
      try {
        SegmentPlan plan =
            plan_from_lite(item.sample.id, item.plan, item.sample.trace);
        RepairOutcome outcome =
            repair_sample(item.sample, plan, item.k_star, *backends_.repair,
                          cfg_.repair.candidates, ctx);
        std::string lines;
        for (const auto& entry : outcome.audit) {
          ojson j;
          j["parent_id"] = entry.parent_id;
          j["k_star"] = entry.k_star;
          j["attempt"] = entry.attempt;
          j["answer_correct"] = entry.answer_correct;
          j["promoted"] = entry.promoted;
          if (!lines.empty()) lines += '\n';
          lines += j.dump();
        }
        if (!lines.empty()) audit_lines = std::move(lines);
        if (outcome.promoted) {
          ojson j;
          j["id"] = item.sample.id;
          j["k_star"] = item.k_star;
          j["repaired_trace"] = outcome.repaired_trace;
          j["accuracy"] = outcome.profile.accuracy;
          j["correct"] = outcome.profile.correct;
          j["split_positions"] = outcome.plan.split_positions;
          j["split_char_offsets"] = outcome.plan.split_char_offsets;
          result_line = j.dump();
        }
        std::lock_guard lock(state_mu_);
        state_.repair_attempts += static_cast<std::uint64_t>(outcome.attempts);
        if (outcome.promoted) ++state_.repair_promotions;
      } catch (const BackendError& e) {
        handle_sample_failure(item.sample.id, e.what());
      }
      results.put(item.slot, item.sample.id, std::move(result_line));
      audit.put(item.slot, item.sample.id, std::move(audit_lines));
    });

    std::size_t slot = 0;
    bool aborted = false;
    stream_samples_file([&](Sample sample) {
      if (aborted) return;
      const auto& id = sample.id;
      std::optional<int> k_star;
      {
        std::lock_guard lock(state_mu_);
        auto& s = state_.samples[id];
        if (s.stage != Stage::Classified) return;
        if (s.bucket != BucketKind::Deferred || !s.first_violation) {
          s.stage = Stage::Repaired;  // nothing to repair
          return;
        }
        s.failure.reset();
        k_star = s.first_violation;
      }
      auto it = plans.find(id);
      if (it == plans.end() || it->second.unsegmentable) {
        std::lock_guard lock(state_mu_);
        state_.samples[id].stage = Stage::Repaired;
        return;
      }
      std::size_t my_slot = slot++;
      if (!pool.push({my_slot, std::move(sample), it->second, *k_star}))
        aborted = true;
    });
    pool.finish();

    write_buckets(/*apply_repairs=*/true);
  }

  // -- stage: export --------------------------------------------------------

  void export_stage() {
    std::ofstream sft(out_dir_ / "sft.jsonl", std::ios::binary | std::ios::trunc);
    if (!sft) throw IoError("cannot write " + (out_dir_ / "sft.jsonl").string());
    detail::for_each_jsonl(out_dir_ / "buckets" / "reliable.jsonl",
                           [&](nlohmann::json& j) {
                             BucketRecord rec = bucket_record_from_json(j);
                             sft << format_sft_record(rec.sample,
                                                      rec.classification)
                                        .dump()
                                 << '\n';
                           });

    auto repairs = load_repair_map();
    std::ofstream pairs(out_dir_ / "preference_pairs.jsonl",
                        std::ios::binary | std::ios::trunc);
    if (!pairs)
      throw IoError("cannot write " +
                    (out_dir_ / "preference_pairs.jsonl").string());
    if (!repairs.empty()) {
      stream_samples_file([&](Sample sample) {
        auto it = repairs.find(sample.id);
        if (it == repairs.end()) return;
        auto pair = make_dpo_pair(sample, it->second.repaired_trace);
        if (!pair) return;  // degenerate repair, no preference signal
        ojson j;
        j["prompt"] = pair->prompt;
        j["chosen"] = pair->chosen;
        j["rejected"] = pair->rejected;
        j["parent_id"] = pair->parent_id;
        pairs << j.dump() << '\n';
      });
    }
    pairs.close();
    sft.close();

    {
      std::lock_guard lock(state_mu_);
      for (auto& [id, s] : state_.samples)
        if (s.stage == Stage::Repaired) s.stage = Stage::Exported;
      // Marked complete here, not just in run_stage: the report written
      // below must describe the finished run, not a run mid-export.
      state_.stage_complete["export"] = true;
    }
    save_state();
    std::ofstream report_file(out_dir_ / "report.json",
                              std::ios::binary | std::ios::trunc);
    report_file << build_report().to_json().dump(1, ' ') << '\n';
  }

  // -- shared helpers -------------------------------------------------------

  static std::size_t histogram_bin(double entropy) {
    static const double kMax = std::log(6.0);
    if (entropy <= 0.0) return 0;
    auto bin = static_cast<std::size_t>(entropy / kMax *
                                        static_cast<double>(kEntropyHistogramBins));
    return bin >= kEntropyHistogramBins ? kEntropyHistogramBins - 1 : bin;
  }

  Stage sample_stage(const std::string& id) {
    std::lock_guard lock(state_mu_);
    auto it = state_.samples.find(id);
    return it == state_.samples.end() ? Stage::Pending : it->second.stage;
  }

  bool no_sample_reached(Stage marker) {
    std::lock_guard lock(state_mu_);
    for (const auto& [id, s] : state_.samples)
      if (s.stage >= marker) return false;
    return true;
  }

  /// Advances a sample marker after its artifact line is durable. A sample
  /// that failed mid-stage keeps its old marker so resume retries it.
  void mark_done(const std::string& id, Stage marker) {
    std::size_t done;
    {
      std::lock_guard lock(state_mu_);
      auto& s = state_.samples[id];
      if (!s.failure && s.stage < marker) s.stage = marker;
      done = ++done_since_save_;
    }
    if (done % kSaveEvery == 0) save_state();
  }

  void handle_sample_failure(const std::string& id, const std::string& why) {
    if (cfg_.fail_fast) throw BackendError("sample " + id + ": " + why);
    std::lock_guard lock(state_mu_);
    state_.samples[id].failure = why;
  }

  /// Streams samples.jsonl as Sample records in input order.
  void stream_samples_file(const std::function<void(Sample)>& fn) const {
    detail::for_each_jsonl(out_dir_ / "samples.jsonl", [&](nlohmann::json& j) {
      Sample sample;
      sample.id = j.at("id").get<std::string>();
      sample.question = j.at("question").get<std::string>();
      sample.answer = j.at("answer").get<std::string>();
      sample.trace = j.at("trace").get<std::string>();
      fn(std::move(sample));
    });
  }

  /// Streams samples whose marker equals `ready` (the stage's input state),
  /// clearing any stale failure so resume retries them. Slots are assigned
  /// in input order. The visitor returns false to stop early.
  void stream_pending_samples(
      Stage ready, const std::function<bool(std::size_t, Sample)>& fn) {
    std::size_t slot = 0;
    bool stopped = false;
    stream_samples_file([&](Sample sample) {
      if (stopped) return;
      {
        std::lock_guard lock(state_mu_);
        auto it = state_.samples.find(sample.id);
        if (it == state_.samples.end() || it->second.stage != ready) return;
        it->second.failure.reset();
      }
      if (!fn(slot++, std::move(sample))) stopped = true;
    });
  }

  void save_state() {
    std::lock_guard lock(save_mu_);
    PipelineState snapshot;
    {
      std::lock_guard state_lock(state_mu_);
      snapshot = state_;
    }
    save_checkpoint(snapshot, out_dir_ / "state.json");
  }

  static constexpr std::size_t kSaveEvery = 32;

  PipelineConfig cfg_;
  Backends backends_;
  std::filesystem::path out_dir_;
  PipelineState state_;
  mutable std::mutex state_mu_;
  std::mutex save_mu_;
  std::size_t done_since_save_ = 0;
};

/// One-call pipeline run with injectable backends (tests) or the
/// config-derived ones.
inline RunReport run_pipeline(const PipelineConfig& cfg, Backends backends,
                              Stage stop_after = Stage::Exported) {
  Orchestrator orchestrator(cfg, std::move(backends));
  return orchestrator.run(stop_after);
}

inline RunReport run_pipeline(const PipelineConfig& cfg,
                              Stage stop_after = Stage::Exported) {
  return run_pipeline(cfg, make_backends(cfg), stop_after);
}

/// Report for an existing output directory, rebuilt from its state file.
inline RunReport load_report(const PipelineConfig& cfg) {
  Orchestrator orchestrator(cfg, Backends{});
  return orchestrator.build_report();
}

}  // namespace cotfilter
