#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "catch2/catch_amalgamated.hpp"

#include "cotfilter/dataset_io.hpp"
#include "support/fixture.hpp"

using namespace cotfilter;

namespace {

std::filesystem::path write_lines(const std::filesystem::path& dir,
                                  const char* name,
                                  const std::vector<std::string>& lines) {
  auto path = dir / name;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  for (const auto& l : lines) out << l << '\n';
  return path;
}

std::string sample_line(const std::string& id, const std::string& trace) {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["question"] = "Q?";
  j["answer"] = "7";
  j["trace"] = trace;
  return j.dump();
}

std::string file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

BucketRecord make_record(const std::string& id, BucketKind kind) {
  BucketRecord rec;
  rec.sample = {id, "Q?", "7", "trace " + id};
  rec.accuracy_profile = {0.125, 0.75};
  rec.split_positions = {2, 9};
  rec.classification = kind;
  if (kind == BucketKind::Deferred) rec.first_violation = 1;
  return rec;
}

}  // namespace

TEST_CASE("sample reader walks well-formed corpora") {
  auto dir = fixture::scratch_dir("reader");
  auto path = write_lines(dir, "corpus.jsonl",
                          {sample_line("a", "t1"), sample_line("b", "t2")});
  SampleReader reader(path.string(), true);
  auto first = reader.next();
  REQUIRE(first);
  CHECK(first->id == "a");
  CHECK(first->question == "Q?");
  CHECK(first->answer == "7");
  CHECK(first->trace == "t1");
  auto second = reader.next();
  REQUIRE(second);
  CHECK(second->id == "b");
  CHECK_FALSE(reader.next());
  CHECK(reader.lines_read() == 2);
  CHECK(reader.malformed_skipped() == 0);

  CHECK_THROWS_AS(SampleReader((dir / "absent.jsonl").string(), true), IoError);
}

TEST_CASE("sample reader strips CRLF line endings") {
  auto dir = fixture::scratch_dir("crlf");
  auto path = dir / "corpus.jsonl";
  {
    std::ofstream out(path, std::ios::binary);
    out << sample_line("a", "t1") << "\r\n" << sample_line("b", "t2") << "\r\n";
  }
  auto samples = load_samples(path.string(), true);
  REQUIRE(samples.size() == 2);
  CHECK(samples[1].trace == "t2");
}

TEST_CASE("malformed lines: strict aborts, lenient counts and skips") {
  auto dir = fixture::scratch_dir("malformed");
  std::vector<std::string> lines = {
      sample_line("a", "t1"),
      "{ not json",
      "[1,2,3]",
      R"({"id":"x","question":"Q?","answer":"7"})",
      R"({"id":"y","question":"Q?","answer":7,"trace":"t"})",
      R"({"id":"","question":"Q?","answer":"7","trace":"t"})",
      R"({"id":"z","question":"","answer":"7","trace":"t"})",
      R"({"id":"w","question":"Q?","answer":"7","trace":""})",
      sample_line("b", "t2"),
  };
  auto path = write_lines(dir, "corpus.jsonl", lines);

  std::size_t skipped = 0;
  auto samples = load_samples(path.string(), false, &skipped);
  REQUIRE(samples.size() == 2);
  CHECK(samples[0].id == "a");
  CHECK(samples[1].id == "b");
  CHECK(skipped == 7);

  // Strict mode reports the file and 1-based line of the first bad record.
  SampleReader strict(path.string(), true);
  strict.next();
  try {
    strict.next();
    FAIL("expected CorpusError");
  } catch (const CorpusError& e) {
    CHECK(std::string(e.what()).find(path.string() + ":2") !=
          std::string::npos);
  }

  // An empty answer is allowed: some corpora leave it blank.
  auto ok = write_lines(
      dir, "blank_answer.jsonl",
      {R"({"id":"a","question":"Q?","answer":"","trace":"t"})"});
  CHECK(load_samples(ok.string(), true).size() == 1);
}

TEST_CASE("duplicate sample ids are fatal in both modes") {
  auto dir = fixture::scratch_dir("dups");
  auto path = write_lines(dir, "corpus.jsonl",
                          {sample_line("a", "t1"), sample_line("a", "t2")});
  for (bool strict : {true, false}) {
    SampleReader reader(path.string(), strict);
    REQUIRE(reader.next());
    try {
      reader.next();
      FAIL("expected CorpusError");
    } catch (const CorpusError& e) {
      std::string msg = e.what();
      CHECK(msg.find(":2") != std::string::npos);
      CHECK(msg.find("duplicate") != std::string::npos);
    }
  }
}

TEST_CASE("sample reader streams instead of slurping") {
  auto dir = fixture::scratch_dir("stream");
  std::vector<std::string> lines;
  for (int i = 0; i < 2000; ++i)
    lines.push_back(sample_line("s" + std::to_string(i),
                                std::string(256, 'x')));
  auto path = write_lines(dir, "corpus.jsonl", lines);
  auto file_size = std::filesystem::file_size(path);

  SampleReader reader(path.string(), true);
  REQUIRE(reader.next());
  // One record in: the cursor must sit near the front of the file, not at
  // the end. Buffered readahead gets generous slack.
  CHECK(reader.bytes_consumed() < file_size / 4);
}

TEST_CASE("bucket records round-trip bit-exactly") {
  BucketRecord rec = make_record("s1", BucketKind::Deferred);
  rec.accuracy_profile = {0.1, 0x1.fffffffffffffp-1, 1.0 / 3.0};
  auto j = bucket_record_to_json(rec);
  auto back = bucket_record_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.sample.id == rec.sample.id);
  CHECK(back.sample.trace == rec.sample.trace);
  CHECK(back.accuracy_profile == rec.accuracy_profile);  // exact doubles
  CHECK(back.split_positions == rec.split_positions);
  CHECK(back.classification == rec.classification);
  CHECK(back.first_violation == rec.first_violation);

  auto reliable = make_record("s2", BucketKind::Reliable);
  auto j2 = bucket_record_to_json(reliable);
  CHECK(j2.at("first_violation").is_null());
  CHECK(j2.at("classification") == "reliable");
  // Field order is pinned for byte-stable files.
  auto keys = std::vector<std::string>();
  for (auto it = j2.begin(); it != j2.end(); ++it) keys.push_back(it.key());
  CHECK(keys == std::vector<std::string>{"id", "question", "answer", "trace",
                                         "accuracy_profile", "split_positions",
                                         "classification", "first_violation"});
}

TEST_CASE("bucket sink routes and refuses double writes") {
  auto dir = fixture::scratch_dir("sink");
  BucketSink sink(dir / "buckets");
  sink.append(make_record("r1", BucketKind::Reliable));
  sink.append(make_record("d1", BucketKind::Deferred));
  sink.append(make_record("r2", BucketKind::Reliable));
  CHECK_THROWS_AS(sink.append(make_record("r1", BucketKind::AllZero)),
                  CorpusError);
  CHECK(sink.count(BucketKind::Reliable) == 2);
  CHECK(sink.count(BucketKind::Deferred) == 1);
  CHECK(sink.count(BucketKind::AllZero) == 0);
  sink.close();

  auto reliable = file_bytes(dir / "buckets" / "reliable.jsonl");
  CHECK(reliable.find("\"r1\"") < reliable.find("\"r2\""));
  CHECK(file_bytes(dir / "buckets" / "all_zero.jsonl").empty());

  // Reopening truncates: stale rows from a previous run cannot survive.
  BucketSink fresh(dir / "buckets");
  fresh.close();
  CHECK(file_bytes(dir / "buckets" / "reliable.jsonl").empty());
}

TEST_CASE("write_bucket validates kind and duplicate ids") {
  auto dir = fixture::scratch_dir("wbucket");
  auto path = dir / "reliable.jsonl";
  std::vector<BucketRecord> records{make_record("a", BucketKind::Reliable),
                                    make_record("b", BucketKind::Reliable)};
  CHECK(write_bucket(records, BucketKind::Reliable, path) == 2);

  records.push_back(make_record("c", BucketKind::Deferred));
  CHECK_THROWS_AS(write_bucket(records, BucketKind::Reliable, path),
                  std::invalid_argument);
  records.pop_back();
  records.push_back(make_record("a", BucketKind::Reliable));
  CHECK_THROWS_AS(write_bucket(records, BucketKind::Reliable, path),
                  CorpusError);
}

TEST_CASE("checkpoints persist the full pipeline state") {
  auto dir = fixture::scratch_dir("ckpt");
  auto path = dir / "state.json";

  PipelineState state;
  state.config_digest = "abc123";
  state.sample_order = {"s1", "s2"};
  state.samples["s1"] = {Stage::RolledOut, std::nullopt, false,
                         BucketKind::Reliable, std::nullopt};
  state.samples["s2"] = {Stage::Segmented, "backend gave up", true,
                         std::nullopt, 2};
  state.input_lines = 9;
  state.malformed_skipped = 3;
  state.entropy_histogram[0] = 17;
  state.entropy_histogram[11] = 4;
  state.rollout_calls = 160;
  state.repair_attempts = 5;
  state.repair_promotions = 2;
  state.stage_complete = {{"ingest", true}, {"entropy", false}};
  state.stage_seconds = {{"ingest", 0.25}};

  save_checkpoint(state, path);
  CHECK_FALSE(std::filesystem::exists(dir / "state.json.tmp"));
  auto loaded = load_checkpoint(path, std::string("abc123"));
  CHECK(loaded == state);

  CHECK_THROWS_AS(load_checkpoint(path, std::string("other")),
                  DigestMismatchError);
  // A digest mismatch is still a CheckpointError for coarse handling.
  CHECK_THROWS_AS(load_checkpoint(path, std::string("other")),
                  CheckpointError);
  CHECK_NOTHROW(load_checkpoint(path));

  CHECK_THROWS_AS(load_checkpoint(dir / "absent.json"), IoError);
  {
    std::ofstream out(path, std::ios::trunc);
    out << "{corrupt";
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  {
    std::ofstream out(path, std::ios::trunc);
    out << R"({"config_digest": "abc123"})";
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}

TEST_CASE("stage names round-trip") {
  for (auto stage : {Stage::Pending, Stage::Ingested, Stage::EntropyDone,
                     Stage::Segmented, Stage::RolledOut, Stage::Classified,
                     Stage::Repaired, Stage::Exported})
    CHECK(stage_from_string(to_string(stage)) == stage);
  CHECK_THROWS_AS(stage_from_string("bogus"), std::invalid_argument);
}

TEST_CASE("sft records carry the exact chat template") {
  Sample sample{"s1", "What is 3+4?", "7", "the trace"};
  auto j = format_sft_record(sample, BucketKind::Reliable);
  auto expected = nlohmann::json::parse(R"({
    "messages": [
      {"role": "system",
       "content": "You are a helpful AI assistant, who always ready to help user."},
      {"role": "user", "content": "What is 3+4?"},
      {"role": "assistant", "content": "the trace"}
    ]
  })");
  CHECK(nlohmann::json(j) == expected);
  // messages must come out in conversation order.
  CHECK(j.at("messages").at(0).at("role") == "system");
  CHECK(j.dump().find("\"system\"") < j.dump().find("\"user\""));

  CHECK_THROWS_AS(format_sft_record(sample, BucketKind::Deferred),
                  std::invalid_argument);
  CHECK_THROWS_AS(format_sft_record(sample, BucketKind::AllZero),
                  std::invalid_argument);
}
