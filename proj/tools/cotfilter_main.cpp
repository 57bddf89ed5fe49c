// Command-line front end for the filtering pipeline. Exit codes: 0 clean
// run, 1 partial (per-sample failures or an aborted backend), 2 fatal
// configuration, corpus, or checkpoint errors.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "cotfilter/orchestrator.hpp"
#include "cotfilter/verifier.hpp"

namespace {

struct CliOverrides {
  std::string config_path;
  std::string input;
  std::string out;
  std::string strategy;
  std::string mock;
  int top_k = 0;
  int n_segments = 0;
  int rollouts = 0;
  std::uint64_t seed = 0;
  int workers = 0;
  int candidates = 0;
  bool repair = false;
  bool fail_fast = false;
  bool strict = false;
  bool as_json = false;
  std::string stop_after;
};

void add_pipeline_options(CLI::App* cmd, CliOverrides& o) {
  cmd->add_option("--config", o.config_path, "pipeline config file (JSON)");
  cmd->add_option("--input", o.input, "input corpus (JSON Lines)");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--strategy", o.strategy,
                  "split strategy: greedy | random | no-greedy");
  cmd->add_option("--k", o.top_k, "high-entropy candidate pool size");
  cmd->add_option("--n", o.n_segments, "target segment count");
  cmd->add_option("--r", o.rollouts, "rollouts per prefix");
  cmd->add_option("--seed", o.seed, "base RNG seed");
  cmd->add_option("--workers", o.workers, "worker threads");
  cmd->add_option("--candidates", o.candidates, "repair candidates per sample");
  cmd->add_flag("--repair", o.repair, "enable the repair pass");
  cmd->add_flag("--fail-fast", o.fail_fast, "abort on the first sample failure");
  cmd->add_flag("--strict", o.strict, "reject malformed corpus lines");
  cmd->add_option("--mock", o.mock, "scripted backend file (JSON)");
}

cotfilter::PipelineConfig resolve_config(const CLI::App* cmd,
                                         const CliOverrides& o) {
  cotfilter::PipelineConfig cfg;
  if (cmd->count("--config")) cfg = cotfilter::PipelineConfig::load_file(o.config_path);
  if (cmd->count("--input")) cfg.input_path = o.input;
  if (cmd->count("--out")) cfg.output_dir = o.out;
  if (cmd->count("--strategy"))
    cfg.strategy = cotfilter::strategy_from_string(o.strategy);
  if (cmd->count("--k")) cfg.top_k = o.top_k;
  if (cmd->count("--n")) cfg.n_segments = o.n_segments;
  if (cmd->count("--r")) cfg.rollouts = o.rollouts;
  if (cmd->count("--seed")) cfg.seed = o.seed;
  if (cmd->count("--workers")) cfg.workers = o.workers;
  if (cmd->count("--candidates")) cfg.repair.candidates = o.candidates;
  if (cmd->count("--repair")) cfg.repair.enabled = true;
  if (cmd->count("--fail-fast")) cfg.fail_fast = true;
  if (cmd->count("--strict")) cfg.strict_ingest = true;
  if (cmd->count("--mock")) cfg.mock_script = o.mock;
  cfg.apply_env_overrides();
  return cfg;
}

cotfilter::Stage stage_from_name(const std::string& name) {
  using cotfilter::Stage;
  if (name == "ingest") return Stage::Ingested;
  if (name == "entropy") return Stage::EntropyDone;
  if (name == "segment") return Stage::Segmented;
  if (name == "rollout") return Stage::RolledOut;
  if (name == "classify") return Stage::Classified;
  if (name == "repair") return Stage::Repaired;
  if (name == "export" || name == "export-sft" || name == "export-dpo")
    return Stage::Exported;
  throw std::invalid_argument("unknown stage: " + name);
}

int emit_report(const cotfilter::RunReport& report, bool as_json) {
  if (as_json)
    std::cout << report.to_json().dump(1, ' ') << "\n";
  else
    std::cout << report.render();
  return report.partial ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"entropy-guided filtering for chain-of-thought corpora"};
  app.require_subcommand(1);
  CliOverrides o;

  auto* run = app.add_subcommand("run", "execute the full pipeline");
  add_pipeline_options(run, o);
  run->add_option("--stage", o.stop_after,
                  "stop after this stage (ingest..export)");
  run->add_flag("--json", o.as_json, "print the report as JSON");

  const char* stage_names[] = {"ingest",   "entropy", "segment",
                               "rollout",  "classify", "repair",
                               "export-sft", "export-dpo"};
  for (const char* name : stage_names) {
    auto* cmd = app.add_subcommand(name, std::string("run the ") + name +
                                             " stage on an existing output "
                                             "directory");
    add_pipeline_options(cmd, o);
    cmd->add_flag("--json", o.as_json, "print the report as JSON");
  }

  auto* report_cmd =
      app.add_subcommand("report", "summarize an existing output directory");
  report_cmd->add_option("--out", o.out, "output directory")->required();
  report_cmd->add_flag("--json", o.as_json, "print the report as JSON");

  std::string pred, gold;
  auto* verify_cmd =
      app.add_subcommand("verify", "check two answers for equivalence");
  verify_cmd->add_option("--pred", pred, "predicted answer or completion")
      ->required();
  verify_cmd->add_option("--gold", gold, "gold answer")->required();

  CLI11_PARSE(app, argc, argv);
  CLI::App* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();

  try {
    if (name == "verify") {
      auto p = cotfilter::normalize_answer(pred);
      auto g = cotfilter::normalize_answer(gold);
      bool match = cotfilter::answers_match(pred, gold);
      std::cout << "pred: \"" << p.canonical << "\""
                << (p.numeric ? " = " + p.numeric->str() : "") << "\n"
                << "gold: \"" << g.canonical << "\""
                << (g.numeric ? " = " + g.numeric->str() : "") << "\n"
                << (match ? "match" : "mismatch") << "\n";
      return match ? 0 : 1;
    }

    if (name == "report") {
      auto state = cotfilter::load_checkpoint(
          std::filesystem::path(o.out) / "state.json", std::nullopt);
      return emit_report(cotfilter::report_from_state(state, o.out), o.as_json);
    }

    cotfilter::PipelineConfig cfg = resolve_config(cmd, o);
    cotfilter::Orchestrator orchestrator(cfg, cotfilter::make_backends(cfg));
    cotfilter::RunReport report;
    if (name == "run") {
      auto stop = o.stop_after.empty() ? cotfilter::Stage::Exported
                                       : stage_from_name(o.stop_after);
      report = orchestrator.run(stop);
    } else {
      report = orchestrator.run_single(stage_from_name(name));
    }
    return emit_report(report, o.as_json);
  } catch (const cotfilter::BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
