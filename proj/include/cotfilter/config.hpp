#pragma once

#include <cstdlib>
#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"

#include "cotfilter/common.hpp"
#include "cotfilter/model_client.hpp"
#include "cotfilter/segmentation.hpp"

namespace cotfilter {

struct RepairSettings {
  bool enabled = false;
  int candidates = 4;
};

/// Full pipeline configuration. Parsed from one JSON file; CLI flags and
/// environment variables override individual fields.
struct PipelineConfig {
  std::string input_path;
  std::string output_dir;
  int top_k = 0;  // 0 = default 4*N
  int n_segments = 5;
  int rollouts = 8;
  SplitStrategy strategy = SplitStrategy::EntropyGreedy;
  std::uint64_t seed = 0;
  bool strict_ingest = false;
  bool fail_fast = false;
  int workers = 4;
  RepairSettings repair;
  std::string mock_script;  // non-empty = run every backend off this script
  BackendConfig scorer;
  BackendConfig rollout;
  BackendConfig repair_backend;

  PipelineConfig() {
    scorer.role = BackendRole::Scorer;
    rollout.role = BackendRole::Rollout;
    repair_backend.role = BackendRole::Repair;
  }

  int effective_top_k() const { return top_k > 0 ? top_k : 4 * n_segments; }

  void validate() const {
    if (input_path.empty()) throw std::invalid_argument("config: input is required");
    if (output_dir.empty())
      throw std::invalid_argument("config: output_dir is required");
    if (n_segments < 2)
      throw std::invalid_argument("config: n_segments must be >= 2");
    if (rollouts < 1) throw std::invalid_argument("config: rollouts must be >= 1");
    if (effective_top_k() < 1)
      throw std::invalid_argument("config: top_k must be >= 1");
    if (workers < 1) throw std::invalid_argument("config: workers must be >= 1");
    if (repair.enabled && repair.candidates < 1)
      throw std::invalid_argument("config: repair.candidates must be >= 1");
    if (mock_script.empty()) {
      if (scorer.base_url.empty())
        throw std::invalid_argument("config: scorer backend needs a base_url");
      if (rollout.base_url.empty())
        throw std::invalid_argument("config: rollout backend needs a base_url");
      if (repair.enabled && repair_backend.base_url.empty())
        throw std::invalid_argument("config: repair backend needs a base_url");
    }
  }

  /// Digest over the fields that determine results. Operational knobs
  /// (output dir, worker count, timeouts, retries, fail-fast) are excluded:
  /// changing them must not invalidate a resumable run.
  std::string digest() const {
    auto backend_semantics = [](const BackendConfig& b) {
      return nlohmann::json{{"base_url", b.base_url},
                            {"model", b.model},
                            {"logprobs", b.logprob_top},
                            {"max_new_tokens", b.generation.max_new_tokens},
                            {"top_p", b.generation.top_p},
                            {"top_k", b.generation.top_k},
                            {"repetition_penalty", b.generation.repetition_penalty},
                            {"temperature", b.generation.temperature}};
    };
    nlohmann::json j{{"input", input_path},
                     {"top_k", effective_top_k()},
                     {"n_segments", n_segments},
                     {"rollouts", rollouts},
                     {"strategy", to_string(strategy)},
                     {"seed", seed},
                     {"strict_ingest", strict_ingest},
                     {"repair_enabled", repair.enabled},
                     {"repair_candidates", repair.candidates},
                     {"mock_script", mock_script},
                     {"scorer", backend_semantics(scorer)},
                     {"rollout", backend_semantics(rollout)},
                     {"repair_backend", backend_semantics(repair_backend)}};
    return digest_hex(j.dump());
  }

  /// COTFILTER_{SCORER,ROLLOUT,REPAIR}_BASE_URL and ..._TOKEN override the
  /// file values, so deployments can move backends without editing configs.
  void apply_env_overrides() {
    struct Binding {
      const char* url_var;
      const char* token_var;
      BackendConfig* backend;
    };
    const Binding bindings[] = {
        {"COTFILTER_SCORER_BASE_URL", "COTFILTER_SCORER_TOKEN", &scorer},
        {"COTFILTER_ROLLOUT_BASE_URL", "COTFILTER_ROLLOUT_TOKEN", &rollout},
        {"COTFILTER_REPAIR_BASE_URL", "COTFILTER_REPAIR_TOKEN",
         &repair_backend},
    };
    for (const auto& b : bindings) {
      if (const char* url = std::getenv(b.url_var); url && *url)
        b.backend->base_url = url;
      if (const char* tok = std::getenv(b.token_var); tok && *tok)
        b.backend->auth_token = tok;
    }
  }

  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load_file(const std::string& path);
  nlohmann::json to_json() const;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                std::initializer_list<std::string_view> known,
                                const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto k : known)
      if (key == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::invalid_argument("config: unknown key \"" + key + "\" in " +
                                  where);
  }
}

inline void backend_from_json(const nlohmann::json& j, BackendConfig& b,
                              const std::string& where) {
  reject_unknown_keys(j,
                      {"base_url", "model", "auth_token", "completions_path",
                       "timeout_s", "max_retries", "retry_backoff_ms",
                       "max_in_flight", "logprobs", "params"},
                      where);
  if (j.contains("base_url")) b.base_url = j.at("base_url").get<std::string>();
  if (j.contains("model")) b.model = j.at("model").get<std::string>();
  if (j.contains("auth_token")) b.auth_token = j.at("auth_token").get<std::string>();
  if (j.contains("completions_path"))
    b.completions_path = j.at("completions_path").get<std::string>();
  if (j.contains("timeout_s")) b.timeout_s = j.at("timeout_s").get<double>();
  if (j.contains("max_retries")) b.max_retries = j.at("max_retries").get<int>();
  if (j.contains("retry_backoff_ms"))
    b.retry_backoff_ms = j.at("retry_backoff_ms").get<int>();
  if (j.contains("max_in_flight"))
    b.max_in_flight = j.at("max_in_flight").get<int>();
  if (j.contains("logprobs")) b.logprob_top = j.at("logprobs").get<int>();
  if (j.contains("params")) {
    const auto& p = j.at("params");
    reject_unknown_keys(p,
                        {"max_new_tokens", "top_p", "top_k",
                         "repetition_penalty", "temperature"},
                        where + ".params");
    if (p.contains("max_new_tokens"))
      b.generation.max_new_tokens = p.at("max_new_tokens").get<int>();
    if (p.contains("top_p")) b.generation.top_p = p.at("top_p").get<double>();
    if (p.contains("top_k")) b.generation.top_k = p.at("top_k").get<int>();
    if (p.contains("repetition_penalty"))
      b.generation.repetition_penalty =
          p.at("repetition_penalty").get<double>();
    if (p.contains("temperature"))
      b.generation.temperature = p.at("temperature").get<double>();
  }
}

inline nlohmann::json backend_to_json(const BackendConfig& b) {
  return nlohmann::json{
      {"base_url", b.base_url},
      {"model", b.model},
      {"completions_path", b.completions_path},
      {"timeout_s", b.timeout_s},
      {"max_retries", b.max_retries},
      {"retry_backoff_ms", b.retry_backoff_ms},
      {"max_in_flight", b.max_in_flight},
      {"logprobs", b.logprob_top},
      {"params",
       {{"max_new_tokens", b.generation.max_new_tokens},
        {"top_p", b.generation.top_p},
        {"top_k", b.generation.top_k},
        {"repetition_penalty", b.generation.repetition_penalty},
        {"temperature", b.generation.temperature}}}};
}

}  // namespace detail

inline PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j,
      {"input", "output_dir", "top_k", "n_segments", "rollouts", "strategy",
       "seed", "strict_ingest", "fail_fast", "workers", "repair",
       "mock_script", "backends"},
      "config");
  PipelineConfig cfg;
  if (j.contains("input")) cfg.input_path = j.at("input").get<std::string>();
  if (j.contains("output_dir"))
    cfg.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("top_k")) cfg.top_k = j.at("top_k").get<int>();
  if (j.contains("n_segments")) cfg.n_segments = j.at("n_segments").get<int>();
  if (j.contains("rollouts")) cfg.rollouts = j.at("rollouts").get<int>();
  if (j.contains("strategy"))
    cfg.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("strict_ingest"))
    cfg.strict_ingest = j.at("strict_ingest").get<bool>();
  if (j.contains("fail_fast")) cfg.fail_fast = j.at("fail_fast").get<bool>();
  if (j.contains("workers")) cfg.workers = j.at("workers").get<int>();
  if (j.contains("repair")) {
    const auto& r = j.at("repair");
    detail::reject_unknown_keys(r, {"enabled", "candidates"}, "repair");
    if (r.contains("enabled")) cfg.repair.enabled = r.at("enabled").get<bool>();
    if (r.contains("candidates"))
      cfg.repair.candidates = r.at("candidates").get<int>();
  }
  if (j.contains("mock_script"))
    cfg.mock_script = j.at("mock_script").get<std::string>();
  if (j.contains("backends")) {
    const auto& b = j.at("backends");
    detail::reject_unknown_keys(b, {"scorer", "rollout", "repair"}, "backends");
    if (b.contains("scorer"))
      detail::backend_from_json(b.at("scorer"), cfg.scorer, "backends.scorer");
    if (b.contains("rollout"))
      detail::backend_from_json(b.at("rollout"), cfg.rollout,
                                "backends.rollout");
    if (b.contains("repair"))
      detail::backend_from_json(b.at("repair"), cfg.repair_backend,
                                "backends.repair");
  }
  return cfg;
}

inline PipelineConfig PipelineConfig::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config file " + path + " is not valid JSON: " +
                                e.what());
  }
  return from_json(j);
}

/// Echo of the effective config (auth tokens withheld).
inline nlohmann::json PipelineConfig::to_json() const {
  return nlohmann::json{{"input", input_path},
                        {"output_dir", output_dir},
                        {"top_k", effective_top_k()},
                        {"n_segments", n_segments},
                        {"rollouts", rollouts},
                        {"strategy", to_string(strategy)},
                        {"seed", seed},
                        {"strict_ingest", strict_ingest},
                        {"fail_fast", fail_fast},
                        {"workers", workers},
                        {"repair",
                         {{"enabled", repair.enabled},
                          {"candidates", repair.candidates}}},
                        {"mock_script", mock_script},
                        {"backends",
                         {{"scorer", detail::backend_to_json(scorer)},
                          {"rollout", detail::backend_to_json(rollout)},
                          {"repair", detail::backend_to_json(repair_backend)}}}};
}

}  // namespace cotfilter
