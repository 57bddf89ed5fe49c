#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <semaphore>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "cotfilter/common.hpp"
#include "cotfilter/entropy.hpp"

namespace cotfilter {

enum class BackendRole { Scorer, Rollout, Repair };

inline std::string_view to_string(BackendRole r) {
  switch (r) {
    case BackendRole::Scorer: return "scorer";
    case BackendRole::Rollout: return "rollout";
    case BackendRole::Repair: return "repair";
  }
  throw std::logic_error("bad BackendRole");
}

struct GenerationParams {
  int max_new_tokens = 8192;
  double top_p = 0.8;
  int top_k = 20;
  double repetition_penalty = 1.1;
  double temperature = 1.0;
};

struct BackendConfig {
  BackendRole role = BackendRole::Rollout;
  std::string base_url;
  std::string model;
  std::string auth_token;
  std::string completions_path = "/v1/completions";
  double timeout_s = 120.0;
  int max_retries = 3;
  int retry_backoff_ms = 250;
  int max_in_flight = 8;
  GenerationParams generation;
  int logprob_top = 5;
};

struct Generation {
  std::string text;
  bool truncated = false;
};

struct MetricsSnapshot {
  std::uint64_t scoring_calls = 0;
  std::uint64_t generation_calls = 0;
  std::uint64_t retries = 0;
  std::uint64_t transport_failures = 0;
};

/// One client contract for all three model roles. Concrete transports
/// implement do_score/do_generate; this base enforces role separation,
/// the per-backend in-flight cap, and call metrics.
class Backend {
 public:
  explicit Backend(BackendConfig cfg)
      : cfg_(std::move(cfg)),
        gate_(std::min(cfg_.max_in_flight > 0 ? cfg_.max_in_flight : 1,
                       kMaxInFlightCap)) {
    if (cfg_.max_in_flight < 1)
      throw std::invalid_argument("backend max_in_flight must be >= 1");
    if (cfg_.timeout_s <= 0)
      throw std::invalid_argument("backend timeout must be positive");
    if (cfg_.role == BackendRole::Scorer && cfg_.logprob_top < 1)
      throw std::invalid_argument("scorer needs logprob_top >= 1");
  }
  virtual ~Backend() = default;

  const BackendConfig& config() const { return cfg_; }

  ScoringResult score_tokens(const std::string& context,
                             const std::string& continuation) {
    if (cfg_.role != BackendRole::Scorer)
      throw std::logic_error("score_tokens on a " +
                             std::string(to_string(cfg_.role)) + " backend");
    Admission slot(gate_);
    scoring_calls_.fetch_add(1, std::memory_order_relaxed);
    auto result = do_score(context, continuation);
    if (result.empty() && !continuation.empty())
      throw BackendError("scorer returned no records for a non-empty trace");
    return result;
  }

  Generation generate(const std::string& prompt, const GenerationParams& params,
                      std::uint64_t seed) {
    if (cfg_.role == BackendRole::Scorer)
      throw std::logic_error("generate on a scorer backend");
    Admission slot(gate_);
    generation_calls_.fetch_add(1, std::memory_order_relaxed);
    return do_generate(prompt, params, seed);
  }

  MetricsSnapshot metrics() const {
    MetricsSnapshot m;
    m.scoring_calls = scoring_calls_.load(std::memory_order_relaxed);
    m.generation_calls = generation_calls_.load(std::memory_order_relaxed);
    m.retries = retries_.load(std::memory_order_relaxed);
    m.transport_failures = transport_failures_.load(std::memory_order_relaxed);
    return m;
  }

 protected:
  static constexpr int kMaxInFlightCap = 1024;

  virtual ScoringResult do_score(const std::string& context,
                                 const std::string& continuation) = 0;
  virtual Generation do_generate(const std::string& prompt,
                                 const GenerationParams& params,
                                 std::uint64_t seed) = 0;

  void count_retry() { retries_.fetch_add(1, std::memory_order_relaxed); }
  void count_failure() {
    transport_failures_.fetch_add(1, std::memory_order_relaxed);
  }

  BackendConfig cfg_;

 private:
  struct Admission {
    explicit Admission(std::counting_semaphore<kMaxInFlightCap>& g) : gate(g) {
      gate.acquire();
    }
    ~Admission() { gate.release(); }
    std::counting_semaphore<kMaxInFlightCap>& gate;
  };

  std::counting_semaphore<kMaxInFlightCap> gate_;
  std::atomic<std::uint64_t> scoring_calls_{0};
  std::atomic<std::uint64_t> generation_calls_{0};
  std::atomic<std::uint64_t> retries_{0};
  std::atomic<std::uint64_t> transport_failures_{0};
};

// ---------------------------------------------------------------------------
// Lookup keys shared by the scripted mock and its script files.
// ---------------------------------------------------------------------------

inline std::string scoring_key(std::string_view context,
                               std::string_view continuation) {
  std::uint64_t h = fnv1a64(context);
  h = fnv1a64("\x1f", h);
  h = fnv1a64(continuation, h);
  return to_hex16(h);
}

inline std::string prompt_key(std::string_view prompt) {
  return digest_hex(prompt);
}

/// Deterministic response tables for offline runs and tests. Scoring is
/// keyed by digest(context, continuation); generation by (digest(prompt),
/// seed). A missing key is always an error: mocks never improvise.
struct MockScript {
  std::map<std::string, ScoringResult> scoring;
  std::map<std::string, std::map<std::uint64_t, std::string>> generation;

  void add_scoring(std::string_view context, std::string_view continuation,
                   ScoringResult records) {
    scoring[scoring_key(context, continuation)] = std::move(records);
  }

  void add_generation(std::string_view prompt, std::uint64_t seed,
                      std::string text) {
    generation[prompt_key(prompt)][seed] = std::move(text);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["scoring"] = nlohmann::json::object();
    for (const auto& [key, records] : scoring) {
      nlohmann::json toks = nlohmann::json::array();
      for (const auto& rec : records) {
        nlohmann::json top = nlohmann::json::array();
        for (const auto& [tok, lp] : rec.top)
          top.push_back(nlohmann::json::array({tok, lp}));
        toks.push_back({{"t", rec.token_text}, {"top", std::move(top)}});
      }
      j["scoring"][key] = {{"tokens", std::move(toks)}};
    }
    j["generation"] = nlohmann::json::object();
    for (const auto& [key, by_seed] : generation) {
      nlohmann::json seeds = nlohmann::json::object();
      for (const auto& [seed, text] : by_seed)
        seeds[std::to_string(seed)] = text;
      j["generation"][key] = std::move(seeds);
    }
    return j;
  }

  static MockScript from_json(const nlohmann::json& j) {
    MockScript script;
    if (j.contains("scoring")) {
      for (const auto& [key, entry] : j.at("scoring").items()) {
        ScoringResult records;
        int pos = 0;
        for (const auto& tok : entry.at("tokens")) {
          TokenLogprobTopM rec;
          rec.token_text = tok.at("t").get<std::string>();
          rec.position = pos++;
          for (const auto& pair : tok.at("top"))
            rec.top.emplace_back(pair.at(0).get<std::string>(),
                                 pair.at(1).get<double>());
          records.push_back(std::move(rec));
        }
        script.scoring[key] = std::move(records);
      }
    }
    if (j.contains("generation")) {
      for (const auto& [key, seeds] : j.at("generation").items()) {
        for (const auto& [seed, text] : seeds.items())
          script.generation[key][std::stoull(seed)] = text.get<std::string>();
      }
    }
    return script;
  }

  static MockScript load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open mock script: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ScriptError("mock script " + path + " is not valid JSON: " +
                        e.what());
    }
    try {
      return from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw ScriptError("mock script " + path + " has a bad shape: " +
                        e.what());
    }
  }

  void save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write mock script: " + path);
    out << to_json().dump(1, ' ') << '\n';
  }
};

class ScriptedBackend : public Backend {
 public:
  ScriptedBackend(BackendConfig cfg, std::shared_ptr<const MockScript> script)
      : Backend(std::move(cfg)), script_(std::move(script)) {
    if (!script_) throw std::invalid_argument("scripted backend needs a script");
  }

 protected:
  ScoringResult do_score(const std::string& context,
                         const std::string& continuation) override {
    auto it = script_->scoring.find(scoring_key(context, continuation));
    if (it == script_->scoring.end())
      throw ScriptError("no scripted scoring entry for key " +
                        scoring_key(context, continuation));
    return it->second;
  }

  Generation do_generate(const std::string& prompt,
                         const GenerationParams& /*params*/,
                         std::uint64_t seed) override {
    auto by_prompt = script_->generation.find(prompt_key(prompt));
    if (by_prompt == script_->generation.end())
      throw ScriptError("no scripted generation entry for prompt key " +
                        prompt_key(prompt));
    auto by_seed = by_prompt->second.find(seed);
    if (by_seed == by_prompt->second.end())
      throw ScriptError("no scripted generation for prompt key " +
                        prompt_key(prompt) + " seed " + std::to_string(seed));
    return Generation{by_seed->second, false};
  }

 private:
  std::shared_ptr<const MockScript> script_;
};

/// Completion-style HTTP JSON client. Scoring uses prompt echo with
/// logprobs (max_tokens 0); generation posts sampling params and a seed.
/// Transport errors, 5xx, and 429 are retried with exponential backoff.
class HttpBackend : public Backend {
 public:
  using Backend::Backend;

 protected:
  ScoringResult do_score(const std::string& context,
                         const std::string& continuation) override {
    nlohmann::json req{{"model", cfg_.model},
                       {"prompt", context + continuation},
                       {"max_tokens", 0},
                       {"echo", true},
                       {"logprobs", cfg_.logprob_top}};
    nlohmann::json rsp = post_json(req);
    try {
      const auto& lp = rsp.at("choices").at(0).at("logprobs");
      const auto& tokens = lp.at("tokens");
      const auto& offsets = lp.at("text_offset");
      const auto& tops = lp.at("top_logprobs");
      ScoringResult out;
      int pos = 0;
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        auto offset = offsets.at(i).get<std::size_t>();
        if (offset < context.size()) continue;  // prompt-echo tokens
        TokenLogprobTopM rec;
        rec.token_text = tokens.at(i).get<std::string>();
        rec.position = pos++;
        if (!tops.at(i).is_null()) {
          for (const auto& [tok, lpv] : tops.at(i).items())
            rec.top.emplace_back(tok, lpv.get<double>());
          std::sort(rec.top.begin(), rec.top.end(),
                    [](const auto& a, const auto& b) {
                      return a.second > b.second;
                    });
        }
        out.push_back(std::move(rec));
      }
      return out;
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(role_tag() + " response lacks logprob fields: " +
                         e.what());
    }
  }

  Generation do_generate(const std::string& prompt,
                         const GenerationParams& params,
                         std::uint64_t seed) override {
    nlohmann::json req{{"model", cfg_.model},
                       {"prompt", prompt},
                       {"max_tokens", params.max_new_tokens},
                       {"top_p", params.top_p},
                       {"top_k", params.top_k},
                       {"repetition_penalty", params.repetition_penalty},
                       {"temperature", params.temperature},
                       {"seed", seed}};
    nlohmann::json rsp = post_json(req);
    try {
      const auto& choice = rsp.at("choices").at(0);
      Generation gen;
      gen.text = choice.at("text").get<std::string>();
      gen.truncated = choice.contains("finish_reason") &&
                      !choice.at("finish_reason").is_null() &&
                      choice.at("finish_reason").get<std::string>() == "length";
      return gen;
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(role_tag() + " response lacks completion text: " +
                         e.what());
    }
  }

 private:
  std::string role_tag() const { return std::string(to_string(cfg_.role)); }

  nlohmann::json post_json(const nlohmann::json& body) {
    std::string payload = body.dump();
    int attempts = cfg_.max_retries + 1;
    int backoff_ms = cfg_.retry_backoff_ms;
    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt < attempts; ++attempt) {
      if (attempt > 0) {
        count_retry();
        std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms));
        backoff_ms *= 2;
      }
      httplib::Client client(cfg_.base_url);
      client.set_connection_timeout(std::chrono::duration<double>(cfg_.timeout_s));
      client.set_read_timeout(std::chrono::duration<double>(cfg_.timeout_s));
      client.set_write_timeout(std::chrono::duration<double>(cfg_.timeout_s));
      httplib::Headers headers;
      if (!cfg_.auth_token.empty())
        headers.emplace("Authorization", "Bearer " + cfg_.auth_token);
      auto res = client.Post(cfg_.completions_path, headers, payload,
                             "application/json");
      if (!res) {
        last_error = "transport error (" + httplib::to_string(res.error()) + ")";
        continue;
      }
      if (res->status >= 500 || res->status == 429) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        count_failure();
        throw BackendError(role_tag() + " backend " + cfg_.base_url +
                           " rejected the request: HTTP " +
                           std::to_string(res->status));
      }
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        count_failure();
        throw BackendError(role_tag() + " backend returned invalid JSON: " +
                           e.what());
      }
    }
    count_failure();
    throw BackendError(role_tag() + " backend " + cfg_.base_url +
                       " unreachable after " + std::to_string(attempts) +
                       " attempts: " + last_error);
  }
};

}  // namespace cotfilter
