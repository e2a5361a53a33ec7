#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vicoop/negotiation.hpp"
#include "vicoop/rng.hpp"

namespace vicoop {

inline constexpr std::string_view kPromptVersion = "prompts.v1";
inline constexpr std::string_view kOpinionSchema = "opinion.v1";
inline constexpr std::string_view kResolveSchema = "resolve.v1";
inline constexpr std::string_view kMergeSchema = "merge.v1";

struct LlmConfig {
  std::string endpoint_url = "http://127.0.0.1:8080/v1/chat/completions";
  std::string model_name = "gpt-4o-mini";
  std::string api_key_env_var = "VICOOP_LLM_API_KEY";
  double temperature = 0.0;
  double request_timeout = 30.0;  // seconds
  int max_retries = 3;
  double rate_limit = 1.0;  // requests per second, 0 = unlimited
  double backoff_base = 1.0;
  double backoff_factor = 2.0;
  double backoff_jitter = 0.25;  // fraction of the delay added at random

  void validate() const;
};

LlmConfig llm_config_from_json(const nlohmann::json& j, LlmConfig base = {});
nlohmann::json to_json(const LlmConfig& c);

struct PromptBundle {
  std::string system_text;
  std::string user_text;
  std::string schema_id;

  // fnv1a64 of system_text + "\n" + user_text as 16 hex digits; the fixture key.
  [[nodiscard]] std::string hash() const;
};

// JSON shape the reply must have, embedded in prompts and reformat requests.
std::string_view schema_text(std::string_view schema_id);
bool schema_registered(std::string_view schema_id);

PromptBundle build_opinion_prompt(const NegotiationContext& ctx, VehicleId ego);
PromptBundle build_resolve_prompt(const NegotiationContext& ctx, std::span<const DisputedPair> disputed);
PromptBundle build_merge_prompt(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx);

// ---------------------------------------------------------------- transport

struct AttemptRecord {
  int attempt = 0;
  int status = 0;       // HTTP status, 0 when no response arrived
  std::string outcome;  // "ok", "transport", "timeout", "retryable_status", ...
  std::string detail;
  double backoff = 0.0;  // seconds slept before the next attempt
};

class LlmError : public BackendError {
 public:
  LlmError(const std::string& what, std::vector<AttemptRecord> attempts)
      : BackendError(what), attempts_(std::move(attempts)) {}
  [[nodiscard]] const std::vector<AttemptRecord>& attempts() const { return attempts_; }

 private:
  std::vector<AttemptRecord> attempts_;
};

class TransportError : public LlmError {
 public:
  using LlmError::LlmError;
};
class AuthFailure : public LlmError {
 public:
  using LlmError::LlmError;
};
class RetriesExhausted : public LlmError {
 public:
  using LlmError::LlmError;
};
// Retries ran out and the last attempt timed out.
class TimeoutError : public RetriesExhausted {
 public:
  using RetriesExhausted::RetriesExhausted;
};

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatResult {
  std::string text;
  std::vector<AttemptRecord> attempts;
};

// HTTP chat-completion client. Safe to share between threads; the rate
// limiter is the only shared state.
class ChatClient {
 public:
  using Sleeper = std::function<void(double seconds)>;

  explicit ChatClient(LlmConfig config, Sleeper sleeper = {});

  [[nodiscard]] const LlmConfig& config() const { return config_; }
  ChatResult chat(const std::vector<ChatMessage>& messages);
  ChatResult chat(const PromptBundle& prompt);

 private:
  void wait_for_slot();
  double backoff_delay(int attempt);

  LlmConfig config_;
  Sleeper sleep_;
  std::mutex mutex_;
  std::chrono::steady_clock::time_point next_slot_{};
  SeededStream jitter_;
};

std::string chat(const LlmConfig& config, const PromptBundle& prompt);

// ---------------------------------------------------------------- replies

class ReplyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseFailure : public ReplyError {
 public:
  ParseFailure(const std::string& what, std::string span) : ReplyError(what), span_(std::move(span)) {}
  [[nodiscard]] const std::string& span() const { return span_; }

 private:
  std::string span_;
};

class SchemaViolation : public ReplyError {
 public:
  SchemaViolation(const std::string& what, std::string path) : ReplyError(what), path_(std::move(path)) {}
  [[nodiscard]] const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct MergeEntry {
  VehicleId id;
  int group = -1;
  friend bool operator==(const MergeEntry&, const MergeEntry&) = default;
};

struct ParsedReply {
  std::string schema_id;
  std::vector<PrecedencePreference> precedences;  // opinion.v1, resolve.v1
  std::vector<MergeEntry> order;                  // merge.v1
};

// First JSON object in `raw` that parses (prose and code fences around it are
// ignored), validated against the schema. Every vehicle must be in `known`.
ParsedReply parse_reply(std::string_view raw, std::string_view schema_id, std::span<const VehicleId> known);

// Canonical reply text; parse_reply(render_reply(r)) == r.
std::string render_reply(const ParsedReply& reply);

// ---------------------------------------------------------------- backends

// Appends {hash, schema, system, user, reply} lines; replayable by ReplayBackend.
class TranscriptWriter {
 public:
  explicit TranscriptWriter(std::string path) : path_(std::move(path)) {}
  void append(const PromptBundle& prompt, const std::string& reply);

 private:
  std::string path_;
  std::mutex mutex_;
};

class LlmBackend : public NegotiatorBackend {
 public:
  explicit LlmBackend(std::shared_ptr<ChatClient> client, std::shared_ptr<TranscriptWriter> transcript = nullptr);

  [[nodiscard]] std::string name() const override { return "llm"; }
  std::vector<PrecedencePreference> opinion(const NegotiationContext& ctx, VehicleId ego) override;
  std::vector<PrecedencePreference> resolve(const NegotiationContext& ctx,
                                            std::span<const DisputedPair> disputed) override;
  std::vector<VehicleId> merge(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx) override;

  [[nodiscard]] int requests() const { return requests_; }

 private:
  ParsedReply ask(const PromptBundle& prompt, std::span<const VehicleId> known);

  std::shared_ptr<ChatClient> client_;
  std::shared_ptr<TranscriptWriter> transcript_;
  int requests_ = 0;
};

// hash -> reply from a JSONL file of {"hash": ..., "reply": ...} records.
std::map<std::string, std::string> load_fixture(const std::string& path);

// Answers from a JSONL file of {"hash": ..., "reply": ...} records and throws
// BackendError on a miss. Never touches the network.
class ReplayBackend : public NegotiatorBackend {
 public:
  explicit ReplayBackend(const std::string& path);
  explicit ReplayBackend(std::map<std::string, std::string> replies);

  [[nodiscard]] std::string name() const override { return "fixture"; }
  std::vector<PrecedencePreference> opinion(const NegotiationContext& ctx, VehicleId ego) override;
  std::vector<PrecedencePreference> resolve(const NegotiationContext& ctx,
                                            std::span<const DisputedPair> disputed) override;
  std::vector<VehicleId> merge(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx) override;

  [[nodiscard]] std::size_t size() const { return replies_.size(); }
  [[nodiscard]] const std::vector<std::string>& misses() const { return misses_; }

 private:
  ParsedReply lookup(const PromptBundle& prompt, std::span<const VehicleId> known);

  std::map<std::string, std::string> replies_;
  std::vector<std::string> misses_;
};

}  // namespace vicoop
