#include "vicoop/llm_backend.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

namespace vicoop {

namespace {

using nlohmann::json;

constexpr std::string_view kPrecedenceSchemaText =
    R"({"precedences": [{"first": <vehicle id>, "second": <vehicle id>, "reason": "<short text>"}]})";
constexpr std::string_view kMergeSchemaText = R"({"order": [{"id": <vehicle id>, "group": <group index>}]})";

std::string fmt_num(double x) { return fmt::format("{:.2f}", x); }

void append_members(std::string& out, const NegotiationContext& ctx) {
  out += "Vehicles (id: position x,y in m; speed in m/s; distance to nearest conflict point in m; "
         "arrival there at current speed in s):\n";
  for (const auto& m : ctx.members) {
    out += fmt::format("- {}: ({}, {}); speed {}; distance {}; arrival {}\n", m.id.value,
                       fmt_num(m.state.position.x), fmt_num(m.state.position.y), fmt_num(m.state.speed()),
                       fmt_num(m.distance_to_conflict), fmt_num(m.arrival));
  }
}

void append_conflicts(std::string& out, const NegotiationContext& ctx) {
  if (ctx.conflicts.empty()) {
    out += "none\n";
    return;
  }
  for (const auto& c : ctx.conflicts) {
    out += fmt::format("- vehicles {} and {} at ({}, {}): {} is {} m away at {} m/s (arrival {} s); "
                       "{} is {} m away at {} m/s (arrival {} s)\n",
                       c.a.value, c.b.value, fmt_num(c.point.location.x), fmt_num(c.point.location.y), c.a.value,
                       fmt_num(c.distance_a), fmt_num(c.speed_a), fmt_num(c.arrival_a), c.b.value,
                       fmt_num(c.distance_b), fmt_num(c.speed_b), fmt_num(c.arrival_b));
  }
}

void append_following(std::string& out, const NegotiationContext& ctx) {
  if (ctx.following.empty()) {
    out += "none\n";
    return;
  }
  for (const auto& f : ctx.following) {
    out += fmt::format("- leader {} -> follower {} (gap {} m)\n", f.leader.value, f.follower.value, fmt_num(f.gap));
  }
}

void append_agreed(std::string& out, const NegotiationContext& ctx) {
  if (ctx.agreed.empty()) return;
  out += "\nPrecedences agreed earlier (keep them unless they became impossible):\n";
  for (const auto& p : ctx.agreed) out += fmt::format("- {} before {}\n", p.first.value, p.second.value);
}

void append_feedback(std::string& out, const NegotiationContext& ctx) {
  if (ctx.feedback.empty()) return;
  out += "\nThe previous round was rejected:\n";
  for (const auto& f : ctx.feedback) out += fmt::format("- {}\n", f);
}

void append_schema(std::string& out, std::string_view schema_id) {
  out += fmt::format("\nReply with JSON only, schema {}:\n{}\n", schema_id, schema_text(schema_id));
}

// Matching close bracket for raw[start], honoring JSON strings.
std::optional<std::size_t> matching_close(std::string_view raw, std::size_t start) {
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = start; i < raw.size(); ++i) {
    const char c = raw[i];
    if (in_string) {
      if (escaped) escaped = false;
      else if (c == '\\') escaped = true;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{' || c == '[') ++depth;
    else if (c == '}' || c == ']') {
      if (--depth == 0) return i;
    }
  }
  return std::nullopt;
}

std::string excerpt(std::string_view s) {
  constexpr std::size_t kMax = 120;
  return s.size() <= kMax ? std::string(s) : std::string(s.substr(0, kMax)) + "...";
}

json extract_json(std::string_view raw) {
  std::optional<std::string_view> first_candidate;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    // Every reply schema is an object; bracketed prose like "[1]" is skipped.
    if (raw[i] != '{') continue;
    const auto end = matching_close(raw, i);
    if (!end) {
      if (!first_candidate) first_candidate = raw.substr(i);
      continue;
    }
    const auto candidate = raw.substr(i, *end - i + 1);
    auto parsed = json::parse(candidate, nullptr, false);
    if (!parsed.is_discarded()) return parsed;
    if (!first_candidate) first_candidate = candidate;
  }
  if (raw.find_first_not_of(" \t\r\n") == std::string_view::npos) throw ParseFailure("empty reply", "");
  const auto span = first_candidate ? *first_candidate : raw;
  throw ParseFailure("no JSON object in reply: " + excerpt(span), std::string(span));
}

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw SchemaViolation(path + ": " + what, path);
}

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& path) {
  for (const auto& [k, v] : obj.items()) {
    const bool known = std::find(allowed.begin(), allowed.end(), k) != allowed.end();
    require(known, path + "." + k, "unexpected field");
  }
}

VehicleId vehicle_field(const json& obj, const char* key, const std::string& path,
                        const std::set<VehicleId>& known) {
  const auto p = path + "." + key;
  require(obj.contains(key), p, "missing");
  require(obj[key].is_number_integer(), p, "must be an integer");
  const VehicleId id{obj[key].get<std::int64_t>()};
  require(known.count(id) > 0, p, fmt::format("unknown vehicle {}", id.value));
  return id;
}

std::vector<PrecedencePreference> parse_precedences(const json& root, const std::set<VehicleId>& known) {
  require(root.is_object(), "$", "must be an object");
  check_keys(root, {"precedences"}, "$");
  require(root.contains("precedences"), "$.precedences", "missing");
  const auto& list = root["precedences"];
  require(list.is_array(), "$.precedences", "must be an array");
  std::vector<PrecedencePreference> out;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto path = fmt::format("$.precedences[{}]", i);
    const auto& item = list[i];
    require(item.is_object(), path, "must be an object");
    check_keys(item, {"first", "second", "reason"}, path);
    PrecedencePreference p;
    p.first = vehicle_field(item, "first", path, known);
    p.second = vehicle_field(item, "second", path, known);
    require(p.first != p.second, path, "a vehicle cannot precede itself");
    p.stated_by = VehicleId{-1};
    if (item.contains("reason")) {
      require(item["reason"].is_string(), path + ".reason", "must be a string");
      p.rationale = item["reason"].get<std::string>();
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<MergeEntry> parse_merge(const json& root, const std::set<VehicleId>& known) {
  require(root.is_object(), "$", "must be an object");
  check_keys(root, {"order"}, "$");
  require(root.contains("order"), "$.order", "missing");
  const auto& list = root["order"];
  require(list.is_array(), "$.order", "must be an array");
  std::vector<MergeEntry> out;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto path = fmt::format("$.order[{}]", i);
    const auto& item = list[i];
    require(item.is_object(), path, "must be an object");
    check_keys(item, {"id", "group"}, path);
    MergeEntry e;
    e.id = vehicle_field(item, "id", path, known);
    require(item.contains("group"), path + ".group", "missing");
    require(item["group"].is_number_integer() && item["group"].get<std::int64_t>() >= 0, path + ".group",
            "must be a non-negative integer");
    e.group = item["group"].get<int>();
    out.push_back(e);
  }
  return out;
}

std::vector<VehicleId> merge_ids(std::span<const PassOrder> intra_orders) {
  std::vector<VehicleId> ids;
  for (const auto& o : intra_orders) ids.insert(ids.end(), o.ordered_ids.begin(), o.ordered_ids.end());
  return ids;
}

// Group label of each vehicle as shown in the merge prompt.
std::map<VehicleId, int> merge_groups(std::span<const PassOrder> intra_orders) {
  std::map<VehicleId, int> g;
  for (std::size_t k = 0; k < intra_orders.size(); ++k) {
    const int label = intra_orders[k].group ? static_cast<int>(*intra_orders[k].group) : static_cast<int>(k);
    for (auto id : intra_orders[k].ordered_ids) g[id] = label;
  }
  return g;
}

std::vector<VehicleId> checked_merge(const ParsedReply& r, std::span<const PassOrder> intra_orders) {
  const auto groups = merge_groups(intra_orders);
  std::vector<VehicleId> out;
  for (std::size_t i = 0; i < r.order.size(); ++i) {
    const auto& e = r.order[i];
    const auto it = groups.find(e.id);
    if (it != groups.end() && it->second != e.group) {
      throw SchemaViolation(fmt::format("vehicle {} is in group {}, not {}", e.id.value, it->second, e.group),
                            fmt::format("$.order[{}].group", i));
    }
    out.push_back(e.id);
  }
  return out;
}

std::string resolve_key(const LlmConfig& config, std::vector<AttemptRecord>& log) {
  if (config.api_key_env_var.empty()) return {};
  const char* key = std::getenv(config.api_key_env_var.c_str());
  if (key == nullptr || *key == '\0') {
    throw AuthFailure("API key variable " + config.api_key_env_var + " is not set", log);
  }
  return key;
}

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

Endpoint split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint_url needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

std::chrono::microseconds seconds_to_us(double s) {
  return std::chrono::microseconds(static_cast<std::int64_t>(std::llround(s * 1e6)));
}

}  // namespace

// ---------------------------------------------------------------- config

void LlmConfig::validate() const {
  if (endpoint_url.empty()) throw ConfigError("endpoint_url must not be empty");
  split_url(endpoint_url);
  if (model_name.empty()) throw ConfigError("model_name must not be empty");
  if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
  if (!(request_timeout > 0.0)) throw ConfigError("request_timeout must be > 0");
  if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
  if (!(rate_limit >= 0.0)) throw ConfigError("rate_limit must be >= 0");
  if (!(backoff_base >= 0.0) || !(backoff_factor >= 1.0)) throw ConfigError("backoff needs base >= 0, factor >= 1");
  if (!(backoff_jitter >= 0.0)) throw ConfigError("backoff_jitter must be >= 0");
}

LlmConfig llm_config_from_json(const nlohmann::json& j, LlmConfig c) {
  if (!j.is_object()) throw ConfigError("llm config must be a JSON object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "endpoint_url") c.endpoint_url = v.get<std::string>();
      else if (k == "model_name") c.model_name = v.get<std::string>();
      else if (k == "api_key_env_var") c.api_key_env_var = v.get<std::string>();
      else if (k == "temperature") c.temperature = v.get<double>();
      else if (k == "request_timeout") c.request_timeout = v.get<double>();
      else if (k == "max_retries") c.max_retries = v.get<int>();
      else if (k == "rate_limit") c.rate_limit = v.get<double>();
      else if (k == "backoff_base") c.backoff_base = v.get<double>();
      else if (k == "backoff_factor") c.backoff_factor = v.get<double>();
      else if (k == "backoff_jitter") c.backoff_jitter = v.get<double>();
      else throw ConfigError("unknown llm config key: " + k);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad llm config value: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const LlmConfig& c) {
  return {{"endpoint_url", c.endpoint_url},     {"model_name", c.model_name},
          {"api_key_env_var", c.api_key_env_var}, {"temperature", c.temperature},
          {"request_timeout", c.request_timeout}, {"max_retries", c.max_retries},
          {"rate_limit", c.rate_limit},         {"backoff_base", c.backoff_base},
          {"backoff_factor", c.backoff_factor}, {"backoff_jitter", c.backoff_jitter}};
}

// ---------------------------------------------------------------- prompts

std::string PromptBundle::hash() const { return fmt::format("{:016x}", fnv1a64(system_text + "\n" + user_text)); }

std::string_view schema_text(std::string_view schema_id) {
  if (schema_id == kOpinionSchema || schema_id == kResolveSchema) return kPrecedenceSchemaText;
  if (schema_id == kMergeSchema) return kMergeSchemaText;
  throw std::invalid_argument("unregistered schema " + std::string(schema_id));
}

bool schema_registered(std::string_view schema_id) {
  return schema_id == kOpinionSchema || schema_id == kResolveSchema || schema_id == kMergeSchema;
}

PromptBundle build_opinion_prompt(const NegotiationContext& ctx, VehicleId ego) {
  if (!ctx.has_member(ego)) throw std::invalid_argument("ego " + to_string(ego) + " is not a group member");
  PromptBundle b;
  b.schema_id = std::string(kOpinionSchema);
  b.system_text = fmt::format(
      "[{}] You are the driving agent of one connected automated vehicle approaching an unsignalized "
      "intersection. Vehicles in your group negotiate who crosses each shared conflict point first.\n"
      "Decide from your own vehicle's point of view, weighing your safety and travel time, but propose an "
      "order the others can accept.\n"
      "Rules:\n"
      "1. Give exactly one decision for every listed conflict pair. Do not mention other vehicles.\n"
      "2. A follower never crosses before its leader.\n"
      "3. Your decisions must not form a cycle such as A before B, B before C, C before A.",
      kPromptVersion);
  std::string u = fmt::format("You are vehicle {}.\n\n", ego.value);
  append_members(u, ctx);
  u += "\nConflict pairs:\n";
  append_conflicts(u, ctx);
  u += "\nCar-following relations:\n";
  append_following(u, ctx);
  append_agreed(u, ctx);
  append_feedback(u, ctx);
  u += "\nFor each conflict pair state which vehicle crosses first.";
  append_schema(u, b.schema_id);
  b.user_text = std::move(u);
  return b;
}

PromptBundle build_resolve_prompt(const NegotiationContext& ctx, std::span<const DisputedPair> disputed) {
  PromptBundle b;
  b.schema_id = std::string(kResolveSchema);
  b.system_text = fmt::format(
      "[{}] You mediate a pass-order negotiation between connected automated vehicles at an unsignalized "
      "intersection. The vehicles could not agree on some conflict pairs. Settle each disputed pair so the "
      "whole group can cross safely and without needless waiting.\n"
      "Rules:\n"
      "1. Give exactly one decision for every disputed pair and nothing else.\n"
      "2. A follower never crosses before its leader.\n"
      "3. Together with the settled precedences your decisions must not form a cycle.",
      kPromptVersion);
  std::string u;
  append_members(u, ctx);
  u += "\nConflict pairs:\n";
  append_conflicts(u, ctx);
  u += "\nCar-following relations:\n";
  append_following(u, ctx);
  append_agreed(u, ctx);
  append_feedback(u, ctx);
  u += "\nDisputed pairs (votes for each direction):\n";
  for (const auto& d : disputed) {
    u += fmt::format("- {} and {}: {} say {} first, {} say {} first\n", d.a.value, d.b.value, d.votes_a_first,
                     d.a.value, d.votes_b_first, d.b.value);
  }
  append_schema(u, b.schema_id);
  b.user_text = std::move(u);
  return b;
}

PromptBundle build_merge_prompt(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx) {
  PromptBundle b;
  b.schema_id = std::string(kMergeSchema);
  b.system_text = fmt::format(
      "[{}] You are the roadside coordinator of an unsignalized intersection. Each vehicle group has already "
      "agreed on its own pass order. Combine them into one global pass order.\n"
      "Constraints:\n"
      "1. In every car-following relation the leader crosses before the follower.\n"
      "2. Every vehicle from the group orders appears exactly once; add no vehicle.\n"
      "3. Vehicles of the same group keep their relative order from the group result.",
      kPromptVersion);
  const auto groups = merge_groups(intra_orders);
  std::string u = "(1) Pass order of each group:\n";
  for (std::size_t k = 0; k < intra_orders.size(); ++k) {
    const auto& o = intra_orders[k];
    std::string ids;
    for (std::size_t i = 0; i < o.ordered_ids.size(); ++i) {
      if (i) ids += ", ";
      ids += to_string(o.ordered_ids[i]);
    }
    const int label = o.group ? static_cast<int>(*o.group) : static_cast<int>(k);
    u += fmt::format("- group {}: {}\n", label, ids);
  }
  u += "\n(2) Conflicts between vehicles:\n";
  append_conflicts(u, ctx);
  u += "\n(3) Car-following relations:\n";
  append_following(u, ctx);
  append_feedback(u, ctx);
  u += "\nList every vehicle with its group, first to cross first.";
  append_schema(u, b.schema_id);
  b.user_text = std::move(u);
  return b;
}

// ---------------------------------------------------------------- transport

ChatClient::ChatClient(LlmConfig config, Sleeper sleeper)
    : config_(std::move(config)), sleep_(std::move(sleeper)), jitter_(seeded_rng(0, "llm-backoff")) {
  config_.validate();
  if (!sleep_) {
    sleep_ = [](double s) {
      if (s > 0.0) std::this_thread::sleep_for(seconds_to_us(s));
    };
  }
}

void ChatClient::wait_for_slot() {
  if (config_.rate_limit <= 0.0) return;
  std::lock_guard lock(mutex_);
  const auto now = std::chrono::steady_clock::now();
  if (next_slot_ > now) {
    sleep_(std::chrono::duration<double>(next_slot_ - now).count());
  }
  next_slot_ = std::max(now, next_slot_) + seconds_to_us(1.0 / config_.rate_limit);
}

double ChatClient::backoff_delay(int attempt) {
  double u = 0.0;
  {
    std::lock_guard lock(mutex_);
    u = jitter_.uniform();
  }
  const double base = config_.backoff_base * std::pow(config_.backoff_factor, attempt - 1);
  return base * (1.0 + config_.backoff_jitter * u);
}

ChatResult ChatClient::chat(const PromptBundle& prompt) {
  return chat({{"system", prompt.system_text}, {"user", prompt.user_text}});
}

ChatResult ChatClient::chat(const std::vector<ChatMessage>& messages) {
  ChatResult result;
  auto& log = result.attempts;
  const auto key = resolve_key(config_, log);
  const auto endpoint = split_url(config_.endpoint_url);

  json body{{"model", config_.model_name}, {"temperature", config_.temperature}};
  auto msgs = json::array();
  for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  body["messages"] = std::move(msgs);
  const auto payload = body.dump();

  httplib::Headers headers;
  if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);

  const int max_attempts = config_.max_retries + 1;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    wait_for_slot();
    httplib::Client client(endpoint.origin);
    const auto timeout = seconds_to_us(config_.request_timeout);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    AttemptRecord rec;
    rec.attempt = attempt;
    const auto started = std::chrono::steady_clock::now();
    auto res = client.Post(endpoint.path, headers, payload, "application/json");
    bool retry = false;
    if (!res) {
      const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      const auto err = res.error();
      const bool timed_out =
          err == httplib::Error::ConnectionTimeout ||
          (err == httplib::Error::Read && elapsed >= 0.95 * config_.request_timeout);
      rec.outcome = timed_out ? "timeout" : "transport";
      rec.detail = httplib::to_string(err);
      retry = true;
    } else {
      rec.status = res->status;
      if (res->status == 200) {
        auto parsed = json::parse(res->body, nullptr, false);
        const json* content = nullptr;
        if (!parsed.is_discarded() && parsed.contains("choices") && parsed["choices"].is_array() &&
            !parsed["choices"].empty()) {
          const auto& choice = parsed["choices"][0];
          if (choice.contains("message") && choice["message"].contains("content") &&
              choice["message"]["content"].is_string()) {
            content = &choice["message"]["content"];
          }
        }
        if (content == nullptr) {
          rec.outcome = "malformed_body";
          rec.detail = excerpt(res->body);
          log.push_back(rec);
          throw TransportError("response body has no choices[0].message.content", log);
        }
        rec.outcome = "ok";
        log.push_back(rec);
        result.text = content->get<std::string>();
        return result;
      }
      rec.detail = excerpt(res->body);
      if (res->status == 401 || res->status == 403) {
        rec.outcome = "auth";
        log.push_back(rec);
        throw AuthFailure(fmt::format("endpoint rejected credentials (HTTP {})", res->status), log);
      }
      if (res->status == 429 || res->status >= 500) {
        rec.outcome = "retryable_status";
        retry = true;
      } else {
        rec.outcome = "status";
        log.push_back(rec);
        throw TransportError(fmt::format("endpoint returned HTTP {}", res->status), log);
      }
    }
    if (retry && attempt < max_attempts) rec.backoff = backoff_delay(attempt);
    log.push_back(rec);
    if (rec.backoff > 0.0) sleep_(rec.backoff);
  }
  const auto& last = log.back();
  const auto msg = fmt::format("{} attempts failed, last: {} {}", max_attempts, last.outcome,
                               last.status ? std::to_string(last.status) : last.detail);
  if (last.outcome == "timeout") throw TimeoutError(msg, log);
  throw RetriesExhausted(msg, log);
}

std::string chat(const LlmConfig& config, const PromptBundle& prompt) { return ChatClient(config).chat(prompt).text; }

// ---------------------------------------------------------------- replies

ParsedReply parse_reply(std::string_view raw, std::string_view schema_id, std::span<const VehicleId> known) {
  if (!schema_registered(schema_id)) throw std::invalid_argument("unregistered schema " + std::string(schema_id));
  const auto root = extract_json(raw);
  const std::set<VehicleId> ids(known.begin(), known.end());
  ParsedReply r;
  r.schema_id = std::string(schema_id);
  if (schema_id == kMergeSchema) r.order = parse_merge(root, ids);
  else r.precedences = parse_precedences(root, ids);
  return r;
}

std::string render_reply(const ParsedReply& reply) {
  json root;
  if (reply.schema_id == kMergeSchema) {
    auto list = json::array();
    for (const auto& e : reply.order) list.push_back({{"id", e.id.value}, {"group", e.group}});
    root["order"] = std::move(list);
  } else {
    auto list = json::array();
    for (const auto& p : reply.precedences) {
      json item{{"first", p.first.value}, {"second", p.second.value}};
      if (!p.rationale.empty()) item["reason"] = p.rationale;
      list.push_back(std::move(item));
    }
    root["precedences"] = std::move(list);
  }
  return root.dump();
}

// ---------------------------------------------------------------- backends

void TranscriptWriter::append(const PromptBundle& prompt, const std::string& reply) {
  std::lock_guard lock(mutex_);
  std::ofstream out(path_, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to transcript " + path_);
  out << json{{"hash", prompt.hash()},
              {"schema", prompt.schema_id},
              {"system", prompt.system_text},
              {"user", prompt.user_text},
              {"reply", reply}}
             .dump()
      << '\n';
}

LlmBackend::LlmBackend(std::shared_ptr<ChatClient> client, std::shared_ptr<TranscriptWriter> transcript)
    : client_(std::move(client)), transcript_(std::move(transcript)) {
  if (!client_) throw std::invalid_argument("LlmBackend needs a client");
}

ParsedReply LlmBackend::ask(const PromptBundle& prompt, std::span<const VehicleId> known) {
  std::vector<ChatMessage> messages{{"system", prompt.system_text}, {"user", prompt.user_text}};
  ++requests_;
  auto reply = client_->chat(messages).text;
  try {
    auto parsed = parse_reply(reply, prompt.schema_id, known);
    if (transcript_) transcript_->append(prompt, reply);
    return parsed;
  } catch (const ReplyError& e) {
    messages.push_back({"assistant", reply});
    messages.push_back({"user", fmt::format("Your reply could not be used ({}). Answer again with JSON only, "
                                            "schema {}:\n{}",
                                            e.what(), prompt.schema_id, schema_text(prompt.schema_id))});
  }
  ++requests_;
  reply = client_->chat(messages).text;
  try {
    auto parsed = parse_reply(reply, prompt.schema_id, known);
    if (transcript_) transcript_->append(prompt, reply);
    return parsed;
  } catch (const ReplyError& e) {
    throw BackendError(std::string("unusable reply after reformat request: ") + e.what());
  }
}

std::vector<PrecedencePreference> LlmBackend::opinion(const NegotiationContext& ctx, VehicleId ego) {
  const auto ids = ctx.member_ids();
  auto out = ask(build_opinion_prompt(ctx, ego), ids).precedences;
  for (auto& p : out) p.stated_by = ego;
  return out;
}

std::vector<PrecedencePreference> LlmBackend::resolve(const NegotiationContext& ctx,
                                                      std::span<const DisputedPair> disputed) {
  const auto ids = ctx.member_ids();
  return ask(build_resolve_prompt(ctx, disputed), ids).precedences;
}

std::vector<VehicleId> LlmBackend::merge(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx) {
  const auto ids = merge_ids(intra_orders);
  const auto prompt = build_merge_prompt(intra_orders, ctx);
  const auto reply = ask(prompt, ids);
  try {
    return checked_merge(reply, intra_orders);
  } catch (const ReplyError& e) {
    throw BackendError(e.what());
  }
}

ReplayBackend::ReplayBackend(std::map<std::string, std::string> replies) : replies_(std::move(replies)) {}

ReplayBackend::ReplayBackend(const std::string& path) : replies_(load_fixture(path)) {}

std::map<std::string, std::string> load_fixture(const std::string& path) {
  std::map<std::string, std::string> replies;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open fixture file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("hash") || !j.contains("reply") ||
        !j["hash"].is_string() || !j["reply"].is_string()) {
      throw ConfigError(fmt::format("{}:{}: expected {{\"hash\": ..., \"reply\": ...}}", path, lineno));
    }
    replies[j["hash"].get<std::string>()] = j["reply"].get<std::string>();
  }
  return replies;
}

ParsedReply ReplayBackend::lookup(const PromptBundle& prompt, std::span<const VehicleId> known) {
  const auto h = prompt.hash();
  const auto it = replies_.find(h);
  if (it == replies_.end()) {
    misses_.push_back(h);
    throw BackendError("fixture has no reply for prompt " + h);
  }
  try {
    return parse_reply(it->second, prompt.schema_id, known);
  } catch (const ReplyError& e) {
    throw BackendError(std::string("fixture reply unusable: ") + e.what());
  }
}

std::vector<PrecedencePreference> ReplayBackend::opinion(const NegotiationContext& ctx, VehicleId ego) {
  const auto ids = ctx.member_ids();
  auto out = lookup(build_opinion_prompt(ctx, ego), ids).precedences;
  for (auto& p : out) p.stated_by = ego;
  return out;
}

std::vector<PrecedencePreference> ReplayBackend::resolve(const NegotiationContext& ctx,
                                                         std::span<const DisputedPair> disputed) {
  const auto ids = ctx.member_ids();
  return lookup(build_resolve_prompt(ctx, disputed), ids).precedences;
}

std::vector<VehicleId> ReplayBackend::merge(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx) {
  const auto ids = merge_ids(intra_orders);
  const auto reply = lookup(build_merge_prompt(intra_orders, ctx), ids);
  try {
    return checked_merge(reply, intra_orders);
  } catch (const ReplyError& e) {
    throw BackendError(e.what());
  }
}

}  // namespace vicoop
