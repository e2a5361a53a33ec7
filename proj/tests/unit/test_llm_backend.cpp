#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "vicoop/llm_backend.hpp"
#include "vicoop/sim.hpp"

using namespace vicoop;
using nlohmann::json;

namespace {

VehicleId V(std::int64_t v) { return VehicleId{v}; }

LlmConfig mock_config(const std::string& url) {
  ::setenv("VICOOP_TEST_KEY", "sk-test-123", 1);
  LlmConfig c;
  c.endpoint_url = url;
  c.model_name = "mock-model";
  c.api_key_env_var = "VICOOP_TEST_KEY";
  c.rate_limit = 0.0;
  c.request_timeout = 5.0;
  c.max_retries = 3;
  return c;
}

struct SleepLog {
  std::vector<double> delays;
  ChatClient::Sleeper sleeper() {
    return [this](double s) { delays.push_back(s); };
  }
};

NegotiationContext crossing_context(bool follower) {
  ScenarioConfig cfg;
  const auto g = build_intersection(cfg);
  const int ss = *g.find_route(Approach::S, Movement::Straight);
  const int es = *g.find_route(Approach::E, Movement::Straight);
  auto at = [&](std::int64_t id, int route, double arc) {
    VehicleState s;
    s.id = V(id);
    s.route_id = route;
    s.arc_position = arc;
    s.position = g.route(route).point_at(arc);
    s.velocity = 8.0 * g.route(route).heading_at(arc);
    return s;
  };
  std::vector<VehicleState> states{at(1, ss, 50), at(2, es, 45)};
  if (follower) states.push_back(at(3, ss, 35));
  const auto rel = following_relations(states);
  return build_context(states, g, rel);
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("config validation and json") {
  LlmConfig c;
  CHECK_NOTHROW(c.validate());
  c.max_retries = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  LlmConfig t;
  t.request_timeout = 0.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  LlmConfig temp;
  temp.temperature = -0.5;
  CHECK_THROWS_AS(temp.validate(), ConfigError);

  const auto j = to_json(LlmConfig{});
  CHECK(j.at("temperature") == 0.0);
  CHECK(to_json(llm_config_from_json(j)) == j);
  CHECK_THROWS_AS(llm_config_from_json(json{{"modle", "x"}}), ConfigError);
  CHECK(llm_config_from_json(json{{"model_name", "m2"}}).model_name == "m2");
}

TEST_CASE("prompts are complete and deterministic") {
  const auto ctx = crossing_context(false);
  const auto p = build_opinion_prompt(ctx, V(1));
  CHECK_FALSE(p.system_text.empty());
  CHECK_FALSE(p.user_text.empty());
  CHECK(schema_registered(p.schema_id));
  CHECK(p.schema_id == kOpinionSchema);
  CHECK(p.system_text.find(std::string(kPromptVersion)) != std::string::npos);
  CHECK(count(p.user_text, "- vehicles ") == 1);
  REQUIRE(ctx.conflicts.size() == 1);
  const auto again = build_opinion_prompt(ctx, V(1));
  CHECK(again.system_text == p.system_text);
  CHECK(again.user_text == p.user_text);
  CHECK(again.hash() == p.hash());
  CHECK(p.hash().size() == 16);
  CHECK(build_opinion_prompt(ctx, V(2)).hash() != p.hash());
  CHECK(p.user_text.find(std::string(schema_text(kOpinionSchema))) != std::string::npos);

  const auto with_follower = crossing_context(true);
  REQUIRE(with_follower.following.size() == 1);
  const auto pf = build_opinion_prompt(with_follower, V(1));
  CHECK(pf.user_text.find("leader 1 -> follower 3") != std::string::npos);
}

TEST_CASE("merge prompt blocks") {
  const auto ctx = crossing_context(false);
  const std::vector<PassOrder> two{{{V(1)}, 0, 1, "rule", false}, {{V(2)}, 1, 1, "rule", false}};
  const auto p = build_merge_prompt(two, ctx);
  CHECK(p.schema_id == kMergeSchema);
  const auto block1 = p.user_text.find("(1)");
  const auto block2 = p.user_text.find("(2)");
  const auto block3 = p.user_text.find("(3)");
  REQUIRE(block1 != std::string::npos);
  REQUIRE(block2 != std::string::npos);
  REQUIRE(block3 != std::string::npos);
  CHECK(block1 < block2);
  CHECK(block2 < block3);
  const auto first_block = p.user_text.substr(block1, block2 - block1);
  CHECK(first_block.find("group 0") != std::string::npos);
  CHECK(first_block.find("group 1") != std::string::npos);
  CHECK(p.user_text.substr(block3).find("none") != std::string::npos);
  CHECK(build_merge_prompt(two, ctx).user_text == p.user_text);

  const auto fctx = crossing_context(true);
  const std::vector<PassOrder> with{{{V(1), V(3)}, 0, 1, "rule", false}, {{V(2)}, 1, 1, "rule", false}};
  const auto pf = build_merge_prompt(with, fctx);
  CHECK(pf.user_text.substr(pf.user_text.find("(3)")).find("none") == std::string::npos);
}

TEST_CASE("resolve prompt lists the disputed pairs") {
  const auto ctx = crossing_context(false);
  const std::vector<DisputedPair> d{{V(1), V(2), ConsensusLevel::None, 1, 1}};
  const auto p = build_resolve_prompt(ctx, d);
  CHECK(p.schema_id == kResolveSchema);
  CHECK(p.user_text.find("1 and 2") != std::string::npos);
}

TEST_CASE("reply parsing") {
  const std::vector<VehicleId> known{V(1), V(2), V(3)};
  const std::string fenced =
      "Sure. Vehicle 1 is closer.\n```json\n{\"precedences\": [{\"first\": 1, \"second\": 2, \"reason\": \"closer\"}]}\n"
      "```\nLet me know.";
  const auto r = parse_reply(fenced, kOpinionSchema, known);
  REQUIRE(r.precedences.size() == 1);
  CHECK(r.precedences[0].first == V(1));
  CHECK(r.precedences[0].second == V(2));
  CHECK(r.precedences[0].rationale == "closer");

  // Braces inside strings do not confuse extraction.
  const auto tricky = parse_reply(R"(note {not json} then {"precedences": [{"first": 2, "second": 3, "reason": "a } b"}]})",
                                  kOpinionSchema, known);
  CHECK(tricky.precedences[0].rationale == "a } b");

  CHECK_THROWS_AS(parse_reply("", kOpinionSchema, known), ParseFailure);
  CHECK_THROWS_AS(parse_reply("no json here", kOpinionSchema, known), ParseFailure);
  try {
    parse_reply(R"({"precedences": [{"first": 1, "second": 9}]})", kOpinionSchema, known);
    FAIL("expected SchemaViolation");
  } catch (const SchemaViolation& e) {
    CHECK(e.path().find("precedences[0]") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_reply(R"({"precedences": [{"first": 1, "second": 1}]})", kOpinionSchema, known),
                  SchemaViolation);
  CHECK_THROWS_AS(parse_reply(R"({"precedences": [{"first": "1", "second": 2}]})", kOpinionSchema, known),
                  SchemaViolation);
  CHECK_THROWS_AS(parse_reply(R"({"precedence": []})", kOpinionSchema, known), SchemaViolation);
  CHECK_THROWS_AS(parse_reply(R"({"order": [{"id": 1}]})", kMergeSchema, known), SchemaViolation);

  const auto m = parse_reply(R"([1] {"order": [{"id": 2, "group": 1}, {"id": 1, "group": 0}]})", kMergeSchema, known);
  REQUIRE(m.order.size() == 2);
  CHECK(m.order[0] == MergeEntry{V(2), 1});
}

TEST_CASE("render and parse round trip") {
  auto rng = seeded_rng(71, "round-trip");
  std::vector<VehicleId> known;
  for (int k = 1; k <= 9; ++k) known.push_back(V(k * 11));
  for (int trial = 0; trial < 300; ++trial) {
    ParsedReply r;
    if (rng.uniform() < 0.5) {
      r.schema_id = std::string(kMergeSchema);
      for (int k = 0; k < 1 + static_cast<int>(rng.below(9)); ++k) {
        r.order.push_back({known[rng.below(known.size())], static_cast<int>(rng.below(4))});
      }
    } else {
      r.schema_id = std::string(rng.uniform() < 0.5 ? kOpinionSchema : kResolveSchema);
      for (int k = 0; k < static_cast<int>(rng.below(6)); ++k) {
        const auto a = rng.below(known.size());
        const auto b = (a + 1 + rng.below(known.size() - 1)) % known.size();
        std::string why = rng.uniform() < 0.5 ? "" : "gap \"quoted\" {x}";
        r.precedences.push_back({known[a], known[b], VehicleId{}, why});
      }
    }
    const auto back = parse_reply(render_reply(r), r.schema_id, known);
    CHECK(back.order == r.order);
    REQUIRE(back.precedences.size() == r.precedences.size());
    for (std::size_t i = 0; i < r.precedences.size(); ++i) {
      CHECK(back.precedences[i].first == r.precedences[i].first);
      CHECK(back.precedences[i].second == r.precedences[i].second);
      CHECK(back.precedences[i].rationale == r.precedences[i].rationale);
    }
    CHECK(render_reply(back) == render_reply(r));
  }
}

TEST_CASE("chat request shape and happy path") {
  oracle::MockChatServer server([](const oracle::MockChatServer::Request&, int) {
    return std::make_pair(200, oracle::completion_body("hello there"));
  });
  ChatClient client(mock_config(server.url()));
  const auto r = client.chat(PromptBundle{"sys", "usr", std::string(kOpinionSchema)});
  CHECK(r.text == "hello there");
  REQUIRE(r.attempts.size() == 1);
  CHECK(r.attempts[0].status == 200);
  CHECK(r.attempts[0].outcome == "ok");

  const auto reqs = server.requests();
  REQUIRE(reqs.size() == 1);
  CHECK(reqs[0].path == "/v1/chat/completions");
  CHECK(reqs[0].authorization == "Bearer sk-test-123");
  CHECK(reqs[0].content_type.find("application/json") == 0);
  const auto body = json::parse(reqs[0].body);
  CHECK(body.at("model") == "mock-model");
  CHECK(body.at("temperature") == 0.0);
  REQUIRE(body.at("messages").size() == 2);
  CHECK(body["messages"][0] == json{{"role", "system"}, {"content", "sys"}});
  CHECK(body["messages"][1] == json{{"role", "user"}, {"content", "usr"}});
}

TEST_CASE("429 twice then success") {
  oracle::MockChatServer server([](const oracle::MockChatServer::Request&, int index) {
    if (index < 2) return std::make_pair(429, std::string(R"({"error":"slow down"})"));
    return std::make_pair(200, oracle::completion_body("ok"));
  });
  SleepLog sleeps;
  ChatClient client(mock_config(server.url()), sleeps.sleeper());
  const auto r = client.chat(PromptBundle{"s", "u", std::string(kOpinionSchema)});
  CHECK(r.text == "ok");
  REQUIRE(r.attempts.size() == 3);
  CHECK(r.attempts[0].status == 429);
  CHECK(r.attempts[1].status == 429);
  CHECK(r.attempts[2].status == 200);
  REQUIRE(sleeps.delays.size() == 2);
  // base 1 s, factor 2, jitter up to 25%
  CHECK(sleeps.delays[0] >= 1.0);
  CHECK(sleeps.delays[0] <= 1.25);
  CHECK(sleeps.delays[1] >= 2.0);
  CHECK(sleeps.delays[1] <= 2.5);
  CHECK(server.request_count() == 3);
}

TEST_CASE("server errors exhaust retries") {
  oracle::MockChatServer server([](const oracle::MockChatServer::Request&, int) {
    return std::make_pair(503, std::string(R"({"error":"down"})"));
  });
  SleepLog sleeps;
  ChatClient client(mock_config(server.url()), sleeps.sleeper());
  try {
    client.chat(PromptBundle{"s", "u", std::string(kOpinionSchema)});
    FAIL("expected RetriesExhausted");
  } catch (const TimeoutError&) {
    FAIL("not a timeout");
  } catch (const RetriesExhausted& e) {
    CHECK(e.attempts().size() == 4);
  }
  CHECK(server.request_count() == 4);
  CHECK(sleeps.delays.size() == 3);
}

TEST_CASE("unreachable endpoint") {
  int port = 0;
  {
    oracle::MockChatServer gone([](const oracle::MockChatServer::Request&, int) {
      return std::make_pair(200, std::string("{}"));
    });
    port = gone.port();
  }
  auto cfg = mock_config("http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions");
  cfg.max_retries = 2;
  SleepLog sleeps;
  ChatClient client(cfg, sleeps.sleeper());
  try {
    client.chat(PromptBundle{"s", "u", std::string(kOpinionSchema)});
    FAIL("expected RetriesExhausted");
  } catch (const RetriesExhausted& e) {
    CHECK(e.attempts().size() == 3);
    for (const auto& a : e.attempts()) CHECK(a.status == 0);
  }
}

TEST_CASE("slow endpoint times out") {
  oracle::MockChatServer server([](const oracle::MockChatServer::Request&, int) {
    std::this_thread::sleep_for(std::chrono::milliseconds(900));
    return std::make_pair(200, oracle::completion_body("late"));
  });
  auto cfg = mock_config(server.url());
  cfg.request_timeout = 0.2;
  cfg.max_retries = 1;
  SleepLog sleeps;
  ChatClient client(cfg, sleeps.sleeper());
  CHECK_THROWS_AS(client.chat(PromptBundle{"s", "u", std::string(kOpinionSchema)}), TimeoutError);
}

TEST_CASE("authentication failures are not retried") {
  oracle::MockChatServer server([](const oracle::MockChatServer::Request&, int) {
    return std::make_pair(401, std::string(R"({"error":"bad key"})"));
  });
  ChatClient client(mock_config(server.url()));
  CHECK_THROWS_AS(client.chat(PromptBundle{"s", "u", std::string(kOpinionSchema)}), AuthFailure);
  CHECK(server.request_count() == 1);

  auto cfg = mock_config(server.url());
  cfg.api_key_env_var = "VICOOP_TEST_KEY_UNSET";
  ::unsetenv("VICOOP_TEST_KEY_UNSET");
  ChatClient keyless(cfg);
  CHECK_THROWS_AS(keyless.chat(PromptBundle{"s", "u", std::string(kOpinionSchema)}), AuthFailure);
  CHECK(server.request_count() == 1);
}

TEST_CASE("other client errors and malformed bodies") {
  oracle::MockChatServer server([](const oracle::MockChatServer::Request&, int index) {
    if (index == 0) return std::make_pair(400, std::string(R"({"error":"bad"})"));
    return std::make_pair(200, std::string(R"({"choices": []})"));
  });
  ChatClient client(mock_config(server.url()));
  CHECK_THROWS_AS(client.chat(PromptBundle{"s", "u", std::string(kOpinionSchema)}), TransportError);
  CHECK_THROWS_AS(client.chat(PromptBundle{"s", "u", std::string(kOpinionSchema)}), TransportError);
  CHECK(server.request_count() == 2);
}

TEST_CASE("rate limit spaces requests") {
  oracle::MockChatServer server([](const oracle::MockChatServer::Request&, int) {
    return std::make_pair(200, oracle::completion_body("ok"));
  });
  auto cfg = mock_config(server.url());
  cfg.rate_limit = 20.0;
  ChatClient client(cfg);
  const auto start = std::chrono::steady_clock::now();
  for (int k = 0; k < 5; ++k) client.chat(PromptBundle{"s", "u", std::string(kOpinionSchema)});
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(elapsed >= 0.19);
}

TEST_CASE("llm backend asks once more after an unusable reply") {
  oracle::MockChatServer server([](const oracle::MockChatServer::Request& req, int) {
    const auto body = json::parse(req.body);
    if (body["messages"].size() == 2) return std::make_pair(200, oracle::completion_body("I think vehicle 1."));
    return std::make_pair(200, oracle::completion_body(R"({"precedences": [{"first": 1, "second": 2}]})"));
  });
  auto client = std::make_shared<ChatClient>(mock_config(server.url()));
  const std::string transcript = "test_llm_transcript.jsonl";
  std::remove(transcript.c_str());
  LlmBackend backend(client, std::make_shared<TranscriptWriter>(transcript));
  const auto ctx = crossing_context(false);
  const auto prefs = backend.opinion(ctx, V(2));
  REQUIRE(prefs.size() == 1);
  CHECK(prefs[0].first == V(1));
  CHECK(prefs[0].stated_by == V(2));
  CHECK(backend.requests() == 2);
  const auto reqs = server.requests();
  REQUIRE(reqs.size() == 2);
  const auto second = json::parse(reqs[1].body);
  REQUIRE(second["messages"].size() == 4);
  CHECK(second["messages"][2]["role"] == "assistant");
  CHECK(second["messages"][3]["content"].get<std::string>().find("schema") != std::string::npos);

  // The transcript replays through the fixture backend.
  ReplayBackend replay(transcript);
  CHECK(replay.size() == 1);
  CHECK(replay.opinion(ctx, V(2))[0].first == V(1));
  CHECK_THROWS_AS(replay.opinion(ctx, V(1)), BackendError);
  CHECK(replay.misses().size() == 1);
}

TEST_CASE("llm backend gives up after a second unusable reply") {
  oracle::MockChatServer server([](const oracle::MockChatServer::Request&, int) {
    return std::make_pair(200, oracle::completion_body("still prose"));
  });
  LlmBackend backend(std::make_shared<ChatClient>(mock_config(server.url())));
  CHECK_THROWS_AS(backend.opinion(crossing_context(false), V(1)), BackendError);
  CHECK(server.request_count() == 2);
}

TEST_CASE("fixture files") {
  const std::string path = "test_fixture.jsonl";
  {
    std::ofstream out(path);
    out << R"({"hash": "00000000000000aa", "reply": "{\"precedences\": []}"})" << "\n\n";
  }
  CHECK(load_fixture(path).size() == 1);
  {
    std::ofstream out(path);
    out << "not json\n";
  }
  CHECK_THROWS_AS(load_fixture(path), ConfigError);
  CHECK_THROWS_AS(load_fixture("missing_fixture.jsonl"), ConfigError);
}

TEST_CASE("recorded replies replay a negotiation exactly") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ctx = oracle::random_context(seed, 6);
    oracle::RecordingBackend recorder;
    const auto expected = intra_group_order(recorder, ctx);
    ReplayBackend replay(recorder.replies);
    const auto got = intra_group_order(replay, ctx);
    CHECK(got.ordered_ids == expected.ordered_ids);
    CHECK(replay.misses().empty());
  }
}
