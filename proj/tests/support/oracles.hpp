#pragma once

// Independent reference implementations and input generators for the tests.
// Nothing here calls the code under test except where a test needs real
// geometry or a real scenario as input.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vicoop/geometry.hpp"
#include "vicoop/grouping.hpp"
#include "vicoop/influence.hpp"
#include "vicoop/llm_backend.hpp"
#include "vicoop/negotiation.hpp"
#include "vicoop/rng.hpp"

namespace oracle {

using vicoop::Matrix;
using vicoop::SeededStream;
using vicoop::Vec2;
using vicoop::VehicleId;

// ---------------------------------------------------------------- generators

// n x n, zero diagonal, each off-diagonal edge present with probability
// `density` and weight uniform in (0, 1].
Matrix random_digraph(SeededStream& rng, int n, double density);

// Like random_digraph but with a random scale and a mix of dense and sparse
// rows, used as raw cumulative influence input for grouping.
Matrix random_influence(SeededStream& rng, int n);

// Random state pair components.
Vec2 random_vec(SeededStream& rng, double scale);

// Scenario states on the default geometry.
struct RandomScene {
  std::shared_ptr<vicoop::IntersectionGeometry> geometry;
  std::vector<vicoop::VehicleState> states;
};
RandomScene random_scene(std::uint64_t seed, int n);

// Negotiation context over every vehicle of a random scene, with the
// geometric following relations.
vicoop::NegotiationContext random_context(std::uint64_t seed, int n);

// Random linear extension of the following relations of `ctx`.
std::vector<VehicleId> random_extension(const vicoop::NegotiationContext& ctx, SeededStream& rng);

// ---------------------------------------------------------------- oracles

// Direct influence evaluated through explicit angles: theta between the
// relative velocity and the line of sight, phi between v_j and the line of
// sight, both from acos of clamped cosines.
double direct_influence_by_angles(Vec2 xi, Vec2 vi, Vec2 xj, Vec2 vj);

// F[i][j] summed over simple paths found by scanning permutations of the
// intermediate nodes (deduplicated as node sequences).
Matrix cumulative_by_permutations(const Matrix& a);

// Motif adjacency by enumerating every injective node map, collecting the
// distinct instances keyed by (mapped edge set, unordered anchor images) and
// adding each instance's mean mapped weight to both anchor entries.
Matrix motif_adjacency_by_instances(const Matrix& w, const vicoop::Motif& motif);

// t_1 = a_1, t_k = max(a_k, t_{k-1} + dt).
std::vector<double> schedule_recurrence(std::span<const double> arrivals, double dt_safe);

// Time at which a vehicle starting at `arc0` with `speed` and a constant
// command `accel` reaches `point`, integrated with the simulator's update rule
// at a step 10x finer than `dt`. -1 when it never gets there.
double fine_crossing_time(double arc0, double speed, double accel, double v_max, double point, double dt);

// k-way merge of group orders by the arrival time of each group's next head.
std::vector<VehicleId> merge_by_arrival(std::span<const std::vector<VehicleId>> groups,
                                        const std::map<VehicleId, double>& arrival);

bool is_subsequence(std::span<const VehicleId> part, std::span<const VehicleId> whole);

// ---------------------------------------------------------------- backends

// Replies that break the protocol at random: cycles, omitted or duplicated
// pairs, unknown or self precedences, and merges that drop, repeat or
// reorder vehicles. Some replies are valid.
std::unique_ptr<vicoop::ScriptedBackend> adversarial_backend(std::uint64_t seed);

// Disagrees with the rule opinion on each pair with probability
// min(0.95, 0.04 * group size); never emits malformed replies.
std::unique_ptr<vicoop::ScriptedBackend> disagreeing_backend(std::uint64_t seed);

// Rule backend that also records prompt hash -> rendered reply, so that a
// replay or mock server can answer the same prompts.
class RecordingBackend : public vicoop::NegotiatorBackend {
 public:
  [[nodiscard]] std::string name() const override { return "recording"; }
  std::vector<vicoop::PrecedencePreference> opinion(const vicoop::NegotiationContext& ctx, VehicleId ego) override;
  std::vector<vicoop::PrecedencePreference> resolve(const vicoop::NegotiationContext& ctx,
                                                    std::span<const vicoop::DisputedPair> disputed) override;
  std::vector<VehicleId> merge(std::span<const vicoop::PassOrder> intra_orders,
                               const vicoop::NegotiationContext& ctx) override;

  std::map<std::string, std::string> replies;

 private:
  vicoop::RuleBackend rule_;
};

// ---------------------------------------------------------------- mock server

// Chat-completion endpoint on 127.0.0.1 (ephemeral port) running on its own
// thread. The handler sees every request body and returns (status, body).
class MockChatServer {
 public:
  struct Request {
    std::string body;
    std::string authorization;
    std::string content_type;
    std::string path;
  };
  using Handler = std::function<std::pair<int, std::string>(const Request&, int index)>;

  explicit MockChatServer(Handler handler);
  ~MockChatServer();
  MockChatServer(const MockChatServer&) = delete;
  MockChatServer& operator=(const MockChatServer&) = delete;

  [[nodiscard]] std::string url() const;
  [[nodiscard]] int port() const { return port_; }
  [[nodiscard]] std::vector<Request> requests() const;
  [[nodiscard]] int request_count() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

// Body of a successful chat completion whose message content is `content`.
std::string completion_body(const std::string& content);

// Answers from recorded replies by hashing the request's messages exactly as
// PromptBundle::hash does; 404 for unknown prompts. Replies are wrapped in
// prose and a code fence.
MockChatServer::Handler replay_handler(const std::map<std::string, std::string>& replies);

}  // namespace oracle
