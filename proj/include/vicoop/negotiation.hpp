#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vicoop/core.hpp"
#include "vicoop/geometry.hpp"
#include "vicoop/influence.hpp"
#include "vicoop/rng.hpp"

namespace vicoop {

inline constexpr const char* kNegotiationSchema = "vicoop.negotiation.v1";

// "first passes the shared conflict point before second", as stated by one
// vehicle (or by the resolver / merger).
struct PrecedencePreference {
  VehicleId first;
  VehicleId second;
  VehicleId stated_by;
  std::string rationale;
};

enum class ConsensusLevel { Exact, Basic, None };
std::string_view to_string(ConsensusLevel level);

struct PassOrder {
  std::vector<VehicleId> ordered_ids;
  std::optional<std::size_t> group;  // empty for the global order
  int rounds_used = 0;
  std::string backend_name;
  bool fallback = false;
};

struct MemberInfo {
  VehicleId id;
  VehicleState state;
  double distance_to_conflict = 0.0;  // to the vehicle's nearest unpassed conflict point
  double arrival = 0.0;               // estimated arrival there at current speed, seconds
  int group = -1;
};

struct ConflictInfo {
  VehicleId a;
  VehicleId b;
  ConflictPoint point;
  double distance_a = 0.0;
  double distance_b = 0.0;
  double speed_a = 0.0;
  double speed_b = 0.0;
  double arrival_a = 0.0;
  double arrival_b = 0.0;
};

struct NegotiationContext {
  std::vector<MemberInfo> members;
  std::vector<ConflictInfo> conflicts;
  std::vector<FollowingRelation> following;
  std::vector<PrecedencePreference> agreed;  // carried over from earlier commitments
  std::vector<std::string> feedback;         // violations reported in the previous round

  [[nodiscard]] const MemberInfo* member(VehicleId id) const;
  [[nodiscard]] bool has_member(VehicleId id) const { return member(id) != nullptr; }
  [[nodiscard]] std::vector<VehicleId> member_ids() const;
  // Restriction to `ids`: conflicts, following relations and agreements that
  // only reference those members.
  [[nodiscard]] NegotiationContext restricted_to(std::span<const VehicleId> ids) const;
};

// Time to cover `distance` at constant `speed`; speeds below 0.1 m/s are
// treated as 0.1 m/s so stopped vehicles get a large but finite estimate.
double arrival_at_current_speed(double distance, double speed);

// Pairs of group members whose routes share a conflict point that neither
// vehicle has reached yet.
std::vector<ConflictInfo> conflict_pairs(std::span<const VehicleState> group,
                                         const IntersectionGeometry& geometry);

NegotiationContext build_context(std::span<const VehicleState> members,
                                 const IntersectionGeometry& geometry,
                                 std::span<const FollowingRelation> following,
                                 std::span<const PrecedencePreference> agreed = {});

struct DisputedPair {
  VehicleId a;
  VehicleId b;
  ConsensusLevel level = ConsensusLevel::None;
  int votes_a_first = 0;
  int votes_b_first = 0;
};

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class IncompleteOpinion : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class UnresolvableDispute : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Pluggable decision maker. Implementations never mutate the context and
// either return or throw BackendError.
class NegotiatorBackend {
 public:
  virtual ~NegotiatorBackend() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  virtual std::vector<PrecedencePreference> opinion(const NegotiationContext& ctx, VehicleId ego) = 0;
  virtual std::vector<PrecedencePreference> resolve(const NegotiationContext& ctx,
                                                    std::span<const DisputedPair> disputed) = 0;
  virtual std::vector<VehicleId> merge(std::span<const PassOrder> intra_orders,
                                       const NegotiationContext& ctx) = 0;
};

// Deterministic first-come-first-served oracle. Pairwise precedence goes to the
// earlier estimated arrival at the shared point (ties: lower id); agreed
// precedences and following relations are kept. Where pairwise FCFS would close
// a cycle, the pair with the smallest arrival margin yields.
class RuleBackend : public NegotiatorBackend {
 public:
  [[nodiscard]] std::string name() const override { return "rule"; }
  std::vector<PrecedencePreference> opinion(const NegotiationContext& ctx, VehicleId ego) override;
  std::vector<PrecedencePreference> resolve(const NegotiationContext& ctx,
                                            std::span<const DisputedPair> disputed) override;
  std::vector<VehicleId> merge(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx) override;

  // Total order of the context's members the rule opinions are consistent with.
  [[nodiscard]] static std::vector<VehicleId> rank(const NegotiationContext& ctx);
};

// Replays callbacks; used for canned and adversarial fixtures.
class ScriptedBackend : public NegotiatorBackend {
 public:
  using OpinionFn = std::function<std::vector<PrecedencePreference>(const NegotiationContext&, VehicleId, int call)>;
  using ResolveFn = std::function<std::vector<PrecedencePreference>(const NegotiationContext&,
                                                                    std::span<const DisputedPair>, int call)>;
  using MergeFn = std::function<std::vector<VehicleId>(std::span<const PassOrder>, const NegotiationContext&, int call)>;

  ScriptedBackend(std::string name, OpinionFn opinion, ResolveFn resolve, MergeFn merge);

  [[nodiscard]] std::string name() const override { return name_; }
  std::vector<PrecedencePreference> opinion(const NegotiationContext& ctx, VehicleId ego) override;
  std::vector<PrecedencePreference> resolve(const NegotiationContext& ctx,
                                            std::span<const DisputedPair> disputed) override;
  std::vector<VehicleId> merge(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx) override;

  [[nodiscard]] int opinion_calls() const { return opinion_calls_; }
  [[nodiscard]] int resolve_calls() const { return resolve_calls_; }
  [[nodiscard]] int merge_calls() const { return merge_calls_; }

 private:
  std::string name_;
  OpinionFn opinion_;
  ResolveFn resolve_;
  MergeFn merge_;
  int opinion_calls_ = 0;
  int resolve_calls_ = 0;
  int merge_calls_ = 0;
};

// Rule opinions perturbed by seeded noise whose rate grows with group size:
// each vehicle flips each pair with probability p(n) and omits one pair with
// probability p(n), where p(n) = min(p_max, slope * n). Models negotiators that
// disagree more often in larger groups.
class NoisyRuleBackend : public NegotiatorBackend {
 public:
  NoisyRuleBackend(std::uint64_t seed, double slope = 0.04, double p_max = 0.95);

  [[nodiscard]] std::string name() const override { return "noisy"; }
  std::vector<PrecedencePreference> opinion(const NegotiationContext& ctx, VehicleId ego) override;
  std::vector<PrecedencePreference> resolve(const NegotiationContext& ctx,
                                            std::span<const DisputedPair> disputed) override;
  std::vector<VehicleId> merge(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx) override;

  [[nodiscard]] double noise_for(std::size_t group_size) const;

 private:
  SeededStream rng_;
  double slope_;
  double p_max_;
};

using Opinions = std::map<VehicleId, std::vector<PrecedencePreference>>;

// One opinion set per member; each must cover every conflict pair exactly
// once and mention only members (IncompleteOpinion otherwise).
Opinions generate_opinions(NegotiatorBackend& backend, const NegotiationContext& ctx);

struct ConsensusTally {
  ConsensusLevel level = ConsensusLevel::None;
  int votes_a_first = 0;
  int votes_b_first = 0;
};

// Exact when unanimous, Basic when the majority direction holds at least
// ceil(2/3 of the votes), None otherwise.
ConsensusTally tally_consensus(const Opinions& opinions, VehicleId a, VehicleId b);
ConsensusLevel classify_consensus(const Opinions& opinions, VehicleId a, VehicleId b);

// Final precedence for each disputed pair; rejected replies (missing pairs,
// unknown vehicles, cycles with `settled` or the following relations) are
// retried up to `max_retries` times before UnresolvableDispute.
std::vector<PrecedencePreference> resolve_divergence(NegotiatorBackend& backend, const NegotiationContext& ctx,
                                                     std::span<const DisputedPair> disputed,
                                                     std::span<const PrecedencePreference> settled,
                                                     int max_retries = 3);

struct Violation {
  enum class Kind { Omission, Addition, Duplicate, FollowingOrder, Cycle, GroupOrder };
  Kind kind;
  std::vector<VehicleId> vehicles;
  std::string message;
};
std::string_view to_string(Violation::Kind kind);

// Rule 1 (no vehicle added), rule 2 (no follower before its leader) and
// rule 3 (no cycle among the precedences plus following relations).
std::vector<Violation> validate_precedences(std::span<const PrecedencePreference> precedences,
                                            std::span<const VehicleId> group,
                                            std::span<const FollowingRelation> following);

// Same rules for a complete order: every member exactly once, leaders before
// followers, and no precedence contradicting the order.
std::vector<Violation> validate_order(std::span<const VehicleId> order, std::span<const VehicleId> group,
                                      std::span<const FollowingRelation> following,
                                      std::span<const PrecedencePreference> precedences = {});

// Adds GroupOrder violations when an intra order is not a subsequence of `order`.
std::vector<Violation> validate_merge(std::span<const VehicleId> order, std::span<const PassOrder> intra_orders,
                                      std::span<const FollowingRelation> following);

// Topological order of `members` under precedences + following relations,
// unconstrained vehicles by (arrival, id). Empty optional when cyclic.
std::optional<std::vector<VehicleId>> linearize(std::span<const PrecedencePreference> precedences,
                                                const NegotiationContext& ctx);

// Merge of group orders by earliest arrival that keeps each group's order and
// places leaders before followers; if both cannot hold, following wins.
std::vector<VehicleId> fallback_merge(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx);

using NegotiationLog = std::vector<nlohmann::json>;

struct NegotiationOptions {
  int max_renegotiations = 20;
  int resolve_retries = 3;
};

// Opinions -> consensus -> divergence resolution -> validation, renegotiating
// on violations. After max_renegotiations + 1 failed rounds the rule order is
// returned with `fallback` set.
PassOrder intra_group_order(NegotiatorBackend& backend, const NegotiationContext& ctx,
                            const NegotiationOptions& options = {}, std::optional<std::size_t> group = std::nullopt,
                            NegotiationLog* log = nullptr);

// Global order from pairwise-disjoint group orders, validated like the
// intra-group stage and falling back to fallback_merge.
PassOrder inter_group_order(NegotiatorBackend& backend, std::span<const PassOrder> intra_orders,
                            const NegotiationContext& ctx, const NegotiationOptions& options = {},
                            NegotiationLog* log = nullptr);

nlohmann::json to_json(const PrecedencePreference& p);
nlohmann::json to_json(const Violation& v);
nlohmann::json to_json(const PassOrder& o);

}  // namespace vicoop
