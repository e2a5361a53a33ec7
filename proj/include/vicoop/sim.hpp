#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vicoop/core.hpp"
#include "vicoop/geometry.hpp"
#include "vicoop/negotiation.hpp"
#include "vicoop/planning.hpp"

namespace vicoop {

inline constexpr const char* kTraceSchema = "vicoop.trace.v1";

class PlacementFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Initial states drawn from seeded_rng(seed, "scenario"): approach uniform,
// route uniform within the approach, d0 and v0 uniform in the configured
// ranges. Vehicles sharing an entry lane start at least min_same_lane_gap apart.
std::vector<VehicleState> generate_scenario(std::size_t n, std::uint64_t seed, const ScenarioConfig& config,
                                            const IntersectionGeometry& geometry);

struct SimVehicle {
  VehicleId id;
  int route_id = -1;
  double arc = 0.0;
  double speed = 0.0;
  double length = 5.0;
  bool completed = false;
  double completion_time = 0.0;
  std::vector<int> passed;  // conflict point indices already crossed
};

struct Crossing {
  double time = 0.0;
  VehicleId vehicle;
  int conflict_point = -1;
  double speed = 0.0;
};

struct Collision {
  double time = 0.0;
  VehicleId a;
  VehicleId b;
  Vec2 position;  // midpoint of the two centers
  double distance = 0.0;
};

struct Completion {
  double time = 0.0;
  VehicleId vehicle;
};

struct World {
  double time = 0.0;
  std::vector<SimVehicle> vehicles;
  std::shared_ptr<const IntersectionGeometry> geometry;
  std::set<std::pair<VehicleId, VehicleId>> contacts;  // pairs currently in contact

  [[nodiscard]] VehicleState state(std::size_t i) const;
  [[nodiscard]] std::vector<VehicleState> active_states() const;
  [[nodiscard]] bool all_completed() const;
};

World make_world(std::span<const VehicleState> initial, std::shared_ptr<const IntersectionGeometry> geometry);

struct StepEvents {
  std::vector<Crossing> crossings;
  std::vector<Completion> completions;
};

// Semi-implicit integration along the route: v' = clamp(v + a dt, 0, v_max),
// s' = s + v' dt. `commands` is indexed like world.vehicles (completed entries
// are ignored).
StepEvents step(World& world, std::span<const double> commands, double dt, double v_max);

// Pairs of active vehicles whose centers are closer than factor * length.
std::vector<std::pair<VehicleId, VehicleId>> contacts(const World& world, double factor);

// New contact episodes since the previous call (updates world.contacts).
std::vector<Collision> detect_collisions(World& world, double factor);

// Leader/follower pairs: the leader sits on the follower's path ahead of it,
// moving the same way.
std::vector<FollowingRelation> path_following(const World& world);

struct VehicleInfo {
  VehicleId id;
  int route_id = -1;
  double v0 = 0.0;
  double d0 = 0.0;
  double length = 5.0;
  double route_remaining = 0.0;  // arc from the start position to the route end
  double free_flow_time = 0.0;   // route_remaining / v0
  double distance_travelled = 0.0;  // filled at the end of the run
};

struct NegotiationEpisode {
  double time = 0.0;
  std::string scope;  // "intra" or "inter"
  std::optional<std::size_t> group;
  std::size_t group_size = 0;
  int rounds = 0;
  bool fallback = false;
};

struct ScheduledTarget {
  VehicleId id;
  int conflict_point = -1;
  double target_time = 0.0;
  bool pinned = false;
};

struct SimTrace {
  MethodKind method = MethodKind::IIGN;
  std::uint64_t seed = 0;
  std::string backend;
  ScenarioConfig config;
  std::vector<VehicleInfo> vehicles;
  std::vector<Crossing> crossings;
  std::vector<Collision> collisions;
  std::vector<Completion> completions;
  std::vector<NegotiationEpisode> episodes;
  std::vector<std::vector<ScheduledTarget>> schedules;  // one per replan tick
  std::vector<nlohmann::json> records;                  // the JSONL stream, header first
  double end_time = 0.0;

  [[nodiscard]] int fallback_count() const;
  [[nodiscard]] const VehicleInfo* vehicle(VehicleId id) const;
};

void write_jsonl(const SimTrace& trace, std::ostream& out);
// Records of a JSONL trace file (one JSON value per line).
std::vector<nlohmann::json> read_jsonl(const std::string& path);

struct RunOptions {
  bool snapshots = true;  // per-step world snapshots in the record stream
  NegotiationOptions negotiation;
};

// Full closed loop for one method. Backend failures inside negotiation
// degrade to the rule order and are recorded as fallback events.
SimTrace run(MethodKind method, std::span<const VehicleState> scenario, NegotiatorBackend& backend,
             const ScenarioConfig& config, std::uint64_t seed = 0, const RunOptions& options = {});

}  // namespace vicoop
