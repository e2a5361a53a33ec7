#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vicoop/core.hpp"
#include "vicoop/sim.hpp"

namespace vicoop {

// Gap between the first vehicle clearing `conflict_point` and the second one
// reaching it. RearToFront clears at crossing + length / crossing speed (speed
// floored at 0.1 m/s), FrontToFront at the crossing itself. Empty when either
// vehicle never crossed the point.
std::optional<double> post_encroachment_time(const SimTrace& trace, VehicleId a, VehicleId b, int conflict_point,
                                             PetMode mode);

struct PetRecord {
  VehicleId first;
  VehicleId second;
  int conflict_point = -1;
  double pet = 0.0;
};

// Every conflicting pair that crossed a shared point, in crossing order.
std::vector<PetRecord> all_pets(const SimTrace& trace, PetMode mode);

struct DelayRecord {
  VehicleId vehicle;
  double delay = 0.0;
  bool censored = false;  // never completed; delay = t_limit - free_flow_time
};

// Completion time minus free-flow time at v0, never negative.
DelayRecord delay(const SimTrace& trace, VehicleId vehicle);

struct RunSummary {
  std::string method;
  std::size_t n_vehicles = 0;
  std::uint64_t seed = 0;
  bool collided = false;
  std::vector<double> pet_values;
  std::optional<double> min_pet;
  double avg_speed = 0.0;  // mean over vehicles of distance travelled / time on the road
  std::vector<double> delays;
  double mean_delay = 0.0;
  int censored = 0;
  std::vector<int> negotiation_rounds;  // one per episode
  std::vector<NegotiationEpisode> episodes;
  int rounds_total = 0;
  int fallback_count = 0;
};

RunSummary summarize(const SimTrace& trace);

// method,n_vehicles,seed,collided,min_pet,mean_speed,mean_delay,rounds_total,fallbacks
void write_summary_header(std::ostream& out);
void write_summary_row(std::ostream& out, const RunSummary& s);

struct Stats {
  std::size_t count = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

// Order-independent: values are sorted before summation.
Stats stats_of(std::span<const double> values);

struct AggregateRow {
  std::string method;
  std::size_t n_vehicles = 0;
  std::size_t runs = 0;
  std::size_t collided_runs = 0;
  double collision_rate = 0.0;
  Stats pet;
  double mean_speed = 0.0;
  double mean_delay = 0.0;
  Stats rounds;
  int fallbacks = 0;
};

// One row per (method, n_vehicles), sorted by method then vehicle count.
std::vector<AggregateRow> aggregate(std::span<const RunSummary> runs);
void write_aggregate_csv(std::ostream& out, std::span<const AggregateRow> rows);

struct RoundsRow {
  std::string method;
  std::string scope;  // "intra" or "inter"
  std::size_t group_size = 0;
  Stats rounds;
};

// Negotiation rounds per episode keyed by the number of vehicles negotiating.
std::vector<RoundsRow> rounds_by_group_size(std::span<const RunSummary> runs);
void write_rounds_csv(std::ostream& out, std::span<const RoundsRow> rows);

}  // namespace vicoop
