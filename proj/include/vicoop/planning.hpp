#pragma once

#include <span>
#include <stdexcept>
#include <functional>
#include <vector>

#include "vicoop/core.hpp"

namespace vicoop {

class InfeasibleTarget : public std::runtime_error {
 public:
  InfeasibleTarget(double earliest_possible, double requested);
  double earliest_possible;  // arrival time (relative) when braking at a_min
  double requested;
};

// Minimum time to cover `distance` from speed `speed`, accelerating at a_max
// up to v_max and cruising after that.
double earliest_arrival(double speed, double distance, double a_max, double v_max);
double earliest_arrival(const VehicleState& state, double distance, double a_max, double v_max);

struct ScheduleEntry {
  VehicleId id;
  double target_time = 0.0;
  bool pinned = false;
};

struct CrossingSchedule {
  std::vector<ScheduleEntry> entries;  // in pass order

  [[nodiscard]] const ScheduleEntry* find(VehicleId id) const;
};

struct ScheduleInput {
  VehicleId id;
  double earliest = 0.0;  // absolute earliest arrival at the vehicle's conflict point
  bool pinned = false;    // committed vehicles keep their own trajectory
};

// Decides whether the consecutive pair (before, after) is constrained. Only
// consulted in ConflictingOnly mode.
using PairPredicate = std::function<bool(VehicleId before, VehicleId after)>;

// Extra lower bound on the target of entry `index` given the targets already
// fixed for entries [0, index); used for conflict-point-specific separation.
using HoldFn = std::function<double(std::size_t index, std::span<const ScheduleEntry> fixed)>;

// t_1 = earliest_1, t_{i+1} = max(earliest_{i+1}, t_i + dt_safe) for each
// constrained consecutive pair. Pinned vehicles keep their earliest time.
CrossingSchedule schedule_times(std::span<const ScheduleInput> ordered, double dt_safe,
                                ConstraintMode mode = ConstraintMode::AllConsecutive,
                                const PairPredicate& constrained = {}, const HoldFn& hold = {});

// Convenience overload over plain arrival times (all pairs constrained).
std::vector<double> schedule_times(std::span<const double> arrivals, double dt_safe);

struct Limits {
  double a_min = -4.5;
  double a_max = 2.5;
  double v_max = 10.0;
};

// Constant acceleration that covers `distance` in `time_to_target` seconds
// (distance = v*tau + a*tau^2/2), clamped to [a_min, a_max] and so the speed
// stays within [0, v_max] over the next `dt`. Throws InfeasibleTarget when
// even a_min reaches the point before the target.
double acceleration_command(double speed, double distance, double time_to_target,
                            const Limits& limits, double dt);

// Command for a vehicle with no remaining conflict point: track v_max.
double cruise_command(double speed, const Limits& limits, double dt);

struct ProfileCommand {
  double accel = 0.0;
  double crossing_speed = 0.0;  // speed when reaching the point under the profile
  bool waiting = false;         // the profile includes a full stop
};

// Decelerate at `decel` (harder, up to |a_min|, when a stop is needed before
// `stop_limit` meters), wait if necessary, then accelerate at a_max (capped
// at v_max) so the point `distance` ahead is reached `time_to_target` from now.
// A vehicle that is already late accelerates. Throws InfeasibleTarget when the
// target needs a stop that cannot happen within `stop_limit`.
ProfileCommand profile_command(double speed, double distance, double time_to_target, double stop_limit,
                               const Limits& limits, double dt, double decel = 2.0);

}  // namespace vicoop
