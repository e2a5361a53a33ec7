#include "vicoop/planning.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace vicoop {

InfeasibleTarget::InfeasibleTarget(double earliest, double req)
    : std::runtime_error("target " + std::to_string(req) + " s is unreachable; braking at a_min arrives after " +
                         std::to_string(earliest) + " s"),
      earliest_possible(earliest),
      requested(req) {}

double earliest_arrival(double speed, double distance, double a_max, double v_max) {
  if (distance < 0.0) throw std::invalid_argument("earliest_arrival: distance must be >= 0");
  if (distance == 0.0) return 0.0;
  speed = std::clamp(speed, 0.0, v_max);
  const double t_acc = (v_max - speed) / a_max;
  const double d_acc = speed * t_acc + 0.5 * a_max * t_acc * t_acc;
  if (distance <= d_acc) {
    // distance = v t + a t^2 / 2
    return (-speed + std::sqrt(speed * speed + 2.0 * a_max * distance)) / a_max;
  }
  return t_acc + (distance - d_acc) / v_max;
}

double earliest_arrival(const VehicleState& state, double distance, double a_max, double v_max) {
  return earliest_arrival(state.speed(), distance, a_max, v_max);
}

const ScheduleEntry* CrossingSchedule::find(VehicleId id) const {
  for (const auto& e : entries) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

CrossingSchedule schedule_times(std::span<const ScheduleInput> ordered, double dt_safe,
                                ConstraintMode mode, const PairPredicate& constrained, const HoldFn& hold) {
  CrossingSchedule out;
  out.entries.reserve(ordered.size());
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    const auto& in = ordered[i];
    double t = in.earliest;
    if (i > 0 && !in.pinned) {
      const auto& prev = ordered[i - 1];
      const bool active = mode == ConstraintMode::AllConsecutive || !constrained ||
                          constrained(prev.id, in.id);
      if (active) t = std::max(t, out.entries.back().target_time + dt_safe);
    }
    if (hold && !in.pinned) t = std::max(t, hold(i, out.entries));
    out.entries.push_back({in.id, t, in.pinned});
  }
  return out;
}

std::vector<double> schedule_times(std::span<const double> arrivals, double dt_safe) {
  std::vector<double> out;
  out.reserve(arrivals.size());
  for (double a : arrivals) {
    out.push_back(out.empty() ? a : std::max(a, out.back() + dt_safe));
  }
  return out;
}

double acceleration_command(double speed, double distance, double time_to_target, const Limits& limits,
                            double dt) {
  if (!(time_to_target > 0.0)) throw std::invalid_argument("acceleration_command: target must lie ahead");
  distance = std::max(distance, 0.0);

  // Braking at a_min: if the vehicle cannot stop before the point it reaches
  // it at tau_brake no matter what; a later target is then infeasible.
  const double disc = speed * speed + 2.0 * limits.a_min * distance;
  if (disc >= 0.0) {
    const double tau_brake = (-speed + std::sqrt(disc)) / limits.a_min;
    if (tau_brake < time_to_target - 1e-9) throw InfeasibleTarget(tau_brake, time_to_target);
  }

  const double tau = time_to_target;
  double a = 2.0 * (distance - speed * tau) / (tau * tau);
  a = std::clamp(a, limits.a_min, limits.a_max);
  // Keep v + a dt inside [0, v_max].
  a = std::min(a, (limits.v_max - speed) / dt);
  a = std::max(a, -speed / dt);
  return std::clamp(a, limits.a_min, limits.a_max);
}

double cruise_command(double speed, const Limits& limits, double dt) {
  return std::clamp((limits.v_max - speed) / dt, limits.a_min, limits.a_max);
}

namespace {

// Arrival time and speed after braking at `b` for t1 seconds, then
// accelerating at a_max (capped at v_max).
std::pair<double, double> profile_arrival(double v, double d, double b, double t1, const Limits& lim) {
  const double v1 = std::max(v - b * t1, 0.0);
  const double s1 = v * t1 - 0.5 * b * t1 * t1;
  if (s1 >= d) {
    const double disc = std::max(v * v - 2.0 * b * d, 0.0);
    return {(v - std::sqrt(disc)) / b, std::sqrt(disc)};
  }
  const double rest = d - s1;
  const double t = t1 + earliest_arrival(v1, rest, lim.a_max, lim.v_max);
  const double vc = std::min(lim.v_max, std::sqrt(v1 * v1 + 2.0 * lim.a_max * rest));
  return {t, vc};
}

}  // namespace

ProfileCommand profile_command(double speed, double distance, double time_to_target, double stop_limit,
                               const Limits& limits, double dt, double decel) {
  speed = std::clamp(speed, 0.0, limits.v_max);
  distance = std::max(distance, 0.0);
  ProfileCommand out;
  const auto [t_fast, v_fast] = profile_arrival(speed, distance, decel, 0.0, limits);
  if (t_fast >= time_to_target - 1e-9) {
    out.accel = cruise_command(speed, limits, dt);
    out.crossing_speed = v_fast;
    return out;
  }

  const double t_stop = speed / decel;
  const auto [t_slow, v_slow] = profile_arrival(speed, distance, decel, t_stop, limits);
  if (t_slow < time_to_target) {
    // Needs a full stop before the point.
    out.waiting = true;
    const double stop_dist = speed * speed / (2.0 * decel);
    double b = decel;
    if (stop_dist > stop_limit) {
      if (stop_limit <= 0.0 || speed * speed / (2.0 * stop_limit) > -limits.a_min) {
        const double disc = speed * speed + 2.0 * limits.a_min * distance;
        const double tau_brake = disc >= 0.0 ? (-speed + std::sqrt(disc)) / limits.a_min : time_to_target;
        throw InfeasibleTarget(tau_brake, time_to_target);
      }
      b = speed * speed / (2.0 * stop_limit);
    }
    if (speed > 1e-9) {
      out.accel = std::max(-b, -speed / dt);
    } else {
      // Stopped: launch once waiting another step would make the vehicle late.
      const double launch = earliest_arrival(0.0, distance, limits.a_max, limits.v_max);
      out.accel = launch + dt > time_to_target ? std::min(limits.a_max, limits.v_max / dt) : 0.0;
    }
    out.crossing_speed = std::min(limits.v_max, std::sqrt(2.0 * limits.a_max * std::min(distance, stop_limit)));
    return out;
  }

  double lo = 0.0;
  double hi = t_stop;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (profile_arrival(speed, distance, decel, mid, limits).first < time_to_target ? lo : hi) = mid;
  }
  const double t1 = hi;
  out.crossing_speed = profile_arrival(speed, distance, decel, t1, limits).second;
  const double go = cruise_command(speed, limits, dt);
  out.accel = t1 >= dt ? -decel : (t1 / dt) * -decel + (1.0 - t1 / dt) * go;
  out.accel = std::clamp(out.accel, std::max(limits.a_min, -speed / dt), limits.a_max);
  return out;
}

}  // namespace vicoop
