#pragma once

#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace vicoop {

// Opaque vehicle identifier; unique within a scenario and stable for the run.
struct VehicleId {
  std::int64_t value = 0;

  constexpr VehicleId() = default;
  constexpr explicit VehicleId(std::int64_t v) : value(v) {}

  friend constexpr auto operator<=>(VehicleId, VehicleId) = default;
};

std::string to_string(VehicleId id);

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend constexpr Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend constexpr Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend constexpr Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend constexpr Vec2 operator*(Vec2 a, double s) { return {s * a.x, s * a.y}; }
  friend constexpr bool operator==(Vec2, Vec2) = default;

  [[nodiscard]] double norm() const { return std::hypot(x, y); }
};

constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
constexpr double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }

enum class Approach { N, S, E, W };
enum class Movement { Straight, Left, Right };
enum class MethodKind { IVD, IGN, IIGN };

std::string_view to_string(Approach a);
std::string_view to_string(Movement m);
std::string_view to_string(MethodKind m);
Approach parse_approach(std::string_view text);
Movement parse_movement(std::string_view text);
// Accepts "IVD", "IGN", "IIGN" and "I&IGN" (case-insensitive).
MethodKind parse_method(std::string_view text);

// Centerline of one lane movement through the intersection. Arc lengths are
// cumulative along `points` and strictly increasing.
class Route {
 public:
  Route() = default;
  Route(int id, Approach approach, Movement movement, int lane_index, std::vector<Vec2> points,
        double stop_line_arc);

  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] Approach approach() const { return approach_; }
  [[nodiscard]] Movement movement() const { return movement_; }
  [[nodiscard]] int lane_index() const { return lane_index_; }
  [[nodiscard]] const std::vector<Vec2>& points() const { return points_; }
  [[nodiscard]] const std::vector<double>& arcs() const { return arcs_; }
  [[nodiscard]] double stop_line_arc() const { return stop_line_arc_; }
  [[nodiscard]] double length() const { return arcs_.empty() ? 0.0 : arcs_.back(); }

  // Position and unit tangent at arc length `s`, clamped to the route ends.
  [[nodiscard]] Vec2 point_at(double s) const;
  [[nodiscard]] Vec2 heading_at(double s) const;

 private:
  [[nodiscard]] std::size_t segment_for(double s) const;

  int id_ = -1;
  Approach approach_ = Approach::S;
  Movement movement_ = Movement::Straight;
  int lane_index_ = 0;
  std::vector<Vec2> points_;
  std::vector<double> arcs_;
  double stop_line_arc_ = 0.0;
};

struct ConflictPoint {
  int route_a = -1;
  int route_b = -1;
  double arc_a = 0.0;
  double arc_b = 0.0;
  Vec2 location;
  // Arc intervals on each route where the two vehicle centers can come within
  // the contact distance; they bracket the point itself.
  std::pair<double, double> zone_a{0.0, 0.0};
  std::pair<double, double> zone_b{0.0, 0.0};

  // Arc of this point along `route`, which must be route_a or route_b.
  [[nodiscard]] double arc_on(int route) const { return route == route_a ? arc_a : arc_b; }
  [[nodiscard]] std::pair<double, double> zone_on(int route) const { return route == route_a ? zone_a : zone_b; }
  [[nodiscard]] bool involves(int route) const { return route == route_a || route == route_b; }
};

struct VehicleState {
  VehicleId id;
  Vec2 position;
  Vec2 velocity;
  int route_id = -1;
  double arc_position = 0.0;
  double length = 5.0;

  [[nodiscard]] double speed() const { return velocity.norm(); }
};

enum class ConstraintMode { AllConsecutive, ConflictingOnly };
enum class PetMode { RearToFront, FrontToFront };
// Profile: brake, wait if needed, then accelerate through the point.
// ConstantAccel: single constant acceleration over the remaining horizon.
enum class ControlLaw { Profile, ConstantAccel };

std::string_view to_string(ConstraintMode m);
std::string_view to_string(PetMode m);

// Scenario and model parameters. JSON keys mirror the field names; speeds in
// `v0_range_kmh` are km/h as in the experiment table, everything else is SI.
struct ScenarioConfig {
  int n_vehicles = 8;
  std::uint64_t seed = 0;
  std::pair<double, double> d0_range{40.0, 80.0};
  std::pair<double, double> v0_range_kmh{30.0, 31.0};
  double vehicle_length = 5.0;
  double detect_range_ivd = 80.0;
  double dt = 0.1;
  double replan_period = 1.0;
  double dt_safe = 1.5;
  double a_min = -4.5;
  double a_max = 2.5;
  double v_max = 10.0;
  int max_renegotiations = 20;
  double t_limit = 60.0;

  // geometry
  int lanes_per_direction = 1;
  double lane_width = 4.5;
  double box_half_width = 11.0;
  double approach_length = 100.0;
  double exit_length = 40.0;
  double min_same_lane_gap = 10.0;

  // influence / grouping
  bool following_augmentation = true;
  double following_gap = 25.0;
  std::string motif = "Ms";
  int k_max = 6;
  double s_min = 0.25;
  bool row_normalize = false;

  ConstraintMode constraint_mode = ConstraintMode::AllConsecutive;
  PetMode pet_mode = PetMode::RearToFront;
  double collision_factor = 0.8;
  ControlLaw control_law = ControlLaw::Profile;
  double comfort_decel = 2.0;  // m/s^2, braking rate of the profile law
  double stop_margin = 0.5;    // meters kept between a waiting vehicle and its conflict zone

  [[nodiscard]] double v0_min() const { return v0_range_kmh.first / 3.6; }
  [[nodiscard]] double v0_max() const { return v0_range_kmh.second / 3.6; }

  // Throws ConfigError describing the first violated invariant.
  void validate() const;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unknown keys are rejected so that typos surface as configuration errors.
ScenarioConfig config_from_json(const nlohmann::json& j, ScenarioConfig base = {});
void apply_config_json(ScenarioConfig& cfg, const nlohmann::json& j);
nlohmann::json config_to_json(const ScenarioConfig& cfg);
ScenarioConfig load_config(const std::string& path);

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kEpsPos = 1e-6;
inline constexpr double kEpsGeo = 1e-3;

}  // namespace vicoop

template <>
struct std::hash<vicoop::VehicleId> {
  std::size_t operator()(vicoop::VehicleId id) const noexcept {
    return std::hash<std::int64_t>{}(id.value);
  }
};
