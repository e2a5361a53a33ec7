#include "vicoop/core.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace vicoop {

namespace {

std::string upper(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return out;
}

}  // namespace

std::string to_string(VehicleId id) { return std::to_string(id.value); }

std::string_view to_string(Approach a) {
  switch (a) {
    case Approach::N: return "N";
    case Approach::S: return "S";
    case Approach::E: return "E";
    case Approach::W: return "W";
  }
  return "?";
}

std::string_view to_string(Movement m) {
  switch (m) {
    case Movement::Straight: return "straight";
    case Movement::Left: return "left";
    case Movement::Right: return "right";
  }
  return "?";
}

std::string_view to_string(MethodKind m) {
  switch (m) {
    case MethodKind::IVD: return "IVD";
    case MethodKind::IGN: return "IGN";
    case MethodKind::IIGN: return "IIGN";
  }
  return "?";
}

std::string_view to_string(ConstraintMode m) {
  return m == ConstraintMode::AllConsecutive ? "all_consecutive" : "conflicting_only";
}

std::string_view to_string(PetMode m) {
  return m == PetMode::RearToFront ? "rear_to_front" : "front_to_front";
}

Approach parse_approach(std::string_view text) {
  const auto u = upper(text);
  if (u == "N") return Approach::N;
  if (u == "S") return Approach::S;
  if (u == "E") return Approach::E;
  if (u == "W") return Approach::W;
  throw std::invalid_argument("unknown approach: " + std::string(text));
}

Movement parse_movement(std::string_view text) {
  const auto u = upper(text);
  if (u == "STRAIGHT") return Movement::Straight;
  if (u == "LEFT") return Movement::Left;
  if (u == "RIGHT") return Movement::Right;
  throw std::invalid_argument("unknown movement: " + std::string(text));
}

MethodKind parse_method(std::string_view text) {
  const auto u = upper(text);
  if (u == "IVD") return MethodKind::IVD;
  if (u == "IGN") return MethodKind::IGN;
  if (u == "IIGN" || u == "I&IGN") return MethodKind::IIGN;
  throw std::invalid_argument("unknown method: " + std::string(text));
}

Route::Route(int id, Approach approach, Movement movement, int lane_index,
             std::vector<Vec2> points, double stop_line_arc)
    : id_(id),
      approach_(approach),
      movement_(movement),
      lane_index_(lane_index),
      points_(std::move(points)),
      stop_line_arc_(stop_line_arc) {
  if (points_.size() < 2) throw std::invalid_argument("Route needs at least two points");
  arcs_.reserve(points_.size());
  arcs_.push_back(0.0);
  for (std::size_t i = 1; i < points_.size(); ++i) {
    const double seg = (points_[i] - points_[i - 1]).norm();
    if (!(seg > 0.0)) throw std::invalid_argument("Route arc lengths must strictly increase");
    arcs_.push_back(arcs_.back() + seg);
  }
  if (!(stop_line_arc_ < length())) throw std::invalid_argument("stop line beyond route end");
}

std::size_t Route::segment_for(double s) const {
  auto it = std::upper_bound(arcs_.begin(), arcs_.end(), s);
  std::size_t idx = it == arcs_.begin() ? 0 : static_cast<std::size_t>(it - arcs_.begin()) - 1;
  return std::min(idx, points_.size() - 2);
}

Vec2 Route::point_at(double s) const {
  s = std::clamp(s, 0.0, length());
  const auto i = segment_for(s);
  const double t = (s - arcs_[i]) / (arcs_[i + 1] - arcs_[i]);
  return points_[i] + t * (points_[i + 1] - points_[i]);
}

Vec2 Route::heading_at(double s) const {
  s = std::clamp(s, 0.0, length());
  const auto i = segment_for(s);
  const Vec2 d = points_[i + 1] - points_[i];
  return (1.0 / d.norm()) * d;
}

void ScenarioConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  require(n_vehicles >= 1, "n_vehicles must be >= 1");
  require(d0_range.first >= 0.0 && d0_range.first <= d0_range.second, "d0_range must be ordered and nonnegative");
  require(d0_range.second < approach_length, "d0_range must fit inside approach_length");
  require(v0_range_kmh.first >= 0.0 && v0_range_kmh.first <= v0_range_kmh.second, "v0_range must be ordered");
  require(v0_max() <= v_max + 1e-12, "v0_range exceeds v_max");
  require(vehicle_length > 0.0, "vehicle_length must be positive");
  require(detect_range_ivd > 0.0, "detect_range_ivd must be positive");
  require(dt > 0.0, "dt must be positive");
  require(replan_period >= dt, "replan_period must be >= dt");
  require(dt_safe >= 0.0, "dt_safe must be nonnegative");
  require(a_min < 0.0 && a_max > 0.0, "need a_min < 0 < a_max");
  require(v_max > 0.0, "v_max must be positive");
  require(max_renegotiations >= 0, "max_renegotiations must be >= 0");
  require(t_limit > 0.0, "t_limit must be positive");
  require(lanes_per_direction == 1 || lanes_per_direction == 2, "lanes_per_direction must be 1 or 2");
  require(lane_width > 0.0, "lane_width must be positive");
  require(box_half_width > lanes_per_direction * lane_width, "box_half_width too small for the lanes");
  require(exit_length > vehicle_length, "exit_length must exceed vehicle_length");
  require(min_same_lane_gap >= 0.0, "min_same_lane_gap must be nonnegative");
  require(following_gap >= 0.0, "following_gap must be nonnegative");
  require(k_max >= 2, "k_max must be >= 2");
  require(collision_factor > 0.0, "collision_factor must be positive");
  require(comfort_decel > 0.0 && comfort_decel <= -a_min, "comfort_decel must lie in (0, -a_min]");
  require(stop_margin >= 0.0, "stop_margin must be nonnegative");
}

namespace {

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  out = j.at(key).get<T>();
}

void read_range(const nlohmann::json& j, const char* key, std::pair<double, double>& out) {
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw ConfigError(std::string(key) + " must be [lo, hi]");
  out = {v[0].get<double>(), v[1].get<double>()};
}

}  // namespace

void apply_config_json(ScenarioConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known = {
      "n_vehicles", "seed", "d0_range", "v0_range", "vehicle_length", "detect_range_ivd", "dt",
      "replan_period", "dt_safe", "a_min", "a_max", "v_max", "max_renegotiations", "t_limit",
      "lanes_per_direction", "lane_width", "box_half_width", "approach_length", "exit_length",
      "min_same_lane_gap", "following_augmentation", "following_gap", "motif", "k_max", "s_min",
      "row_normalize", "constraint_mode", "pet_mode", "collision_factor", "control_law", "comfort_decel",
      "stop_margin"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key: " + key);
  }
  try {
    if (j.contains("n_vehicles")) read(j, "n_vehicles", cfg.n_vehicles);
    if (j.contains("seed")) read(j, "seed", cfg.seed);
    if (j.contains("d0_range")) read_range(j, "d0_range", cfg.d0_range);
    if (j.contains("v0_range")) read_range(j, "v0_range", cfg.v0_range_kmh);
    if (j.contains("vehicle_length")) read(j, "vehicle_length", cfg.vehicle_length);
    if (j.contains("detect_range_ivd")) read(j, "detect_range_ivd", cfg.detect_range_ivd);
    if (j.contains("dt")) read(j, "dt", cfg.dt);
    if (j.contains("replan_period")) read(j, "replan_period", cfg.replan_period);
    if (j.contains("dt_safe")) read(j, "dt_safe", cfg.dt_safe);
    if (j.contains("a_min")) read(j, "a_min", cfg.a_min);
    if (j.contains("a_max")) read(j, "a_max", cfg.a_max);
    if (j.contains("v_max")) read(j, "v_max", cfg.v_max);
    if (j.contains("max_renegotiations")) read(j, "max_renegotiations", cfg.max_renegotiations);
    if (j.contains("t_limit")) read(j, "t_limit", cfg.t_limit);
    if (j.contains("lanes_per_direction")) read(j, "lanes_per_direction", cfg.lanes_per_direction);
    if (j.contains("lane_width")) read(j, "lane_width", cfg.lane_width);
    if (j.contains("box_half_width")) read(j, "box_half_width", cfg.box_half_width);
    if (j.contains("approach_length")) read(j, "approach_length", cfg.approach_length);
    if (j.contains("exit_length")) read(j, "exit_length", cfg.exit_length);
    if (j.contains("min_same_lane_gap")) read(j, "min_same_lane_gap", cfg.min_same_lane_gap);
    if (j.contains("following_augmentation")) read(j, "following_augmentation", cfg.following_augmentation);
    if (j.contains("following_gap")) read(j, "following_gap", cfg.following_gap);
    if (j.contains("motif")) read(j, "motif", cfg.motif);
    if (j.contains("k_max")) read(j, "k_max", cfg.k_max);
    if (j.contains("s_min")) read(j, "s_min", cfg.s_min);
    if (j.contains("row_normalize")) read(j, "row_normalize", cfg.row_normalize);
    if (j.contains("collision_factor")) read(j, "collision_factor", cfg.collision_factor);
    if (j.contains("constraint_mode")) {
      const auto m = j.at("constraint_mode").get<std::string>();
      if (m == "all_consecutive") cfg.constraint_mode = ConstraintMode::AllConsecutive;
      else if (m == "conflicting_only") cfg.constraint_mode = ConstraintMode::ConflictingOnly;
      else throw ConfigError("constraint_mode must be all_consecutive or conflicting_only");
    }
    if (j.contains("comfort_decel")) read(j, "comfort_decel", cfg.comfort_decel);
    if (j.contains("stop_margin")) read(j, "stop_margin", cfg.stop_margin);
    if (j.contains("control_law")) {
      const auto m = j.at("control_law").get<std::string>();
      if (m == "profile") cfg.control_law = ControlLaw::Profile;
      else if (m == "constant_accel") cfg.control_law = ControlLaw::ConstantAccel;
      else throw ConfigError("control_law must be profile or constant_accel");
    }
    if (j.contains("pet_mode")) {
      const auto m = j.at("pet_mode").get<std::string>();
      if (m == "rear_to_front") cfg.pet_mode = PetMode::RearToFront;
      else if (m == "front_to_front") cfg.pet_mode = PetMode::FrontToFront;
      else throw ConfigError("pet_mode must be rear_to_front or front_to_front");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
}

ScenarioConfig config_from_json(const nlohmann::json& j, ScenarioConfig base) {
  apply_config_json(base, j);
  base.validate();
  return base;
}

nlohmann::json config_to_json(const ScenarioConfig& cfg) {
  return {
      {"n_vehicles", cfg.n_vehicles},
      {"seed", cfg.seed},
      {"d0_range", {cfg.d0_range.first, cfg.d0_range.second}},
      {"v0_range", {cfg.v0_range_kmh.first, cfg.v0_range_kmh.second}},
      {"vehicle_length", cfg.vehicle_length},
      {"detect_range_ivd", cfg.detect_range_ivd},
      {"dt", cfg.dt},
      {"replan_period", cfg.replan_period},
      {"dt_safe", cfg.dt_safe},
      {"a_min", cfg.a_min},
      {"a_max", cfg.a_max},
      {"v_max", cfg.v_max},
      {"max_renegotiations", cfg.max_renegotiations},
      {"t_limit", cfg.t_limit},
      {"lanes_per_direction", cfg.lanes_per_direction},
      {"lane_width", cfg.lane_width},
      {"box_half_width", cfg.box_half_width},
      {"approach_length", cfg.approach_length},
      {"exit_length", cfg.exit_length},
      {"min_same_lane_gap", cfg.min_same_lane_gap},
      {"following_augmentation", cfg.following_augmentation},
      {"following_gap", cfg.following_gap},
      {"motif", cfg.motif},
      {"k_max", cfg.k_max},
      {"s_min", cfg.s_min},
      {"row_normalize", cfg.row_normalize},
      {"constraint_mode", std::string(to_string(cfg.constraint_mode))},
      {"pet_mode", std::string(to_string(cfg.pet_mode))},
      {"collision_factor", cfg.collision_factor},
      {"control_law", cfg.control_law == ControlLaw::Profile ? "profile" : "constant_accel"},
      {"comfort_decel", cfg.comfort_decel},
      {"stop_margin", cfg.stop_margin},
  };
}

ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace vicoop
