#include <doctest.h>

#include <array>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "vicoop/core.hpp"
#include "vicoop/geometry.hpp"
#include "vicoop/rng.hpp"

using namespace vicoop;

namespace {

std::array<std::uint64_t, 16> first16(std::uint64_t seed, std::string_view label) {
  auto rng = seeded_rng(seed, label);
  std::array<std::uint64_t, 16> out{};
  for (auto& v : out) v = rng();
  return out;
}

int differing(const std::array<std::uint64_t, 16>& a, const std::array<std::uint64_t, 16>& b) {
  int n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

// Distance from p to the polyline of `route`.
double distance_to_route(const Route& route, Vec2 p) {
  double best = 1e300;
  const auto& pts = route.points();
  for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
    const Vec2 d = pts[k + 1] - pts[k];
    const double t = std::clamp(dot(p - pts[k], d) / dot(d, d), 0.0, 1.0);
    best = std::min(best, (pts[k] + t * d - p).norm());
  }
  return best;
}

}  // namespace

TEST_CASE("seeded streams repeat per (seed, label)") {
  CHECK(first16(0, "scenario") == first16(0, "scenario"));
  CHECK(differing(first16(0, "scenario"), first16(1, "scenario")) == 16);
  CHECK(differing(first16(0, "scenario"), first16(0, "kmeans")) == 16);
}

TEST_CASE("stream draws follow the documented counter construction") {
  // key = mix(mix(seed) ^ fnv(label)); draw[n] = mix(key + (n+1) * golden)
  const std::uint64_t seed = 42;
  const std::string_view label = "check";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  CHECK(fnv1a64(label) == h);
  auto mix = [](std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  CHECK(splitmix64_mix(12345) == mix(12345));
  const std::uint64_t key = mix(mix(seed) ^ h);
  auto rng = seeded_rng(seed, label);
  for (std::uint64_t n = 0; n < 8; ++n) CHECK(rng() == mix(key + (n + 1) * 0x9E3779B97F4A7C15ULL));
  CHECK(rng.draws() == 8);
}

TEST_CASE("uniform draws stay in range") {
  auto rng = seeded_rng(3, "range");
  for (int k = 0; k < 10000; ++k) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const auto b = rng.below(7);
    CHECK(b < 7);
    const double w = rng.uniform(-2.0, 3.0);
    CHECK(w >= -2.0);
    CHECK(w < 3.0);
  }
}

TEST_CASE("scenario defaults") {
  const ScenarioConfig c;
  CHECK(c.d0_range.first == 40.0);
  CHECK(c.d0_range.second == 80.0);
  CHECK(c.v0_range_kmh.first == 30.0);
  CHECK(c.v0_range_kmh.second == 31.0);
  CHECK(c.vehicle_length == 5.0);
  CHECK(c.detect_range_ivd == 80.0);
  CHECK(c.max_renegotiations == 20);
  CHECK(c.dt == 0.1);
  CHECK(c.replan_period == 1.0);
  CHECK(c.dt_safe == 1.5);
  CHECK(c.a_min == -4.5);
  CHECK(c.a_max == 2.5);
  CHECK(c.v_max == 10.0);
  CHECK(c.t_limit == 60.0);
  CHECK(c.v0_min() == doctest::Approx(30.0 / 3.6));
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config json round trip and rejection") {
  ScenarioConfig c;
  c.n_vehicles = 4;
  c.dt_safe = 2.0;
  c.constraint_mode = ConstraintMode::ConflictingOnly;
  const auto j = config_to_json(c);
  const auto back = config_from_json(j);
  CHECK(config_to_json(back) == j);

  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"dt_saef", 1.0}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"dt", -0.1}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"d0_range", {80.0, 40.0}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"dt", "fast"}}), ConfigError);

  ScenarioConfig bad;
  bad.vehicle_length = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("method names") {
  CHECK(parse_method("IVD") == MethodKind::IVD);
  CHECK(parse_method("ign") == MethodKind::IGN);
  CHECK(parse_method("I&IGN") == MethodKind::IIGN);
  CHECK(parse_method("iign") == MethodKind::IIGN);
  CHECK_THROWS(parse_method("IXGN"));
  for (auto m : {MethodKind::IVD, MethodKind::IGN, MethodKind::IIGN}) CHECK(parse_method(to_string(m)) == m);
}

TEST_CASE("route arcs") {
  Route r(0, Approach::S, Movement::Straight, 0, {{0, 0}, {3, 4}, {3, 10}}, 2.0);
  CHECK(r.length() == doctest::Approx(11.0));
  CHECK(r.arcs()[1] == doctest::Approx(5.0));
  CHECK(r.point_at(5.0).x == doctest::Approx(3.0));
  CHECK(r.point_at(8.0).y == doctest::Approx(7.0));
  CHECK(r.point_at(-1.0) == Vec2{0, 0});
  CHECK(r.point_at(100.0).y == doctest::Approx(10.0));
  CHECK(r.heading_at(7.0).y == doctest::Approx(1.0));
}

TEST_CASE("geometry invariants") {
  for (int lanes : {1, 2}) {
    ScenarioConfig c;
    c.lanes_per_direction = lanes;
    const auto g = build_intersection(c);
    // One lane: three movements each; two lanes: straight+left and straight+right.
    CHECK(g.routes.size() == (lanes == 1 ? 12u : 16u));
    for (const auto& r : g.routes) {
      for (std::size_t k = 1; k < r.arcs().size(); ++k) CHECK(r.arcs()[k] > r.arcs()[k - 1]);
      CHECK(r.stop_line_arc() < r.length());
      CHECK(r.stop_line_arc() == doctest::Approx(c.approach_length));
    }
    for (const auto& cp : g.conflict_points) {
      CHECK(distance_to_route(g.route(cp.route_a), cp.location) < kEpsGeo);
      CHECK(distance_to_route(g.route(cp.route_b), cp.location) < kEpsGeo);
      CHECK(cp.zone_a.first <= cp.arc_a);
      CHECK(cp.arc_a <= cp.zone_a.second);
      CHECK(cp.zone_b.first <= cp.arc_b);
      CHECK(cp.arc_b <= cp.zone_b.second);
    }
    // Same entry lane never conflicts; opposing straights never meet.
    const auto s_straight = g.find_route(Approach::S, Movement::Straight);
    const auto s_left = g.find_route(Approach::S, Movement::Left);
    const auto n_straight = g.find_route(Approach::N, Movement::Straight);
    const auto e_straight = g.find_route(Approach::E, Movement::Straight);
    REQUIRE(s_straight);
    REQUIRE(s_left);
    REQUIRE(n_straight);
    REQUIRE(e_straight);
    if (lanes == 1) CHECK_FALSE(g.conflict_between(*s_straight, *s_left));
    CHECK_FALSE(g.conflict_between(*s_straight, *n_straight));
    CHECK(g.conflict_between(*s_straight, *e_straight));
    CHECK(g.conflict_between(*s_left, *n_straight));
    CHECK(g.conflict_index(*s_straight, *e_straight) == g.conflict_index(*e_straight, *s_straight));
  }
}

TEST_CASE("perpendicular straights cross at the lane offsets") {
  const ScenarioConfig c;
  const auto g = build_intersection(c);
  const auto s = g.find_route(Approach::S, Movement::Straight);
  const auto e = g.find_route(Approach::E, Movement::Straight);
  const auto* cp = g.conflict_between(*s, *e);
  REQUIRE(cp);
  // Right-hand traffic: northbound lane at x = +w/2, westbound at y = +w/2.
  CHECK(cp->location.x == doctest::Approx(c.lane_width / 2));
  CHECK(cp->location.y == doctest::Approx(c.lane_width / 2));
}

TEST_CASE("config file loading") {
  const std::string path = "test_core_config.json";
  {
    std::ofstream out(path);
    out << R"({"n_vehicles": 3, "v0_range": [30, 31], "motif": "M4"})";
  }
  const auto c = load_config(path);
  CHECK(c.n_vehicles == 3);
  CHECK(c.motif == "M4");
  CHECK_THROWS_AS(load_config("does_not_exist.json"), ConfigError);
}
