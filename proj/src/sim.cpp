#include "vicoop/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>

#include "vicoop/grouping.hpp"
#include "vicoop/influence.hpp"
#include "vicoop/rng.hpp"

namespace vicoop {

std::vector<VehicleState> generate_scenario(std::size_t n, std::uint64_t seed, const ScenarioConfig& config,
                                            const IntersectionGeometry& geometry) {
  if (n == 0) throw std::invalid_argument("generate_scenario: n must be >= 1");
  auto rng = seeded_rng(seed, "scenario");
  const Approach approaches[] = {Approach::N, Approach::S, Approach::E, Approach::W};

  std::vector<VehicleState> out;
  std::vector<double> d0s;
  for (std::size_t i = 0; i < n; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      const Approach ap = approaches[rng.below(4)];
      std::vector<int> candidates;
      for (const auto& r : geometry.routes) {
        if (r.approach() == ap) candidates.push_back(r.id());
      }
      const Route& route = geometry.route(candidates[rng.below(candidates.size())]);
      const double d0 = rng.uniform(config.d0_range.first, config.d0_range.second);
      const double v0 = rng.uniform(config.v0_min(), config.v0_max());

      bool clear = true;
      for (std::size_t k = 0; k < out.size() && clear; ++k) {
        const Route& other = geometry.route(out[k].route_id);
        if (other.approach() == route.approach() && other.lane_index() == route.lane_index() &&
            std::abs(d0s[k] - d0) < config.min_same_lane_gap) {
          clear = false;
        }
      }
      if (!clear) continue;

      VehicleState s;
      s.id = VehicleId{static_cast<std::int64_t>(i)};
      s.route_id = route.id();
      s.arc_position = route.stop_line_arc() - d0;
      s.position = route.point_at(s.arc_position);
      s.velocity = v0 * route.heading_at(s.arc_position);
      s.length = config.vehicle_length;
      out.push_back(s);
      d0s.push_back(d0);
      placed = true;
    }
    if (!placed) {
      throw PlacementFailure("could not place vehicle " + std::to_string(i) + " after 1000 attempts");
    }
  }
  return out;
}

VehicleState World::state(std::size_t i) const {
  const auto& v = vehicles.at(i);
  const Route& r = geometry->route(v.route_id);
  VehicleState s;
  s.id = v.id;
  s.route_id = v.route_id;
  s.arc_position = v.arc;
  s.position = r.point_at(v.arc);
  s.velocity = v.speed * r.heading_at(v.arc);
  s.length = v.length;
  return s;
}

std::vector<VehicleState> World::active_states() const {
  std::vector<VehicleState> out;
  for (std::size_t i = 0; i < vehicles.size(); ++i) {
    if (!vehicles[i].completed) out.push_back(state(i));
  }
  return out;
}

bool World::all_completed() const {
  return std::all_of(vehicles.begin(), vehicles.end(), [](const SimVehicle& v) { return v.completed; });
}

World make_world(std::span<const VehicleState> initial, std::shared_ptr<const IntersectionGeometry> geometry) {
  World w;
  w.geometry = std::move(geometry);
  for (const auto& s : initial) {
    SimVehicle v;
    v.id = s.id;
    v.route_id = s.route_id;
    v.arc = s.arc_position;
    v.speed = s.speed();
    v.length = s.length;
    w.vehicles.push_back(v);
  }
  return w;
}

StepEvents step(World& world, std::span<const double> commands, double dt, double v_max) {
  if (commands.size() != world.vehicles.size()) throw std::invalid_argument("step: one command per vehicle");
  StepEvents ev;
  const auto& g = *world.geometry;
  for (std::size_t i = 0; i < world.vehicles.size(); ++i) {
    auto& v = world.vehicles[i];
    if (v.completed) continue;
    const double s0 = v.arc;
    v.speed = std::clamp(v.speed + commands[i] * dt, 0.0, v_max);
    const double s1 = s0 + v.speed * dt;
    v.arc = s1;
    if (s1 <= s0) continue;
    auto at = [&](double s) { return world.time + dt * (s - s0) / (s1 - s0); };
    for (std::size_t k = 0; k < g.conflict_points.size(); ++k) {
      const auto& cp = g.conflict_points[k];
      if (!cp.involves(v.route_id)) continue;
      const double a = cp.arc_on(v.route_id);
      if (a > s0 && a <= s1 && std::find(v.passed.begin(), v.passed.end(), static_cast<int>(k)) == v.passed.end()) {
        v.passed.push_back(static_cast<int>(k));
        ev.crossings.push_back({at(a), v.id, static_cast<int>(k), v.speed});
      }
    }
    const double len = g.route(v.route_id).length();
    if (s1 >= len) {
      v.completed = true;
      v.completion_time = at(len);
      ev.completions.push_back({v.completion_time, v.id});
    }
  }
  std::stable_sort(ev.crossings.begin(), ev.crossings.end(),
                   [](const Crossing& a, const Crossing& b) { return a.time < b.time; });
  world.time += dt;
  return ev;
}

std::vector<std::pair<VehicleId, VehicleId>> contacts(const World& world, double factor) {
  std::vector<std::pair<VehicleId, VehicleId>> out;
  const auto n = world.vehicles.size();
  std::vector<Vec2> pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!world.vehicles[i].completed) pos[i] = world.geometry->route(world.vehicles[i].route_id).point_at(world.vehicles[i].arc);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (world.vehicles[i].completed) continue;
    for (std::size_t j = i + 1; j < n; ++j) {
      if (world.vehicles[j].completed) continue;
      const double threshold = factor * 0.5 * (world.vehicles[i].length + world.vehicles[j].length);
      if ((pos[i] - pos[j]).norm() < threshold) {
        const auto a = world.vehicles[i].id;
        const auto b = world.vehicles[j].id;
        out.emplace_back(std::min(a, b), std::max(a, b));
      }
    }
  }
  return out;
}

std::vector<Collision> detect_collisions(World& world, double factor) {
  const auto now = contacts(world, factor);
  std::set<std::pair<VehicleId, VehicleId>> current(now.begin(), now.end());
  std::vector<Collision> out;
  auto find = [&](VehicleId id) -> const SimVehicle& {
    for (const auto& v : world.vehicles) {
      if (v.id == id) return v;
    }
    throw std::out_of_range("unknown vehicle");
  };
  for (const auto& pair : current) {
    if (world.contacts.count(pair)) continue;
    const auto& a = find(pair.first);
    const auto& b = find(pair.second);
    const Vec2 pa = world.geometry->route(a.route_id).point_at(a.arc);
    const Vec2 pb = world.geometry->route(b.route_id).point_at(b.arc);
    out.push_back({world.time, pair.first, pair.second, 0.5 * (pa + pb), (pa - pb).norm()});
  }
  world.contacts = std::move(current);
  return out;
}

std::vector<FollowingRelation> path_following(const World& world) {
  std::vector<FollowingRelation> out;
  const auto& g = *world.geometry;
  for (const auto& f : world.vehicles) {
    if (f.completed) continue;
    const Route& route = g.route(f.route_id);
    const SimVehicle* best = nullptr;
    double best_gap = std::numeric_limits<double>::infinity();
    for (const auto& l : world.vehicles) {
      if (l.completed || l.id == f.id) continue;
      const Route& lr = g.route(l.route_id);
      const Vec2 p = lr.point_at(l.arc);
      const auto s = project_onto(route, p, 0.5);
      if (!s || *s <= f.arc) continue;
      if (dot(lr.heading_at(l.arc), route.heading_at(*s)) < 0.9) continue;
      const double gap = *s - f.arc;
      if (gap < best_gap) {
        best_gap = gap;
        best = &l;
      }
    }
    if (best) out.push_back({best->id, f.id, best_gap});
  }
  std::sort(out.begin(), out.end(), [](const FollowingRelation& a, const FollowingRelation& b) {
    return std::tie(a.leader, a.follower) < std::tie(b.leader, b.follower);
  });
  return out;
}

int SimTrace::fallback_count() const {
  return static_cast<int>(std::count_if(episodes.begin(), episodes.end(),
                                        [](const NegotiationEpisode& e) { return e.fallback; }));
}

const VehicleInfo* SimTrace::vehicle(VehicleId id) const {
  for (const auto& v : vehicles) {
    if (v.id == id) return &v;
  }
  return nullptr;
}

void write_jsonl(const SimTrace& trace, std::ostream& out) {
  for (const auto& r : trace.records) out << r.dump() << '\n';
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace: " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

namespace {

struct RefPoint {
  int cp = -1;
  double arc = 0.0;  // on the vehicle's own route
};

struct Target {
  RefPoint ref;
  double time = 0.0;
  bool pinned = false;
};

nlohmann::json ids_json(std::span<const VehicleId> ids) {
  auto j = nlohmann::json::array();
  for (auto id : ids) j.push_back(id.value);
  return j;
}

class Runner {
 public:
  Runner(MethodKind method, std::span<const VehicleState> scenario, NegotiatorBackend& backend,
         const ScenarioConfig& config, std::uint64_t seed, const RunOptions& options)
      : method_(method),
        backend_(backend),
        cfg_(config),
        options_(options),
        grouping_rng_(seeded_rng(seed, "grouping")),
        limits_{config.a_min, config.a_max, config.v_max} {
    geometry_ = std::make_shared<const IntersectionGeometry>(build_intersection(config));
    world_ = make_world(scenario, geometry_);
    targets_.assign(world_.vehicles.size(), std::nullopt);

    trace_.method = method;
    trace_.seed = seed;
    trace_.backend = backend.name();
    trace_.config = config;
    auto vehicles = nlohmann::json::array();
    for (const auto& s : scenario) {
      const Route& r = geometry_->route(s.route_id);
      VehicleInfo info;
      info.id = s.id;
      info.route_id = s.route_id;
      info.v0 = s.speed();
      info.d0 = r.stop_line_arc() - s.arc_position;
      info.length = s.length;
      info.route_remaining = r.length() - s.arc_position;
      info.free_flow_time = info.v0 > 0.0 ? info.route_remaining / info.v0 : cfg_.t_limit;
      trace_.vehicles.push_back(info);
      vehicles.push_back({{"id", s.id.value},
                          {"route", s.route_id},
                          {"approach", std::string(to_string(r.approach()))},
                          {"movement", std::string(to_string(r.movement()))},
                          {"lane", r.lane_index()},
                          {"d0", info.d0},
                          {"v0", info.v0},
                          {"free_flow_time", info.free_flow_time}});
    }
    trace_.records.push_back({{"schema", kTraceSchema},
                              {"event", "header"},
                              {"method", std::string(to_string(method))},
                              {"seed", seed},
                              {"backend", backend.name()},
                              {"config", config_to_json(config)},
                              {"vehicles", std::move(vehicles)}});
  }

  SimTrace run() {
    const auto total_steps = static_cast<long>(std::llround(cfg_.t_limit / cfg_.dt));
    const auto replan_every = std::max(1L, static_cast<long>(std::llround(cfg_.replan_period / cfg_.dt)));
    if (options_.snapshots) snapshot();
    long k = 0;
    for (; k < total_steps && !world_.all_completed(); ++k) {
      world_.time = static_cast<double>(k) * cfg_.dt;
      if (k % replan_every == 0) replan();
      const auto commands = compute_commands();
      auto ev = step(world_, commands, cfg_.dt, cfg_.v_max);
      world_.time = static_cast<double>(k + 1) * cfg_.dt;
      record_step(ev);
    }
    trace_.end_time = static_cast<double>(k) * cfg_.dt;
    for (std::size_t i = 0; i < world_.vehicles.size(); ++i) {
      auto& info = trace_.vehicles[i];
      const double len = route_of(i).length();
      info.distance_travelled = std::min(world_.vehicles[i].arc, len) - (len - info.route_remaining);
    }
    auto travelled = nlohmann::json::array();
    for (const auto& info : trace_.vehicles) travelled.push_back(info.distance_travelled);
    trace_.records.push_back({{"event", "end"},
                              {"t", trace_.end_time},
                              {"completed", trace_.completions.size()},
                              {"collisions", trace_.collisions.size()},
                              {"travelled", travelled}});
    return std::move(trace_);
  }

 private:
  // ------------------------------------------------------------ helpers

  [[nodiscard]] std::vector<std::size_t> active() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < world_.vehicles.size(); ++i) {
      if (!world_.vehicles[i].completed) out.push_back(i);
    }
    return out;
  }

  [[nodiscard]] const Route& route_of(std::size_t i) const { return geometry_->route(world_.vehicles[i].route_id); }

  // Entry of the nearest conflict zone vehicle i still has to clear together
  // with a vehicle in `others` that has not cleared it either. A vehicle
  // already inside a zone gets its own position.
  [[nodiscard]] std::optional<RefPoint> ref_point(std::size_t i, std::span<const std::size_t> others) const {
    const auto& vi = world_.vehicles[i];
    std::optional<RefPoint> best;
    for (auto j : others) {
      if (j == i) continue;
      const auto& vj = world_.vehicles[j];
      const auto k = geometry_->conflict_index(vi.route_id, vj.route_id);
      if (!k) continue;
      const auto& cp = geometry_->conflict_points[static_cast<std::size_t>(*k)];
      const auto zi = cp.zone_on(vi.route_id);
      const auto zj = cp.zone_on(vj.route_id);
      if (zi.second <= vi.arc || zj.second <= vj.arc) continue;
      const double entry = std::max(zi.first, vi.arc);
      if (!best || entry < best->arc) best = RefPoint{*k, entry};
    }
    return best;
  }

  [[nodiscard]] double stop_room(std::size_t i, const RefPoint& ref) const {
    const auto& v = world_.vehicles[i];
    return std::min(route_of(i).stop_line_arc(), ref.arc - cfg_.stop_margin) - v.arc;
  }

  [[nodiscard]] bool committed(std::size_t i, const RefPoint& ref) const {
    const auto& v = world_.vehicles[i];
    const double room = stop_room(i, ref);
    return room <= 0.0 || v.speed * v.speed / (2.0 * -cfg_.a_min) > room;
  }

  // Speed at the reference point when steering for `target`.
  [[nodiscard]] double crossing_speed(std::size_t i, const RefPoint& ref, double target, bool pinned) const {
    const auto& v = world_.vehicles[i];
    const double d = std::max(ref.arc - v.arc, 0.0);
    const double tau = target - world_.time;
    const double fast = std::min(cfg_.v_max, std::sqrt(v.speed * v.speed + 2.0 * cfg_.a_max * d));
    if (pinned || tau <= 0.0) return fast;
    if (cfg_.control_law == ControlLaw::ConstantAccel) {
      return std::clamp(2.0 * d / tau - v.speed, 0.0, cfg_.v_max);
    }
    try {
      return profile_command(v.speed, d, tau, stop_room(i, ref), limits_, cfg_.dt, cfg_.comfort_decel)
          .crossing_speed;
    } catch (const InfeasibleTarget&) {
      return fast;
    }
  }

  // Pass order -> per-vehicle targets at each vehicle's reference point.
  // With `only` set, just that vehicle's target is kept.
  std::vector<ScheduledTarget> plan(std::span<const std::size_t> order,
                                    const std::map<std::size_t, RefPoint>& refs,
                                    std::optional<std::size_t> only = std::nullopt) {
    std::vector<std::size_t> seq;
    for (auto i : order) {
      if (refs.count(i)) seq.push_back(i);
    }
    std::vector<bool> pinned_of(world_.vehicles.size(), false);
    for (auto i : seq) pinned_of[i] = committed(i, refs.at(i));
    std::stable_partition(seq.begin(), seq.end(), [&](std::size_t i) { return pinned_of[i]; });

    const double now = world_.time;
    std::vector<ScheduleInput> inputs;
    for (auto i : seq) {
      const auto& v = world_.vehicles[i];
      const double d = std::max(refs.at(i).arc - v.arc, 0.0);
      inputs.push_back({v.id, now + earliest_arrival(v.speed, d, cfg_.a_max, cfg_.v_max), pinned_of[i]});
    }

    // Zone separation for every shared conflict, not only the reference one:
    // j may enter a zone only after the earlier vehicle i has left it.
    auto hold = [&](std::size_t k, std::span<const ScheduleEntry> fixed) {
      const auto j = seq[k];
      const auto& vj = world_.vehicles[j];
      const auto& ref_j = refs.at(j);
      double bound = -std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < k; ++m) {
        const auto i = seq[m];
        const auto& vi = world_.vehicles[i];
        const auto& ref_i = refs.at(i);
        const auto* cp = geometry_->conflict_between(vi.route_id, vj.route_id);
        if (!cp) continue;
        const auto zi = cp->zone_on(vi.route_id);
        const auto zj = cp->zone_on(vj.route_id);
        if (zi.second <= vi.arc || zj.second <= vj.arc) continue;
        const double vc = crossing_speed(i, ref_i, fixed[m].target_time, fixed[m].pinned);
        const double run_i = std::max(zi.second - ref_i.arc, 0.0);
        const double exit_i = fixed[m].target_time + earliest_arrival(vc, run_i, cfg_.a_max, cfg_.v_max);
        const double run_j = std::max(zj.first - ref_j.arc, 0.0) / cfg_.v_max;
        bound = std::max(bound, exit_i + kZoneMargin - run_j);
      }
      return bound;
    };
    PairPredicate constrained = [&](VehicleId a, VehicleId b) {
      const auto ia = index_of(a);
      const auto ib = index_of(b);
      if (geometry_->conflict_index(world_.vehicles[ia].route_id, world_.vehicles[ib].route_id)) return true;
      for (const auto& f : relations_) {
        if ((f.leader == a && f.follower == b) || (f.leader == b && f.follower == a)) return true;
      }
      return false;
    };
    const auto schedule = schedule_times(inputs, cfg_.dt_safe, cfg_.constraint_mode, constrained, hold);

    std::vector<ScheduledTarget> out;
    for (std::size_t k = 0; k < seq.size(); ++k) {
      const auto& e = schedule.entries[k];
      if (only && seq[k] != *only) continue;
      out.push_back({e.id, refs.at(seq[k]).cp, e.target_time, e.pinned});
      targets_[seq[k]] = Target{refs.at(seq[k]), e.target_time, e.pinned};
    }
    return out;
  }

  [[nodiscard]] std::size_t index_of(VehicleId id) const {
    for (std::size_t i = 0; i < world_.vehicles.size(); ++i) {
      if (world_.vehicles[i].id == id) return i;
    }
    throw std::out_of_range("unknown vehicle " + to_string(id));
  }

  std::vector<VehicleState> states_of(std::span<const std::size_t> idx) const {
    std::vector<VehicleState> out;
    for (auto i : idx) out.push_back(world_.state(i));
    return out;
  }

  std::vector<std::size_t> indices_of(std::span<const VehicleId> ids) const {
    std::vector<std::size_t> out;
    for (auto id : ids) out.push_back(index_of(id));
    return out;
  }

  std::map<std::size_t, RefPoint> refs_within(std::span<const std::size_t> members) const {
    std::map<std::size_t, RefPoint> refs;
    for (auto i : members) {
      if (auto r = ref_point(i, members)) refs.emplace(i, *r);
    }
    return refs;
  }

  // ------------------------------------------------------------ replanning

  void replan() {
    targets_.assign(world_.vehicles.size(), std::nullopt);
    const auto act = active();
    if (act.empty()) return;
    relations_ = path_following(world_);
    switch (method_) {
      case MethodKind::IVD: replan_ivd(act); break;
      case MethodKind::IGN:
      case MethodKind::IIGN: replan_grouped(act); break;
    }
  }

  // Each vehicle orders its detected neighbors with the rule, schedules that
  // local order as if it were binding and keeps only its own target.
  void replan_ivd(std::span<const std::size_t> act) {
    std::vector<ScheduledTarget> own;
    for (auto i : act) {
      const Vec2 pi = world_.state(i).position;
      std::vector<std::size_t> seen;
      for (auto j : act) {
        if ((world_.state(j).position - pi).norm() <= cfg_.detect_range_ivd) seen.push_back(j);
      }
      const auto refs = refs_within(seen);
      if (!refs.count(i)) continue;
      const auto ctx = build_context(states_of(seen), *geometry_, relations_);
      const auto order = indices_of(RuleBackend::rank(ctx));
      auto mine = plan(order, refs, i);
      own.insert(own.end(), mine.begin(), mine.end());
    }
    record_schedule(own);
  }

  void record_episode(const PassOrder& o, const char* scope, std::size_t size) {
    trace_.episodes.push_back({world_.time, scope, o.group, size, o.rounds_used, o.fallback});
    nlohmann::json e{{"event", "order_committed"}, {"t", world_.time}, {"scope", scope},
                     {"order", ids_json(o.ordered_ids)}, {"rounds", o.rounds_used},
                     {"fallback", o.fallback}, {"backend", o.backend_name}};
    e["group"] = o.group ? nlohmann::json(*o.group) : nlohmann::json(nullptr);
    trace_.records.push_back(std::move(e));
    if (o.fallback) {
      nlohmann::json f{{"event", "fallback_used"}, {"t", world_.time}, {"scope", scope}};
      f["group"] = o.group ? nlohmann::json(*o.group) : nlohmann::json(nullptr);
      trace_.records.push_back(std::move(f));
    }
  }

  void flush_log(NegotiationLog& log) {
    for (auto& entry : log) {
      trace_.records.push_back({{"event", "negotiation_round"}, {"t", world_.time}, {"detail", std::move(entry)}});
    }
    log.clear();
  }

  std::vector<PrecedencePreference> agreed_from_history() const {
    std::vector<PrecedencePreference> out;
    for (const auto& order : committed_) {
      std::vector<VehicleId> alive;
      for (auto id : order) {
        const auto& v = world_.vehicles[index_of(id)];
        if (!v.completed) alive.push_back(id);
      }
      for (std::size_t k = 1; k < alive.size(); ++k) {
        out.push_back({alive[k - 1], alive[k], VehicleId{-1}, "previously committed"});
      }
    }
    return out;
  }

  PassOrder negotiate_group(const NegotiationContext& ctx, std::size_t g, NegotiationLog& log) {
    try {
      return intra_group_order(backend_, ctx, options_.negotiation, g, &log);
    } catch (const std::exception& e) {
      log.push_back({{"schema", kNegotiationSchema}, {"event", "error"}, {"scope", "intra"}, {"group", g},
                     {"message", e.what()}});
      PassOrder o;
      o.ordered_ids = RuleBackend::rank(ctx);
      o.group = g;
      o.rounds_used = options_.negotiation.max_renegotiations + 1;
      o.backend_name = backend_.name();
      o.fallback = true;
      return o;
    }
  }

  void replan_grouped(std::span<const std::size_t> act) {
    const auto states = states_of(act);
    GroupPartition partition;
    nlohmann::json influence_rec{{"event", "influence"}, {"t", world_.time}};
    {
      auto ids = nlohmann::json::array();
      for (const auto& s : states) ids.push_back(s.id.value);
      influence_rec["ids"] = std::move(ids);
    }
    try {
      const auto m = compute_influence(states, relations_, {cfg_.following_augmentation, cfg_.following_gap});
      auto to_rows = [](const Matrix& a) {
        auto rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
          auto row = nlohmann::json::array();
          for (Eigen::Index c = 0; c < a.cols(); ++c) row.push_back(a(r, c));
          rows.push_back(std::move(row));
        }
        return rows;
      };
      influence_rec["direct"] = to_rows(m.direct);
      influence_rec["cumulative"] = to_rows(m.cumulative);
      partition = divide_groups(m.cumulative, {cfg_.motif, cfg_.k_max, cfg_.s_min, cfg_.row_normalize},
                                grouping_rng_);
    } catch (const std::exception& e) {
      influence_rec["error"] = e.what();
      partition.groups = {{}};
      for (std::size_t k = 0; k < states.size(); ++k) partition.groups[0].push_back(k);
      partition.assignment.assign(states.size(), 0);
    }
    trace_.records.push_back(std::move(influence_rec));

    std::vector<std::vector<std::size_t>> groups;  // world indices
    auto groups_json = nlohmann::json::array();
    for (const auto& g : partition.groups) {
      std::vector<std::size_t> members;
      auto ids = nlohmann::json::array();
      for (auto k : g) {
        members.push_back(act[k]);
        ids.push_back(states[k].id.value);
      }
      groups.push_back(std::move(members));
      groups_json.push_back(std::move(ids));
    }
    trace_.records.push_back({{"event", "group_partition"}, {"t", world_.time}, {"groups", groups_json}});

    const auto agreed = agreed_from_history();
    NegotiationLog log;
    std::vector<PassOrder> intra;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto gs = states_of(groups[g]);
      auto ctx = build_context(gs, *geometry_, relations_, agreed);
      for (auto& m : ctx.members) m.group = static_cast<int>(g);
      intra.push_back(negotiate_group(ctx, g, log));
      flush_log(log);
      record_episode(intra.back(), "intra", groups[g].size());
    }

    std::vector<ScheduledTarget> schedule;
    committed_.clear();
    if (method_ == MethodKind::IGN) {
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto order = indices_of(intra[g].ordered_ids);
        const auto part = plan(order, refs_within(groups[g]));
        std::vector<VehicleId> ids;
        for (const auto& e : part) ids.push_back(e.id);
        committed_.push_back(ids);
        schedule.insert(schedule.end(), part.begin(), part.end());
      }
    } else {
      auto ctx = build_context(states, *geometry_, relations_, agreed);
      for (auto& m : ctx.members) m.group = static_cast<int>(partition.assignment[index_in(act, m.id)]);
      PassOrder global;
      try {
        global = inter_group_order(backend_, intra, ctx, options_.negotiation, &log);
      } catch (const std::exception& e) {
        log.push_back({{"schema", kNegotiationSchema}, {"event", "error"}, {"scope", "inter"}, {"message", e.what()}});
        global.ordered_ids = fallback_merge(intra, ctx);
        global.rounds_used = options_.negotiation.max_renegotiations + 1;
        global.backend_name = backend_.name();
        global.fallback = true;
      }
      flush_log(log);
      if (groups.size() > 1) record_episode(global, "inter", act.size());
      const auto order = indices_of(global.ordered_ids);
      schedule = plan(order, refs_within(act));
      std::vector<VehicleId> ids;
      for (const auto& e : schedule) ids.push_back(e.id);
      committed_.push_back(ids);
    }
    record_schedule(schedule);
  }

  std::size_t index_in(std::span<const std::size_t> act, VehicleId id) const {
    for (std::size_t k = 0; k < act.size(); ++k) {
      if (world_.vehicles[act[k]].id == id) return k;
    }
    throw std::out_of_range("vehicle not active");
  }

  void record_schedule(const std::vector<ScheduledTarget>& entries) {
    trace_.schedules.push_back(entries);
    auto arr = nlohmann::json::array();
    for (const auto& e : entries) {
      arr.push_back({{"id", e.id.value}, {"cp", e.conflict_point}, {"target", e.target_time}, {"pinned", e.pinned}});
    }
    trace_.records.push_back({{"event", "schedule"}, {"t", world_.time}, {"entries", std::move(arr)}});
  }

  // ------------------------------------------------------------ control

  double target_command(std::size_t i, const Target& t) const {
    const auto& v = world_.vehicles[i];
    const double d = t.ref.arc - v.arc;
    double tau = t.time - world_.time;
    for (int attempt = 0; attempt < 2; ++attempt, tau += 0.5 * cfg_.dt_safe) {
      if (tau <= 1e-9) break;
      try {
        if (cfg_.control_law == ControlLaw::Profile) {
          return profile_command(v.speed, d, tau, stop_room(i, t.ref), limits_, cfg_.dt, cfg_.comfort_decel).accel;
        }
        if (2.0 * d / tau - v.speed < 0.0) {
          // The constant solution would stop and reverse; stop short of the point instead.
          const double room = std::max(stop_room(i, t.ref), 0.1);
          return std::clamp(-v.speed * v.speed / (2.0 * room), std::max(cfg_.a_min, -v.speed / cfg_.dt), 0.0);
        }
        return acceleration_command(v.speed, d, tau, limits_, cfg_.dt);
      } catch (const InfeasibleTarget&) {
      }
    }
    return cruise_command(v.speed, limits_, cfg_.dt);
  }

  std::vector<double> compute_commands() const {
    std::vector<double> out(world_.vehicles.size(), 0.0);
    std::map<VehicleId, const FollowingRelation*> leader_of;
    const auto rel = path_following(world_);
    for (const auto& f : rel) leader_of[f.follower] = &f;
    for (std::size_t i = 0; i < world_.vehicles.size(); ++i) {
      const auto& v = world_.vehicles[i];
      if (v.completed) continue;
      double a = cruise_command(v.speed, limits_, cfg_.dt);
      const auto& t = targets_[i];
      if (t && !t->pinned && v.arc < t->ref.arc && v.arc < route_of(i).stop_line_arc()) a = target_command(i, *t);

      if (auto it = leader_of.find(v.id); it != leader_of.end()) {
        const auto& leader = world_.vehicles[index_of(it->second->leader)];
        const double gap = it->second->gap - 0.5 * (v.length + leader.length) - kMinGap;
        const double b = -cfg_.a_min;
        const double dt = cfg_.dt;
        const double v_safe =
            -b * dt + std::sqrt(std::max(0.0, b * b * dt * dt + leader.speed * leader.speed + 2.0 * b * gap));
        const double a_guard = std::clamp((v_safe - v.speed) / dt, cfg_.a_min, cfg_.a_max);
        a = std::min(a, a_guard);
      }
      out[i] = std::clamp(a, cfg_.a_min, cfg_.a_max);
    }
    return out;
  }

  // ------------------------------------------------------------ recording

  void snapshot() {
    auto arr = nlohmann::json::array();
    for (std::size_t i = 0; i < world_.vehicles.size(); ++i) {
      const auto& v = world_.vehicles[i];
      if (v.completed) continue;
      const Vec2 p = route_of(i).point_at(v.arc);
      arr.push_back({{"id", v.id.value}, {"route", v.route_id}, {"arc", v.arc}, {"x", p.x}, {"y", p.y},
                     {"speed", v.speed}});
    }
    trace_.records.push_back({{"event", "snapshot"}, {"t", world_.time}, {"vehicles", std::move(arr)}});
  }

  void record_step(const StepEvents& ev) {
    struct Item {
      double t;
      nlohmann::json rec;
    };
    std::vector<Item> items;
    for (const auto& c : ev.crossings) {
      trace_.crossings.push_back(c);
      items.push_back({c.time,
                       {{"event", "conflict_crossing"}, {"t", c.time}, {"vehicle", c.vehicle.value},
                        {"cp", c.conflict_point}, {"speed", c.speed}}});
    }
    for (const auto& c : ev.completions) {
      trace_.completions.push_back(c);
      items.push_back({c.time, {{"event", "vehicle_completed"}, {"t", c.time}, {"vehicle", c.vehicle.value}}});
    }
    std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.t < b.t; });
    for (auto& it : items) trace_.records.push_back(std::move(it.rec));

    for (const auto& c : detect_collisions(world_, cfg_.collision_factor)) {
      trace_.collisions.push_back(c);
      trace_.records.push_back({{"event", "collision"}, {"t", c.time}, {"a", c.a.value}, {"b", c.b.value},
                                {"x", c.position.x}, {"y", c.position.y}, {"distance", c.distance}});
    }
    if (options_.snapshots) snapshot();
  }

  static constexpr double kMinGap = 2.0;      // bumper-to-bumper standstill gap, meters
  static constexpr double kZoneMargin = 0.5;  // seconds between leaving and entering a shared zone

  MethodKind method_;
  NegotiatorBackend& backend_;
  ScenarioConfig cfg_;
  RunOptions options_;
  SeededStream grouping_rng_;
  Limits limits_;
  std::shared_ptr<const IntersectionGeometry> geometry_;
  World world_;
  std::vector<std::optional<Target>> targets_;
  std::vector<FollowingRelation> relations_;
  std::vector<std::vector<VehicleId>> committed_;
  SimTrace trace_;
};

}  // namespace

SimTrace run(MethodKind method, std::span<const VehicleState> scenario, NegotiatorBackend& backend,
             const ScenarioConfig& config, std::uint64_t seed, const RunOptions& options) {
  if (scenario.empty()) throw std::invalid_argument("run: empty scenario");
  config.validate();
  Runner runner(method, scenario, backend, config, seed, options);
  return runner.run();
}

}  // namespace vicoop
