#include "vicoop/negotiation.hpp"

#include <algorithm>
#include <limits>
#include <queue>
#include <set>
#include <tuple>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace vicoop {

namespace {

using PairKey = std::pair<VehicleId, VehicleId>;

PairKey key_of(VehicleId a, VehicleId b) { return a < b ? PairKey{a, b} : PairKey{b, a}; }

// Small dense digraph over member indices with cycle-safe insertion.
class OrderGraph {
 public:
  explicit OrderGraph(std::size_t n) : n_(n), adj_(n * n, false) {}

  [[nodiscard]] bool reachable(std::size_t from, std::size_t to) const {
    if (from == to) return true;
    std::vector<bool> seen(n_, false);
    std::vector<std::size_t> stack{from};
    seen[from] = true;
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (std::size_t v = 0; v < n_; ++v) {
        if (!adj_[u * n_ + v] || seen[v]) continue;
        if (v == to) return true;
        seen[v] = true;
        stack.push_back(v);
      }
    }
    return false;
  }

  // Adds u -> v unless it would close a cycle.
  bool try_add(std::size_t u, std::size_t v) {
    if (u == v || reachable(v, u)) return false;
    adj_[u * n_ + v] = true;
    return true;
  }

  void add(std::size_t u, std::size_t v) { adj_[u * n_ + v] = true; }
  [[nodiscard]] bool edge(std::size_t u, std::size_t v) const { return adj_[u * n_ + v]; }
  [[nodiscard]] std::size_t size() const { return n_; }

  // Kahn's algorithm; ties broken by `less` on indices. Returns the processed
  // prefix, which is shorter than n when the graph has a cycle.
  template <typename Less>
  [[nodiscard]] std::vector<std::size_t> topo(Less less) const {
    std::vector<int> indeg(n_, 0);
    for (std::size_t u = 0; u < n_; ++u) {
      for (std::size_t v = 0; v < n_; ++v) indeg[v] += adj_[u * n_ + v] ? 1 : 0;
    }
    auto cmp = [&](std::size_t a, std::size_t b) { return less(b, a); };
    std::priority_queue<std::size_t, std::vector<std::size_t>, decltype(cmp)> ready(cmp);
    for (std::size_t v = 0; v < n_; ++v) {
      if (indeg[v] == 0) ready.push(v);
    }
    std::vector<std::size_t> out;
    while (!ready.empty()) {
      const auto u = ready.top();
      ready.pop();
      out.push_back(u);
      for (std::size_t v = 0; v < n_; ++v) {
        if (adj_[u * n_ + v] && --indeg[v] == 0) ready.push(v);
      }
    }
    return out;
  }

 private:
  std::size_t n_;
  std::vector<bool> adj_;
};

std::unordered_map<VehicleId, std::size_t> index_map(std::span<const VehicleId> ids) {
  std::unordered_map<VehicleId, std::size_t> m;
  for (std::size_t i = 0; i < ids.size(); ++i) m.emplace(ids[i], i);
  return m;
}

std::string join_ids(std::span<const VehicleId> ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ", ";
    s += to_string(ids[i]);
  }
  return s;
}

nlohmann::json ids_json(std::span<const VehicleId> ids) {
  auto j = nlohmann::json::array();
  for (auto id : ids) j.push_back(id.value);
  return j;
}

nlohmann::json event(const char* name, const char* scope, std::optional<std::size_t> group, int round) {
  nlohmann::json e{{"schema", kNegotiationSchema}, {"event", name}, {"scope", scope}, {"round", round}};
  e["group"] = group ? nlohmann::json(*group) : nlohmann::json(nullptr);
  return e;
}

}  // namespace

std::string_view to_string(ConsensusLevel level) {
  switch (level) {
    case ConsensusLevel::Exact: return "Exact";
    case ConsensusLevel::Basic: return "Basic";
    case ConsensusLevel::None: return "None";
  }
  return "?";
}

std::string_view to_string(Violation::Kind kind) {
  switch (kind) {
    case Violation::Kind::Omission: return "omission";
    case Violation::Kind::Addition: return "addition";
    case Violation::Kind::Duplicate: return "duplicate";
    case Violation::Kind::FollowingOrder: return "following_order";
    case Violation::Kind::Cycle: return "cycle";
    case Violation::Kind::GroupOrder: return "group_order";
  }
  return "?";
}

const MemberInfo* NegotiationContext::member(VehicleId id) const {
  for (const auto& m : members) {
    if (m.id == id) return &m;
  }
  return nullptr;
}

std::vector<VehicleId> NegotiationContext::member_ids() const {
  std::vector<VehicleId> ids;
  ids.reserve(members.size());
  for (const auto& m : members) ids.push_back(m.id);
  return ids;
}

NegotiationContext NegotiationContext::restricted_to(std::span<const VehicleId> ids) const {
  std::unordered_set<VehicleId> keep(ids.begin(), ids.end());
  NegotiationContext out;
  for (const auto& m : members) {
    if (keep.count(m.id)) out.members.push_back(m);
  }
  for (const auto& c : conflicts) {
    if (keep.count(c.a) && keep.count(c.b)) out.conflicts.push_back(c);
  }
  for (const auto& f : following) {
    if (keep.count(f.leader) && keep.count(f.follower)) out.following.push_back(f);
  }
  for (const auto& p : agreed) {
    if (keep.count(p.first) && keep.count(p.second)) out.agreed.push_back(p);
  }
  out.feedback = feedback;
  return out;
}

double arrival_at_current_speed(double distance, double speed) {
  return std::max(distance, 0.0) / std::max(speed, 0.1);
}

std::vector<ConflictInfo> conflict_pairs(std::span<const VehicleState> group, const IntersectionGeometry& geometry) {
  std::vector<ConflictInfo> out;
  for (std::size_t i = 0; i < group.size(); ++i) {
    for (std::size_t j = i + 1; j < group.size(); ++j) {
      const auto& vi = group[i];
      const auto& vj = group[j];
      if (vi.route_id == vj.route_id) continue;
      const auto* cp = geometry.conflict_between(vi.route_id, vj.route_id);
      if (!cp) continue;
      const double di = cp->arc_on(vi.route_id) - vi.arc_position;
      const double dj = cp->arc_on(vj.route_id) - vj.arc_position;
      if (di <= 0.0 || dj <= 0.0) continue;
      ConflictInfo c;
      c.a = vi.id;
      c.b = vj.id;
      c.point = *cp;
      c.distance_a = di;
      c.distance_b = dj;
      c.speed_a = vi.speed();
      c.speed_b = vj.speed();
      c.arrival_a = arrival_at_current_speed(di, c.speed_a);
      c.arrival_b = arrival_at_current_speed(dj, c.speed_b);
      out.push_back(c);
    }
  }
  return out;
}

NegotiationContext build_context(std::span<const VehicleState> members, const IntersectionGeometry& geometry,
                                 std::span<const FollowingRelation> following,
                                 std::span<const PrecedencePreference> agreed) {
  NegotiationContext ctx;
  ctx.conflicts = conflict_pairs(members, geometry);
  for (const auto& s : members) {
    MemberInfo m;
    m.id = s.id;
    m.state = s;
    double best_d = std::numeric_limits<double>::infinity();
    double best_t = std::numeric_limits<double>::infinity();
    for (const auto& c : ctx.conflicts) {
      if (c.a == s.id && c.arrival_a < best_t) {
        best_t = c.arrival_a;
        best_d = c.distance_a;
      } else if (c.b == s.id && c.arrival_b < best_t) {
        best_t = c.arrival_b;
        best_d = c.distance_b;
      }
    }
    if (!std::isfinite(best_t)) {
      best_d = std::max(0.0, geometry.route(s.route_id).stop_line_arc() - s.arc_position);
      best_t = arrival_at_current_speed(best_d, s.speed());
    }
    m.distance_to_conflict = best_d;
    m.arrival = best_t;
    ctx.members.push_back(m);
  }
  const auto ids = ctx.member_ids();
  return [&] {
    NegotiationContext full = ctx;
    full.following.assign(following.begin(), following.end());
    full.agreed.assign(agreed.begin(), agreed.end());
    return full.restricted_to(ids);
  }();
}

// ---------------------------------------------------------------- backends

std::vector<VehicleId> RuleBackend::rank(const NegotiationContext& ctx) {
  const auto ids = ctx.member_ids();
  const auto idx = index_map(ids);
  OrderGraph g(ids.size());

  for (const auto& f : ctx.following) {
    auto l = idx.find(f.leader);
    auto r = idx.find(f.follower);
    if (l != idx.end() && r != idx.end()) g.try_add(l->second, r->second);
  }
  for (const auto& p : ctx.agreed) {
    auto a = idx.find(p.first);
    auto b = idx.find(p.second);
    if (a != idx.end() && b != idx.end()) g.try_add(a->second, b->second);
  }

  struct Fcfs {
    double margin;
    VehicleId first;
    VehicleId second;
  };
  std::vector<Fcfs> fcfs;
  for (const auto& c : ctx.conflicts) {
    if (!idx.count(c.a) || !idx.count(c.b)) continue;
    const bool a_first = c.arrival_a < c.arrival_b || (c.arrival_a == c.arrival_b && c.a < c.b);
    fcfs.push_back({std::abs(c.arrival_a - c.arrival_b), a_first ? c.a : c.b, a_first ? c.b : c.a});
  }
  std::sort(fcfs.begin(), fcfs.end(), [](const Fcfs& x, const Fcfs& y) {
    return std::tie(y.margin, x.first, x.second) < std::tie(x.margin, y.first, y.second);
  });
  for (const auto& e : fcfs) g.try_add(idx.at(e.first), idx.at(e.second));

  auto less = [&](std::size_t a, std::size_t b) {
    return std::tie(ctx.members[a].arrival, ids[a]) < std::tie(ctx.members[b].arrival, ids[b]);
  };
  std::vector<VehicleId> out;
  for (auto i : g.topo(less)) out.push_back(ids[i]);
  return out;
}

namespace {

std::vector<PrecedencePreference> precedences_from_rank(const NegotiationContext& ctx,
                                                        std::span<const VehicleId> order,
                                                        const std::vector<PairKey>& pairs, VehicleId speaker) {
  const auto pos = index_map(order);
  std::vector<PrecedencePreference> out;
  for (const auto& [a, b] : pairs) {
    const bool a_first = pos.at(a) < pos.at(b);
    PrecedencePreference p{a_first ? a : b, a_first ? b : a, speaker, {}};
    const ConflictInfo* info = nullptr;
    for (const auto& c : ctx.conflicts) {
      if (key_of(c.a, c.b) == key_of(a, b)) info = &c;
    }
    if (info) {
      const double t_first = info->a == p.first ? info->arrival_a : info->arrival_b;
      const double t_second = info->a == p.first ? info->arrival_b : info->arrival_a;
      p.rationale = t_first <= t_second
                        ? fmt::format("arrives first ({:.2f} s vs {:.2f} s)", t_first, t_second)
                        : fmt::format("kept earlier to stay consistent ({:.2f} s vs {:.2f} s)", t_first, t_second);
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PairKey> conflict_keys(const NegotiationContext& ctx) {
  std::vector<PairKey> keys;
  for (const auto& c : ctx.conflicts) keys.emplace_back(c.a, c.b);
  return keys;
}

}  // namespace

std::vector<PrecedencePreference> RuleBackend::opinion(const NegotiationContext& ctx, VehicleId ego) {
  return precedences_from_rank(ctx, rank(ctx), conflict_keys(ctx), ego);
}

std::vector<PrecedencePreference> RuleBackend::resolve(const NegotiationContext& ctx,
                                                       std::span<const DisputedPair> disputed) {
  std::vector<PairKey> keys;
  for (const auto& d : disputed) keys.emplace_back(d.a, d.b);
  return precedences_from_rank(ctx, rank(ctx), keys, VehicleId{-1});
}

std::vector<VehicleId> RuleBackend::merge(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx) {
  return fallback_merge(intra_orders, ctx);
}

ScriptedBackend::ScriptedBackend(std::string name, OpinionFn opinion, ResolveFn resolve, MergeFn merge)
    : name_(std::move(name)), opinion_(std::move(opinion)), resolve_(std::move(resolve)), merge_(std::move(merge)) {}

std::vector<PrecedencePreference> ScriptedBackend::opinion(const NegotiationContext& ctx, VehicleId ego) {
  const int call = opinion_calls_++;
  if (!opinion_) return RuleBackend().opinion(ctx, ego);
  return opinion_(ctx, ego, call);
}

std::vector<PrecedencePreference> ScriptedBackend::resolve(const NegotiationContext& ctx,
                                                           std::span<const DisputedPair> disputed) {
  const int call = resolve_calls_++;
  if (!resolve_) return RuleBackend().resolve(ctx, disputed);
  return resolve_(ctx, disputed, call);
}

std::vector<VehicleId> ScriptedBackend::merge(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx) {
  const int call = merge_calls_++;
  if (!merge_) return RuleBackend().merge(intra_orders, ctx);
  return merge_(intra_orders, ctx, call);
}

NoisyRuleBackend::NoisyRuleBackend(std::uint64_t seed, double slope, double p_max)
    : rng_(seed, "noisy-backend"), slope_(slope), p_max_(p_max) {}

double NoisyRuleBackend::noise_for(std::size_t group_size) const {
  return std::min(p_max_, slope_ * static_cast<double>(group_size));
}

std::vector<PrecedencePreference> NoisyRuleBackend::opinion(const NegotiationContext& ctx, VehicleId ego) {
  auto prefs = RuleBackend().opinion(ctx, ego);
  const double p = noise_for(ctx.members.size());
  for (auto& pref : prefs) {
    if (rng_.uniform() < p) {
      std::swap(pref.first, pref.second);
      pref.rationale = "prefers the opposite order";
    }
  }
  if (!prefs.empty() && rng_.uniform() < p) {
    prefs.erase(prefs.begin() + static_cast<std::ptrdiff_t>(rng_.below(prefs.size())));
  }
  return prefs;
}

std::vector<PrecedencePreference> NoisyRuleBackend::resolve(const NegotiationContext& ctx,
                                                            std::span<const DisputedPair> disputed) {
  return RuleBackend().resolve(ctx, disputed);
}

std::vector<VehicleId> NoisyRuleBackend::merge(std::span<const PassOrder> intra_orders,
                                               const NegotiationContext& ctx) {
  return RuleBackend().merge(intra_orders, ctx);
}

// ---------------------------------------------------------------- protocol

Opinions generate_opinions(NegotiatorBackend& backend, const NegotiationContext& ctx) {
  std::set<PairKey> pairs;
  for (const auto& c : ctx.conflicts) pairs.insert(key_of(c.a, c.b));

  Opinions out;
  for (const auto& m : ctx.members) {
    auto prefs = backend.opinion(ctx, m.id);
    std::set<PairKey> seen;
    for (auto& p : prefs) {
      p.stated_by = m.id;
      if (!ctx.has_member(p.first) || !ctx.has_member(p.second)) {
        throw IncompleteOpinion(fmt::format("opinion of {} names a vehicle outside the group ({} / {})",
                                            to_string(m.id), to_string(p.first), to_string(p.second)));
      }
      const auto k = key_of(p.first, p.second);
      if (p.first == p.second || !pairs.count(k)) {
        throw IncompleteOpinion(fmt::format("opinion of {} states {} before {}, which is not a conflict pair",
                                            to_string(m.id), to_string(p.first), to_string(p.second)));
      }
      if (!seen.insert(k).second) {
        throw IncompleteOpinion(fmt::format("opinion of {} covers pair ({}, {}) twice", to_string(m.id),
                                            to_string(k.first), to_string(k.second)));
      }
    }
    if (seen.size() != pairs.size()) {
      for (const auto& k : pairs) {
        if (!seen.count(k)) {
          throw IncompleteOpinion(fmt::format("opinion of {} omits pair ({}, {})", to_string(m.id),
                                              to_string(k.first), to_string(k.second)));
        }
      }
    }
    out.emplace(m.id, std::move(prefs));
  }
  return out;
}

ConsensusTally tally_consensus(const Opinions& opinions, VehicleId a, VehicleId b) {
  ConsensusTally t;
  const auto k = key_of(a, b);
  for (const auto& [_, prefs] : opinions) {
    for (const auto& p : prefs) {
      if (key_of(p.first, p.second) != k) continue;
      (p.first == a ? t.votes_a_first : t.votes_b_first) += 1;
    }
  }
  const int total = t.votes_a_first + t.votes_b_first;
  if (total == 0) throw std::invalid_argument("classify_consensus: no opinion covers the pair");
  const int majority = std::max(t.votes_a_first, t.votes_b_first);
  if (majority == total) {
    t.level = ConsensusLevel::Exact;
  } else if (3 * majority >= 2 * total) {
    t.level = ConsensusLevel::Basic;
  } else {
    t.level = ConsensusLevel::None;
  }
  return t;
}

ConsensusLevel classify_consensus(const Opinions& opinions, VehicleId a, VehicleId b) {
  return tally_consensus(opinions, a, b).level;
}

std::vector<Violation> validate_precedences(std::span<const PrecedencePreference> precedences,
                                            std::span<const VehicleId> group,
                                            std::span<const FollowingRelation> following) {
  std::vector<Violation> out;
  const auto idx = index_map(group);

  std::set<VehicleId> unknown;
  for (const auto& p : precedences) {
    for (auto id : {p.first, p.second}) {
      if (!idx.count(id)) unknown.insert(id);
    }
  }
  for (auto id : unknown) {
    out.push_back({Violation::Kind::Addition, {id}, fmt::format("vehicle {} is not a group member", to_string(id))});
  }

  for (const auto& p : precedences) {
    if (p.first == p.second) {
      out.push_back({Violation::Kind::Cycle, {p.first}, fmt::format("{} is ordered before itself", to_string(p.first))});
    }
    for (const auto& f : following) {
      if (p.first == f.follower && p.second == f.leader) {
        out.push_back({Violation::Kind::FollowingOrder, {f.leader, f.follower},
                       fmt::format("follower {} placed before its leader {}", to_string(f.follower),
                                   to_string(f.leader))});
      }
    }
  }

  OrderGraph g(group.size());
  for (const auto& f : following) {
    auto l = idx.find(f.leader);
    auto r = idx.find(f.follower);
    if (l != idx.end() && r != idx.end()) g.add(l->second, r->second);
  }
  for (const auto& p : precedences) {
    auto a = idx.find(p.first);
    auto b = idx.find(p.second);
    if (a != idx.end() && b != idx.end() && a->second != b->second) g.add(a->second, b->second);
  }
  const auto done = g.topo([](std::size_t a, std::size_t b) { return a < b; });
  if (done.size() < group.size()) {
    std::vector<bool> placed(group.size(), false);
    for (auto i : done) placed[i] = true;
    std::vector<VehicleId> stuck;
    for (std::size_t i = 0; i < group.size(); ++i) {
      if (!placed[i]) stuck.push_back(group[i]);
    }
    out.push_back({Violation::Kind::Cycle, stuck, "pass order chain forms a cycle among " + join_ids(stuck)});
  }
  return out;
}

std::vector<Violation> validate_order(std::span<const VehicleId> order, std::span<const VehicleId> group,
                                      std::span<const FollowingRelation> following,
                                      std::span<const PrecedencePreference> precedences) {
  std::vector<Violation> out;
  const std::unordered_set<VehicleId> members(group.begin(), group.end());
  std::unordered_map<VehicleId, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto id = order[i];
    if (!members.count(id)) {
      out.push_back({Violation::Kind::Addition, {id}, fmt::format("vehicle {} is not a member", to_string(id))});
    }
    if (!pos.emplace(id, i).second) {
      out.push_back({Violation::Kind::Duplicate, {id}, fmt::format("vehicle {} appears twice", to_string(id))});
    }
  }
  for (auto id : group) {
    if (!pos.count(id)) {
      out.push_back({Violation::Kind::Omission, {id}, fmt::format("vehicle {} is missing", to_string(id))});
    }
  }
  for (const auto& f : following) {
    auto l = pos.find(f.leader);
    auto r = pos.find(f.follower);
    if (l != pos.end() && r != pos.end() && r->second < l->second) {
      out.push_back({Violation::Kind::FollowingOrder, {f.leader, f.follower},
                     fmt::format("follower {} passes before its leader {}", to_string(f.follower),
                                 to_string(f.leader))});
    }
  }
  if (!precedences.empty()) {
    auto more = validate_precedences(precedences, group, following);
    for (auto& v : more) {
      if (v.kind != Violation::Kind::FollowingOrder) out.push_back(std::move(v));
    }
    for (const auto& p : precedences) {
      auto a = pos.find(p.first);
      auto b = pos.find(p.second);
      if (a != pos.end() && b != pos.end() && a->second > b->second) {
        out.push_back({Violation::Kind::Cycle, {p.first, p.second},
                       fmt::format("order places {} before {}, contradicting the agreed precedence",
                                   to_string(p.second), to_string(p.first))});
      }
    }
  }
  return out;
}

std::vector<Violation> validate_merge(std::span<const VehicleId> order, std::span<const PassOrder> intra_orders,
                                      std::span<const FollowingRelation> following) {
  std::vector<VehicleId> all;
  for (const auto& o : intra_orders) all.insert(all.end(), o.ordered_ids.begin(), o.ordered_ids.end());
  auto out = validate_order(order, all, following);
  std::unordered_map<VehicleId, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) pos.emplace(order[i], i);
  for (std::size_t g = 0; g < intra_orders.size(); ++g) {
    const auto& ids = intra_orders[g].ordered_ids;
    for (std::size_t k = 1; k < ids.size(); ++k) {
      auto a = pos.find(ids[k - 1]);
      auto b = pos.find(ids[k]);
      if (a != pos.end() && b != pos.end() && a->second > b->second) {
        out.push_back({Violation::Kind::GroupOrder, {ids[k - 1], ids[k]},
                       fmt::format("group {} order broken: {} must precede {}", g, to_string(ids[k - 1]),
                                   to_string(ids[k]))});
      }
    }
  }
  return out;
}

std::optional<std::vector<VehicleId>> linearize(std::span<const PrecedencePreference> precedences,
                                                const NegotiationContext& ctx) {
  const auto ids = ctx.member_ids();
  const auto idx = index_map(ids);
  OrderGraph g(ids.size());
  for (const auto& f : ctx.following) {
    auto l = idx.find(f.leader);
    auto r = idx.find(f.follower);
    if (l != idx.end() && r != idx.end()) g.add(l->second, r->second);
  }
  for (const auto& p : precedences) {
    auto a = idx.find(p.first);
    auto b = idx.find(p.second);
    if (a != idx.end() && b != idx.end() && a->second != b->second) g.add(a->second, b->second);
  }
  auto less = [&](std::size_t a, std::size_t b) {
    return std::tie(ctx.members[a].arrival, ids[a]) < std::tie(ctx.members[b].arrival, ids[b]);
  };
  const auto topo = g.topo(less);
  if (topo.size() < ids.size()) return std::nullopt;
  std::vector<VehicleId> out;
  for (auto i : topo) out.push_back(ids[i]);
  return out;
}

std::vector<VehicleId> fallback_merge(std::span<const PassOrder> intra_orders, const NegotiationContext& ctx) {
  std::vector<VehicleId> all;
  std::vector<std::pair<std::size_t, std::size_t>> where;  // (group, position)
  for (std::size_t g = 0; g < intra_orders.size(); ++g) {
    for (std::size_t k = 0; k < intra_orders[g].ordered_ids.size(); ++k) {
      all.push_back(intra_orders[g].ordered_ids[k]);
      where.emplace_back(g, k);
    }
  }
  const auto idx = index_map(all);
  auto arrival = [&](VehicleId id) {
    const auto* m = ctx.member(id);
    return m ? m->arrival : std::numeric_limits<double>::infinity();
  };

  std::vector<std::vector<std::size_t>> leaders(all.size());  // hard
  std::vector<std::vector<std::size_t>> agreed(all.size());   // soft
  for (const auto& f : ctx.following) {
    auto l = idx.find(f.leader);
    auto r = idx.find(f.follower);
    if (l != idx.end() && r != idx.end()) leaders[r->second].push_back(l->second);
  }
  for (const auto& p : ctx.agreed) {
    auto a = idx.find(p.first);
    auto b = idx.find(p.second);
    if (a != idx.end() && b != idx.end()) agreed[b->second].push_back(a->second);
  }

  std::vector<bool> placed(all.size(), false);
  std::vector<std::size_t> head(intra_orders.size(), 0);
  auto advance = [&](std::size_t g) {
    const auto& ids = intra_orders[g].ordered_ids;
    while (head[g] < ids.size() && placed[idx.at(ids[head[g]])]) ++head[g];
  };
  auto free_of = [&](std::size_t v, const std::vector<std::vector<std::size_t>>& deps) {
    return std::all_of(deps[v].begin(), deps[v].end(), [&](std::size_t u) { return placed[u]; });
  };
  auto better = [&](std::size_t a, std::size_t b) {
    return std::make_tuple(arrival(all[a]), all[a]) < std::make_tuple(arrival(all[b]), all[b]);
  };

  std::vector<VehicleId> out;
  while (out.size() < all.size()) {
    std::optional<std::size_t> pick;
    for (int tier = 0; tier < 2 && !pick; ++tier) {
      for (std::size_t g = 0; g < intra_orders.size(); ++g) {
        advance(g);
        if (head[g] >= intra_orders[g].ordered_ids.size()) continue;
        const auto v = idx.at(intra_orders[g].ordered_ids[head[g]]);
        if (!free_of(v, leaders)) continue;
        if (tier == 0 && !free_of(v, agreed)) continue;
        if (!pick || better(v, *pick)) pick = v;
      }
    }
    if (!pick) {
      // Group orders and following relations conflict; keep the following order.
      for (std::size_t v = 0; v < all.size(); ++v) {
        if (!placed[v] && free_of(v, leaders) && (!pick || better(v, *pick))) pick = v;
      }
    }
    if (!pick) {
      for (std::size_t v = 0; v < all.size() && !pick; ++v) {
        if (!placed[v]) pick = v;
      }
    }
    placed[*pick] = true;
    out.push_back(all[*pick]);
  }
  return out;
}

std::vector<PrecedencePreference> resolve_divergence(NegotiatorBackend& backend, const NegotiationContext& ctx,
                                                     std::span<const DisputedPair> disputed,
                                                     std::span<const PrecedencePreference> settled,
                                                     int max_retries) {
  if (disputed.empty()) throw std::invalid_argument("resolve_divergence: no disputed pairs");
  std::set<PairKey> wanted;
  for (const auto& d : disputed) wanted.insert(key_of(d.a, d.b));
  const auto ids = ctx.member_ids();

  std::string reason;
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    auto reply = backend.resolve(ctx, disputed);
    std::set<PairKey> seen;
    reason.clear();
    for (const auto& p : reply) {
      const auto k = key_of(p.first, p.second);
      if (!wanted.count(k) || p.first == p.second) {
        reason = fmt::format("resolution names pair ({}, {}) that is not disputed", to_string(p.first),
                             to_string(p.second));
        break;
      }
      if (!seen.insert(k).second) {
        reason = fmt::format("resolution repeats pair ({}, {})", to_string(k.first), to_string(k.second));
        break;
      }
    }
    if (reason.empty() && seen.size() != wanted.size()) reason = "resolution leaves a disputed pair undecided";
    if (reason.empty()) {
      std::vector<PrecedencePreference> combined(settled.begin(), settled.end());
      combined.insert(combined.end(), reply.begin(), reply.end());
      const auto violations = validate_precedences(combined, ids, ctx.following);
      if (violations.empty()) return reply;
      reason = violations.front().message;
    }
  }
  throw UnresolvableDispute("divergence unresolved after " + std::to_string(max_retries + 1) +
                            " attempts: " + reason);
}

PassOrder intra_group_order(NegotiatorBackend& backend, const NegotiationContext& ctx0,
                            const NegotiationOptions& options, std::optional<std::size_t> group,
                            NegotiationLog* log) {
  const auto ids = ctx0.member_ids();
  if (ids.empty()) throw std::invalid_argument("intra_group_order: empty group");
  PassOrder result;
  result.group = group;
  result.backend_name = backend.name();
  if (ids.size() == 1) {
    result.ordered_ids = ids;
    if (log) {
      auto e = event("result", "intra", group, 0);
      e["order"] = ids_json(ids);
      e["rounds"] = 0;
      e["fallback"] = false;
      log->push_back(std::move(e));
    }
    return result;
  }

  NegotiationContext ctx = ctx0;
  const int max_rounds = options.max_renegotiations + 1;
  for (int round = 1; round <= max_rounds; ++round) {
    std::vector<std::string> feedback;
    try {
      const auto opinions = generate_opinions(backend, ctx);
      if (log) {
        auto e = event("opinions", "intra", group, round);
        nlohmann::json ops = nlohmann::json::object();
        for (const auto& [id, prefs] : opinions) {
          auto arr = nlohmann::json::array();
          for (const auto& p : prefs) arr.push_back(to_json(p));
          ops[to_string(id)] = std::move(arr);
        }
        e["opinions"] = std::move(ops);
        log->push_back(std::move(e));
      }

      std::vector<PrecedencePreference> settled;
      std::vector<DisputedPair> disputed;
      nlohmann::json classes = nlohmann::json::array();
      for (const auto& c : ctx.conflicts) {
        const auto t = tally_consensus(opinions, c.a, c.b);
        classes.push_back({{"a", c.a.value},
                           {"b", c.b.value},
                           {"level", std::string(to_string(t.level))},
                           {"votes_a_first", t.votes_a_first},
                           {"votes_b_first", t.votes_b_first}});
        if (t.level == ConsensusLevel::Exact) {
          const bool a_first = t.votes_a_first > 0;
          settled.push_back({a_first ? c.a : c.b, a_first ? c.b : c.a, VehicleId{-1}, "exact consensus"});
        } else {
          disputed.push_back({c.a, c.b, t.level, t.votes_a_first, t.votes_b_first});
        }
      }
      if (log) {
        auto e = event("consensus", "intra", group, round);
        e["pairs"] = std::move(classes);
        log->push_back(std::move(e));
      }

      auto precedences = settled;
      if (!disputed.empty()) {
        auto resolved = resolve_divergence(backend, ctx, disputed, settled, options.resolve_retries);
        if (log) {
          auto e = event("resolution", "intra", group, round);
          auto arr = nlohmann::json::array();
          for (const auto& p : resolved) arr.push_back(to_json(p));
          e["precedences"] = std::move(arr);
          log->push_back(std::move(e));
        }
        precedences.insert(precedences.end(), resolved.begin(), resolved.end());
      }

      auto violations = validate_precedences(precedences, ids, ctx.following);
      std::vector<VehicleId> order;
      if (violations.empty()) {
        if (auto lin = linearize(precedences, ctx)) {
          order = std::move(*lin);
          violations = validate_order(order, ids, ctx.following, precedences);
        } else {
          violations.push_back({Violation::Kind::Cycle, ids, "precedences cannot be linearized"});
        }
      }
      if (violations.empty()) {
        result.ordered_ids = std::move(order);
        result.rounds_used = round;
        if (log) {
          auto e = event("result", "intra", group, round);
          e["order"] = ids_json(result.ordered_ids);
          e["rounds"] = round;
          e["fallback"] = false;
          log->push_back(std::move(e));
        }
        return result;
      }
      if (log) {
        auto e = event("violations", "intra", group, round);
        auto arr = nlohmann::json::array();
        for (const auto& v : violations) arr.push_back(to_json(v));
        e["violations"] = std::move(arr);
        log->push_back(std::move(e));
      }
      for (const auto& v : violations) feedback.push_back(v.message);
    } catch (const BackendError& e) {
      feedback.push_back(std::string("backend error: ") + e.what());
    } catch (const IncompleteOpinion& e) {
      feedback.push_back(e.what());
    } catch (const UnresolvableDispute& e) {
      feedback.push_back(e.what());
    }
    if (log && !feedback.empty()) {
      auto e = event("renegotiate", "intra", group, round);
      e["feedback"] = feedback;
      log->push_back(std::move(e));
    }
    ctx.feedback = std::move(feedback);
  }

  result.ordered_ids = RuleBackend::rank(ctx0);
  result.rounds_used = max_rounds;
  result.fallback = true;
  if (log) {
    auto e = event("fallback", "intra", group, max_rounds);
    e["order"] = ids_json(result.ordered_ids);
    e["rounds"] = max_rounds;
    e["fallback"] = true;
    log->push_back(std::move(e));
  }
  return result;
}

PassOrder inter_group_order(NegotiatorBackend& backend, std::span<const PassOrder> intra_orders,
                            const NegotiationContext& ctx0, const NegotiationOptions& options,
                            NegotiationLog* log) {
  std::unordered_set<VehicleId> seen;
  for (const auto& o : intra_orders) {
    for (auto id : o.ordered_ids) {
      if (!seen.insert(id).second) {
        throw std::invalid_argument("inter_group_order: vehicle " + to_string(id) + " is in two groups");
      }
    }
  }
  PassOrder result;
  result.backend_name = backend.name();
  if (intra_orders.size() <= 1) {
    if (!intra_orders.empty()) result.ordered_ids = intra_orders.front().ordered_ids;
    if (log) {
      auto e = event("result", "inter", std::nullopt, 0);
      e["order"] = ids_json(result.ordered_ids);
      e["rounds"] = 0;
      e["fallback"] = false;
      log->push_back(std::move(e));
    }
    return result;
  }

  NegotiationContext ctx = ctx0;
  const int max_rounds = options.max_renegotiations + 1;
  for (int round = 1; round <= max_rounds; ++round) {
    std::vector<std::string> feedback;
    try {
      auto proposal = backend.merge(intra_orders, ctx);
      const auto violations = validate_merge(proposal, intra_orders, ctx.following);
      if (violations.empty()) {
        result.ordered_ids = std::move(proposal);
        result.rounds_used = round;
        if (log) {
          auto e = event("result", "inter", std::nullopt, round);
          e["order"] = ids_json(result.ordered_ids);
          e["rounds"] = round;
          e["fallback"] = false;
          log->push_back(std::move(e));
        }
        return result;
      }
      if (log) {
        auto e = event("violations", "inter", std::nullopt, round);
        e["proposal"] = ids_json(proposal);
        auto arr = nlohmann::json::array();
        for (const auto& v : violations) arr.push_back(to_json(v));
        e["violations"] = std::move(arr);
        log->push_back(std::move(e));
      }
      for (const auto& v : violations) feedback.push_back(v.message);
    } catch (const BackendError& e) {
      feedback.push_back(std::string("backend error: ") + e.what());
    }
    ctx.feedback = std::move(feedback);
  }

  result.ordered_ids = fallback_merge(intra_orders, ctx0);
  result.rounds_used = max_rounds;
  result.fallback = true;
  if (log) {
    auto e = event("fallback", "inter", std::nullopt, max_rounds);
    e["order"] = ids_json(result.ordered_ids);
    e["rounds"] = max_rounds;
    e["fallback"] = true;
    log->push_back(std::move(e));
  }
  return result;
}

nlohmann::json to_json(const PrecedencePreference& p) {
  return {{"first", p.first.value}, {"second", p.second.value}, {"stated_by", p.stated_by.value},
          {"rationale", p.rationale}};
}

nlohmann::json to_json(const Violation& v) {
  return {{"kind", std::string(to_string(v.kind))}, {"vehicles", ids_json(v.vehicles)}, {"message", v.message}};
}

nlohmann::json to_json(const PassOrder& o) {
  nlohmann::json j{{"order", ids_json(o.ordered_ids)},
                   {"rounds", o.rounds_used},
                   {"backend", o.backend_name},
                   {"fallback", o.fallback}};
  j["group"] = o.group ? nlohmann::json(*o.group) : nlohmann::json(nullptr);
  return j;
}

}  // namespace vicoop
