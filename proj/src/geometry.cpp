#include "vicoop/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vicoop {

namespace {

constexpr int kArcSegments = 24;

Vec2 rotate(Vec2 p, int quarter_turns) {
  for (int i = 0; i < quarter_turns; ++i) p = {-p.y, p.x};
  return p;
}

// Quarter turns (counter-clockwise) that map the south approach onto `a`.
int turns_for(Approach a) {
  switch (a) {
    case Approach::S: return 0;
    case Approach::E: return 1;
    case Approach::N: return 2;
    case Approach::W: return 3;
  }
  return 0;
}

void append_arc(std::vector<Vec2>& pts, Vec2 center, double radius, double from, double to) {
  for (int s = 1; s <= kArcSegments; ++s) {
    const double a = from + (to - from) * s / kArcSegments;
    pts.push_back({center.x + radius * std::cos(a), center.y + radius * std::sin(a)});
  }
}

// Route for a northbound vehicle entering from the south, before rotation.
std::vector<Vec2> south_route(Movement m, double offset, const ScenarioConfig& c) {
  const double r = c.box_half_width;
  std::vector<Vec2> pts{{offset, -r - c.approach_length}, {offset, -r}};
  switch (m) {
    case Movement::Straight:
      pts.push_back({offset, r});
      pts.push_back({offset, r + c.exit_length});
      break;
    case Movement::Left:
      append_arc(pts, {-r, -r}, r + offset, 0.0, kPi / 2);
      pts.back() = {-r, offset};
      pts.push_back({-r - c.exit_length, offset});
      break;
    case Movement::Right:
      append_arc(pts, {r, -r}, r - offset, kPi, kPi / 2);
      pts.back() = {r, -offset};
      pts.push_back({r + c.exit_length, -offset});
      break;
  }
  return pts;
}

struct Hit {
  double arc_a;
  double arc_b;
  Vec2 at;
};

// Intersections of segments p0p1 and q0q1 (collinear overlap yields its two
// extreme points).
void segment_hits(Vec2 p0, Vec2 p1, Vec2 q0, Vec2 q1, std::vector<std::pair<double, double>>& out) {
  const Vec2 r = p1 - p0;
  const Vec2 s = q1 - q0;
  const double denom = cross(r, s);
  const Vec2 qp = q0 - p0;
  const double tol = 1e-9;
  if (std::abs(denom) > tol * r.norm() * s.norm()) {
    const double t = cross(qp, s) / denom;
    const double u = cross(qp, r) / denom;
    if (t >= -tol && t <= 1 + tol && u >= -tol && u <= 1 + tol) {
      out.emplace_back(std::clamp(t, 0.0, 1.0), std::clamp(u, 0.0, 1.0));
    }
    return;
  }
  // Parallel: only collinear overlaps matter.
  if (std::abs(cross(qp, r)) > kEpsGeo * r.norm()) return;
  const double rr = dot(r, r);
  const double ss = dot(s, s);
  auto add_p = [&](double t) {
    if (t < -tol || t > 1 + tol) return;
    const Vec2 pt = p0 + std::clamp(t, 0.0, 1.0) * r;
    const double u = dot(pt - q0, s) / ss;
    if (u >= -tol && u <= 1 + tol) out.emplace_back(std::clamp(t, 0.0, 1.0), std::clamp(u, 0.0, 1.0));
  };
  add_p(dot(q0 - p0, r) / rr);
  add_p(dot(q1 - p0, r) / rr);
  add_p(0.0);
  add_p(1.0);
}

}  // namespace

std::optional<ConflictPoint> route_conflict(const Route& a, const Route& b) {
  if (a.id() == b.id()) return std::nullopt;
  if (a.approach() == b.approach() && a.lane_index() == b.lane_index()) return std::nullopt;

  std::optional<Hit> best;
  const auto& pa = a.points();
  const auto& pb = b.points();
  std::vector<std::pair<double, double>> hits;
  for (std::size_t i = 0; i + 1 < pa.size(); ++i) {
    for (std::size_t j = 0; j + 1 < pb.size(); ++j) {
      hits.clear();
      segment_hits(pa[i], pa[i + 1], pb[j], pb[j + 1], hits);
      for (auto [t, u] : hits) {
        const double arc_a = a.arcs()[i] + t * (a.arcs()[i + 1] - a.arcs()[i]);
        const double arc_b = b.arcs()[j] + u * (b.arcs()[j + 1] - b.arcs()[j]);
        if (!best || arc_a < best->arc_a - 1e-12) {
          best = Hit{arc_a, arc_b, pa[i] + t * (pa[i + 1] - pa[i])};
        }
      }
    }
  }
  if (!best) return std::nullopt;
  return ConflictPoint{a.id(), b.id(), best->arc_a, best->arc_b, best->at};
}

void fill_conflict_zone(ConflictPoint& cp, const Route& a, const Route& b, double contact, double box_half_width) {
  constexpr double kStep = 0.2;
  const double margin = contact + 2.0 * box_half_width;
  auto window = [&](const Route& r) {
    const double lo = std::max(0.0, r.stop_line_arc() - margin);
    const double hi = std::min(r.length(), r.stop_line_arc() + 2.0 * margin);
    std::vector<std::pair<double, Vec2>> pts;
    for (double s = lo; s <= hi + 1e-9; s += kStep) pts.emplace_back(s, r.point_at(s));
    return pts;
  };
  const auto pa = window(a);
  const auto pb = window(b);
  double a_lo = cp.arc_a, a_hi = cp.arc_a, b_lo = cp.arc_b, b_hi = cp.arc_b;
  const double c2 = contact * contact;
  for (const auto& [sa, xa] : pa) {
    for (const auto& [sb, xb] : pb) {
      const Vec2 d = xa - xb;
      if (dot(d, d) < c2) {
        a_lo = std::min(a_lo, sa);
        a_hi = std::max(a_hi, sa);
        b_lo = std::min(b_lo, sb);
        b_hi = std::max(b_hi, sb);
      }
    }
  }
  const bool merge = a_hi >= pa.back().first - kStep || b_hi >= pb.back().first - kStep;
  if (merge) {
    a_hi = std::min(a_hi, cp.arc_a + contact);
    b_hi = std::min(b_hi, cp.arc_b + contact);
  }
  cp.zone_a = {a_lo, a_hi};
  cp.zone_b = {b_lo, b_hi};
}

std::optional<double> project_onto(const Route& route, Vec2 p, double tol) {
  const auto& pts = route.points();
  std::optional<double> best;
  double best_d = tol;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const Vec2 seg = pts[i + 1] - pts[i];
    const double len2 = dot(seg, seg);
    const double t = std::clamp(dot(p - pts[i], seg) / len2, 0.0, 1.0);
    const Vec2 foot = pts[i] + t * seg;
    const double d = (p - foot).norm();
    if (d <= best_d) {
      best_d = d;
      best = route.arcs()[i] + t * (route.arcs()[i + 1] - route.arcs()[i]);
    }
  }
  return best;
}

IntersectionGeometry build_intersection(const ScenarioConfig& config) {
  IntersectionGeometry g;
  const Approach approaches[] = {Approach::N, Approach::S, Approach::E, Approach::W};
  for (Approach ap : approaches) {
    for (int lane = 0; lane < config.lanes_per_direction; ++lane) {
      std::vector<Movement> moves;
      if (config.lanes_per_direction == 1) {
        moves = {Movement::Straight, Movement::Left, Movement::Right};
      } else if (lane == 0) {
        moves = {Movement::Straight, Movement::Left};
      } else {
        moves = {Movement::Straight, Movement::Right};
      }
      const double offset = (lane + 0.5) * config.lane_width;
      for (Movement m : moves) {
        auto pts = south_route(m, offset, config);
        for (auto& p : pts) p = rotate(p, turns_for(ap));
        g.routes.emplace_back(static_cast<int>(g.routes.size()), ap, m, lane, std::move(pts),
                              config.approach_length);
      }
    }
  }
  for (std::size_t i = 0; i < g.routes.size(); ++i) {
    for (std::size_t j = i + 1; j < g.routes.size(); ++j) {
      if (auto cp = route_conflict(g.routes[i], g.routes[j])) {
        fill_conflict_zone(*cp, g.routes[i], g.routes[j], config.collision_factor * config.vehicle_length,
                           config.box_half_width);
        g.conflict_points.push_back(*cp);
      }
    }
  }
  const auto nr = g.routes.size();
  g.pair_index.assign(nr * nr, -1);
  for (std::size_t k = 0; k < g.conflict_points.size(); ++k) {
    const auto a = static_cast<std::size_t>(g.conflict_points[k].route_a);
    const auto b = static_cast<std::size_t>(g.conflict_points[k].route_b);
    g.pair_index[a * nr + b] = g.pair_index[b * nr + a] = static_cast<int>(k);
  }
  return g;
}

const ConflictPoint* IntersectionGeometry::conflict_between(int route_a, int route_b) const {
  auto idx = conflict_index(route_a, route_b);
  return idx ? &conflict_points[static_cast<std::size_t>(*idx)] : nullptr;
}

std::optional<int> IntersectionGeometry::conflict_index(int route_a, int route_b) const {
  const auto nr = routes.size();
  if (pair_index.size() == nr * nr && route_a >= 0 && route_b >= 0 &&
      static_cast<std::size_t>(route_a) < nr && static_cast<std::size_t>(route_b) < nr) {
    const int k = pair_index[static_cast<std::size_t>(route_a) * nr + static_cast<std::size_t>(route_b)];
    if (k < 0) return std::nullopt;
    return k;
  }
  for (std::size_t k = 0; k < conflict_points.size(); ++k) {
    const auto& cp = conflict_points[k];
    if ((cp.route_a == route_a && cp.route_b == route_b) || (cp.route_a == route_b && cp.route_b == route_a)) {
      return static_cast<int>(k);
    }
  }
  return std::nullopt;
}

std::optional<int> IntersectionGeometry::find_route(Approach a, Movement m, int lane) const {
  for (const auto& r : routes) {
    if (r.approach() == a && r.movement() == m && r.lane_index() == lane) return r.id();
  }
  return std::nullopt;
}

}  // namespace vicoop
