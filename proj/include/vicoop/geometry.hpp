#pragma once

#include <optional>
#include <span>
#include <vector>

#include "vicoop/core.hpp"

namespace vicoop {

// Four-way intersection centered at the origin with axis-aligned approaches
// and right-hand traffic. Every route starts `approach_length` before its stop
// line, so arc position == approach_length - distance to stop line on entry.
struct IntersectionGeometry {
  std::vector<Route> routes;
  std::vector<ConflictPoint> conflict_points;
  // routes.size()^2 table of conflict point indices (-1 when none).
  std::vector<int> pair_index;

  [[nodiscard]] const Route& route(int id) const { return routes.at(static_cast<std::size_t>(id)); }
  // Conflict point shared by two routes, if any (order of arguments irrelevant).
  [[nodiscard]] const ConflictPoint* conflict_between(int route_a, int route_b) const;
  [[nodiscard]] std::optional<int> conflict_index(int route_a, int route_b) const;
  // Route id for an (approach, movement, lane) triple, if such a route exists.
  [[nodiscard]] std::optional<int> find_route(Approach a, Movement m, int lane = 0) const;
};

IntersectionGeometry build_intersection(const ScenarioConfig& config);

// Conflict point of two polylines: the intersection with the smallest arc along
// `a` (start of the overlap for merging routes). Routes sharing an entry lane
// never conflict.
std::optional<ConflictPoint> route_conflict(const Route& a, const Route& b);

// Contact intervals of two routes around their conflict point: arcs where the
// centerlines are closer than `contact`. For merging routes the interval ends
// `contact` past the merge, after which the vehicles simply follow each other.
void fill_conflict_zone(ConflictPoint& cp, const Route& a, const Route& b, double contact, double box_half_width);

// Arc length of the projection of `p` onto `route` when p lies within `tol`
// of the centerline.
std::optional<double> project_onto(const Route& route, Vec2 p, double tol);

}  // namespace vicoop
