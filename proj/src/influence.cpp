#include "vicoop/influence.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace vicoop {

CoincidentPositions::CoincidentPositions(VehicleId a, VehicleId b)
    : std::runtime_error("vehicles " + to_string(a) + " and " + to_string(b) +
                         " occupy the same position"),
      first(a),
      second(b) {}

double direct_influence(Vec2 xi, Vec2 vi, Vec2 xj, Vec2 vj) {
  const Vec2 dx = xj - xi;
  const double dist = dx.norm();
  if (dist <= kEpsPos) throw CoincidentPositions(VehicleId{-1}, VehicleId{-1});

  const Vec2 dv = vi - vj;
  const double closing = dv.norm();
  const double vj_norm = vj.norm();
  if (closing == 0.0 || vj_norm == 0.0) return 0.0;

  const double cos_theta = std::clamp(dot(dv, dx) / (closing * dist), -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  const double base = closing * std::cos(theta) / dist;

  // phi = pi - angle(v_j, dx), so sin(pi - phi) = |v_j x dx| / (|v_j| |dx|);
  // the cross-product form stays at rounding level for collinear geometry.
  const double exposure = std::min(1.0, std::abs(cross(vj, dx)) / (vj_norm * dist)) / 2.0;

  const double f = base * exposure;
  return f >= 0.0 ? f : 0.0;
}

double direct_influence(const VehicleState& i, const VehicleState& j) {
  if ((j.position - i.position).norm() <= kEpsPos) throw CoincidentPositions(i.id, j.id);
  return direct_influence(i.position, i.velocity, j.position, j.velocity);
}

DirectInfluenceMatrix direct_influence_matrix(std::span<const VehicleState> states) {
  const auto n = static_cast<Eigen::Index>(states.size());
  DirectInfluenceMatrix a = DirectInfluenceMatrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i != j) a(i, j) = direct_influence(states[i], states[j]);
    }
  }
  return a;
}

NormalizedInfluenceMatrix normalize(const DirectInfluenceMatrix& a) {
  if (a.size() == 0) return a;
  const double m = a.maxCoeff();
  if (!(m > 0.0)) return a;
  return a / m;
}

namespace {

void collect_paths(const Matrix& a, std::size_t node, std::size_t target, std::vector<bool>& on_path,
                   Path& current, std::vector<Path>& out) {
  const auto n = static_cast<std::size_t>(a.rows());
  for (std::size_t next = 0; next < n; ++next) {
    if (on_path[next] || !(a(node, next) > 0.0)) continue;
    current.push_back(next);
    if (next == target) {
      out.push_back(current);
    } else {
      on_path[next] = true;
      collect_paths(a, next, target, on_path, current, out);
      on_path[next] = false;
    }
    current.pop_back();
  }
}

// Walks every simple path out of `node`, adding the running product into the
// source's row of F.
void accumulate_from(const Matrix& a, std::size_t source, std::size_t node, double product,
                     std::vector<bool>& on_path, Matrix& f) {
  const auto n = static_cast<std::size_t>(a.rows());
  for (std::size_t next = 0; next < n; ++next) {
    if (on_path[next]) continue;
    const double w = a(node, next);
    if (!(w > 0.0)) continue;
    const double p = product * w;
    f(source, next) += p;
    on_path[next] = true;
    accumulate_from(a, source, next, p, on_path, f);
    on_path[next] = false;
  }
}

}  // namespace

std::vector<Path> enumerate_paths(const NormalizedInfluenceMatrix& a, std::size_t i, std::size_t j) {
  if (i == j) throw SameEndpoints("enumerate_paths: source equals target");
  const auto n = static_cast<std::size_t>(a.rows());
  if (i >= n || j >= n) throw std::out_of_range("enumerate_paths: index out of range");
  std::vector<Path> out;
  std::vector<bool> on_path(n, false);
  on_path[i] = true;
  Path current{i};
  collect_paths(a, i, j, on_path, current, out);
  return out;
}

CumulativeInfluenceMatrix cumulative_influence_matrix(const NormalizedInfluenceMatrix& a) {
  const auto n = static_cast<std::size_t>(a.rows());
  Matrix f = Matrix::Zero(a.rows(), a.cols());
  std::vector<bool> on_path(n, false);
  for (std::size_t s = 0; s < n; ++s) {
    on_path[s] = true;
    accumulate_from(a, s, s, 1.0, on_path, f);
    on_path[s] = false;
  }
  // Paths returning to the source are cycles, not i -> i influence.
  f.diagonal().setZero();
  return f;
}

std::vector<FollowingRelation> following_relations(std::span<const VehicleState> states) {
  std::map<int, std::vector<const VehicleState*>> by_route;
  for (const auto& s : states) by_route[s.route_id].push_back(&s);

  std::vector<FollowingRelation> out;
  for (auto& [route, members] : by_route) {
    std::sort(members.begin(), members.end(), [](const VehicleState* a, const VehicleState* b) {
      if (a->arc_position != b->arc_position) return a->arc_position > b->arc_position;
      return a->id < b->id;
    });
    for (std::size_t k = 1; k < members.size(); ++k) {
      const double gap = members[k - 1]->arc_position - members[k]->arc_position;
      if (gap > 0.0) out.push_back({members[k - 1]->id, members[k]->id, gap});
    }
  }
  return out;
}

DirectInfluenceMatrix augment_following(const DirectInfluenceMatrix& a,
                                        std::span<const VehicleState> states,
                                        std::span<const FollowingRelation> relations,
                                        double max_gap) {
  DirectInfluenceMatrix out = a;
  if (a.size() == 0) return out;
  const double peak = a.maxCoeff();
  const double w = peak > 0.0 ? peak : 1.0;
  auto index_of = [&](VehicleId id) -> Eigen::Index {
    for (std::size_t k = 0; k < states.size(); ++k) {
      if (states[k].id == id) return static_cast<Eigen::Index>(k);
    }
    return -1;
  };
  for (const auto& rel : relations) {
    if (!(rel.gap < max_gap)) continue;
    const auto l = index_of(rel.leader);
    const auto f = index_of(rel.follower);
    if (l < 0 || f < 0) continue;
    out(l, f) = std::max(out(l, f), w);
    out(f, l) = std::max(out(f, l), w);
  }
  return out;
}

InfluenceMatrices compute_influence(std::span<const VehicleState> states, const InfluenceOptions& options) {
  const auto rel = following_relations(states);
  return compute_influence(states, rel, options);
}

InfluenceMatrices compute_influence(std::span<const VehicleState> states,
                                    std::span<const FollowingRelation> relations,
                                    const InfluenceOptions& options) {
  InfluenceMatrices m;
  m.direct = direct_influence_matrix(states);
  if (options.following_augmentation) {
    m.direct = augment_following(m.direct, states, relations, options.following_gap);
  }
  m.normalized = normalize(m.direct);
  m.cumulative = cumulative_influence_matrix(m.normalized);
  return m;
}

}  // namespace vicoop
