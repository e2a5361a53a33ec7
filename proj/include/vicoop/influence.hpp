#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "vicoop/core.hpp"

namespace vicoop {

using Matrix = Eigen::MatrixXd;

// A[i][j] is the direct influence of vehicle i on vehicle j (1/s), diagonal 0.
using DirectInfluenceMatrix = Matrix;
// A / max(A), entries in [0, 1].
using NormalizedInfluenceMatrix = Matrix;
// F[i][j] is the summed influence of i on j over every simple path.
using CumulativeInfluenceMatrix = Matrix;

using Path = std::vector<std::size_t>;

class CoincidentPositions : public std::runtime_error {
 public:
  CoincidentPositions(VehicleId a, VehicleId b);
  VehicleId first;
  VehicleId second;
};

class SameEndpoints : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct FollowingRelation {
  VehicleId leader;
  VehicleId follower;
  double gap = 0.0;  // arc distance between the two vehicles, meters

  friend bool operator==(const FollowingRelation&, const FollowingRelation&) = default;
};

// Kinematic pressure of vehicle i (position xi, velocity vi) on vehicle j:
// closing speed along the line of sight over distance, scaled by the
// lateral-exposure factor sin(angle(v_j, x_j - x_i)) / 2 and gated at zero.
// Degenerate cases (no relative motion, stationary j) give 0.
double direct_influence(Vec2 xi, Vec2 vi, Vec2 xj, Vec2 vj);
double direct_influence(const VehicleState& i, const VehicleState& j);

DirectInfluenceMatrix direct_influence_matrix(std::span<const VehicleState> states);

NormalizedInfluenceMatrix normalize(const DirectInfluenceMatrix& a);

// Every simple path i -> j over positive edges, in DFS order (neighbors by
// ascending index).
std::vector<Path> enumerate_paths(const NormalizedInfluenceMatrix& a, std::size_t i, std::size_t j);

CumulativeInfluenceMatrix cumulative_influence_matrix(const NormalizedInfluenceMatrix& a);

// Adjacent same-route pairs ordered by arc position; the rear vehicle follows.
std::vector<FollowingRelation> following_relations(std::span<const VehicleState> states);

// Adds a symmetric edge pair at weight max(A) (or 1 when A is all zero) for
// every following relation with gap < max_gap. Collinear car-following
// geometry otherwise yields zero direct influence.
DirectInfluenceMatrix augment_following(const DirectInfluenceMatrix& a,
                                        std::span<const VehicleState> states,
                                        std::span<const FollowingRelation> relations,
                                        double max_gap);

struct InfluenceMatrices {
  DirectInfluenceMatrix direct;
  NormalizedInfluenceMatrix normalized;
  CumulativeInfluenceMatrix cumulative;
};

struct InfluenceOptions {
  bool following_augmentation = true;
  double following_gap = 25.0;
};

InfluenceMatrices compute_influence(std::span<const VehicleState> states,
                                    const InfluenceOptions& options = {});
// Same, with caller-supplied following relations.
InfluenceMatrices compute_influence(std::span<const VehicleState> states,
                                    std::span<const FollowingRelation> relations,
                                    const InfluenceOptions& options = {});

}  // namespace vicoop
