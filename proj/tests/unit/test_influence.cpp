#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "vicoop/influence.hpp"

using namespace vicoop;

namespace {

VehicleState vehicle(std::int64_t id, Vec2 x, Vec2 v, int route = -1, double arc = 0.0) {
  VehicleState s;
  s.id = VehicleId{id};
  s.position = x;
  s.velocity = v;
  s.route_id = route;
  s.arc_position = arc;
  return s;
}

}  // namespace

TEST_CASE("direct influence worked cases") {
  CHECK(direct_influence({0, 0}, {10, 0}, {50, 0}, {5, 0}) == 0.0);
  CHECK(direct_influence({0, 0}, {5, 0}, {50, 0}, {10, 0}) == 0.0);
  const double expected = (1.0 / 3.0) * std::sin(3.0 * kPi / 4.0) / 2.0;
  CHECK(direct_influence({0, -30}, {0, 10}, {-30, 0}, {10, 0}) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(0.11785).epsilon(1e-4));
  CHECK(direct_influence({0, 0}, {3, 4}, {20, 0}, {3, 4}) == 0.0);
  CHECK(direct_influence({0, 0}, {3, 4}, {20, 0}, {0, 0}) == 0.0);
}

TEST_CASE("coincident positions are rejected") {
  CHECK_THROWS_AS(direct_influence({1, 1}, {1, 0}, {1, 1 + 1e-7}, {0, 1}), CoincidentPositions);
  std::vector<VehicleState> s{vehicle(7, {0, 0}, {1, 0}), vehicle(9, {0, 0}, {0, 1})};
  try {
    direct_influence_matrix(s);
    FAIL("expected CoincidentPositions");
  } catch (const CoincidentPositions& e) {
    CHECK(e.first == VehicleId{7});
    CHECK(e.second == VehicleId{9});
  }
}

TEST_CASE("direct influence agrees with the angle form") {
  auto rng = seeded_rng(11, "influence-angles");
  for (int k = 0; k < 2000; ++k) {
    const auto xi = oracle::random_vec(rng, 60);
    const auto xj = oracle::random_vec(rng, 60);
    if ((xj - xi).norm() < 1e-3) continue;
    const auto vi = oracle::random_vec(rng, 12);
    const auto vj = oracle::random_vec(rng, 12);
    const double got = direct_influence(xi, vi, xj, vj);
    CHECK(got >= 0.0);
    CHECK(got == doctest::Approx(oracle::direct_influence_by_angles(xi, vi, xj, vj)).epsilon(1e-9).scale(1.0));
  }
}

TEST_CASE("anisotropy nulls and scale covariance") {
  auto rng = seeded_rng(12, "influence-props");
  for (int k = 0; k < 500; ++k) {
    const auto xi = oracle::random_vec(rng, 50);
    auto xj = oracle::random_vec(rng, 50);
    if ((xj - xi).norm() < 1.0) continue;
    const auto dx = xj - xi;
    const auto vi = oracle::random_vec(rng, 10);
    const double s = rng.uniform(0.1, 3.0);
    CHECK(direct_influence(xi, vi, xj, s * dx) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
    CHECK(direct_influence(xi, vi, xj, -s * dx) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));

    // Doubling relative velocity and distance, keeping v_j's direction.
    const auto vj = oracle::random_vec(rng, 10);
    const double base = direct_influence(xi, vi, xj, vj);
    const Vec2 xj2 = xi + 2.0 * dx;
    const Vec2 vi2 = vj + 2.0 * (vi - vj);
    CHECK(direct_influence(xi, vi2, xj2, vj) == doctest::Approx(base).epsilon(1e-9).scale(1.0));
  }
}

TEST_CASE("matrix assembly") {
  std::vector<VehicleState> one{vehicle(1, {0, 0}, {1, 0})};
  CHECK(direct_influence_matrix(one).isZero());
  CHECK(direct_influence_matrix(one).rows() == 1);

  std::vector<VehicleState> three{vehicle(1, {0, -30}, {0, 10}), vehicle(2, {-30, 0}, {10, 0}),
                                  vehicle(3, {0, 0}, {5, 0})};
  const auto a = direct_influence_matrix(three);
  for (int i = 0; i < 3; ++i) {
    CHECK(a(i, i) == 0.0);
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      CHECK(a(i, j) == direct_influence(three[i].position, three[i].velocity, three[j].position, three[j].velocity));
    }
  }

  std::vector<VehicleState> receding{vehicle(1, {0, 0}, {-5, 0}), vehicle(2, {50, 0}, {5, 0})};
  CHECK(direct_influence_matrix(receding).isZero());
}

TEST_CASE("normalize") {
  Matrix a(2, 2);
  a << 0, 0.2, 0.1, 0;
  const auto n = normalize(a);
  CHECK(n(0, 1) == 1.0);
  CHECK(n(1, 0) == doctest::Approx(0.5));
  CHECK(normalize(Matrix::Zero(3, 3)).isZero());
  Matrix b(2, 2);
  b << 0, 0.4, 0.3, 0;
  CHECK(normalize(b).maxCoeff() == 1.0);
}

TEST_CASE("path enumeration") {
  Matrix a = Matrix::Zero(3, 3);
  a(0, 1) = 0.5;
  a(1, 2) = 0.4;
  a(0, 2) = 0.2;
  const auto paths = enumerate_paths(a, 0, 2);
  REQUIRE(paths.size() == 2);
  CHECK(std::count(paths.begin(), paths.end(), Path{0, 2}) == 1);
  CHECK(std::count(paths.begin(), paths.end(), Path{0, 1, 2}) == 1);
  CHECK(enumerate_paths(a, 2, 0).empty());
  CHECK_THROWS_AS(enumerate_paths(a, 1, 1), SameEndpoints);

  Matrix full = Matrix::Ones(4, 4) - Matrix::Identity(4, 4);
  const auto all = enumerate_paths(full, 0, 3);
  CHECK(all.size() == 5);
  std::multiset<std::size_t> lengths;
  for (const auto& p : all) {
    lengths.insert(p.size() - 1);
    CHECK(p.front() == 0);
    CHECK(p.back() == 3);
    CHECK(std::set<std::size_t>(p.begin(), p.end()).size() == p.size());
  }
  CHECK(lengths == std::multiset<std::size_t>{1, 2, 2, 3, 3});
}

TEST_CASE("cumulative influence") {
  Matrix a = Matrix::Zero(3, 3);
  a(0, 1) = 0.5;
  a(1, 2) = 0.4;
  a(0, 2) = 0.2;
  const auto f = cumulative_influence_matrix(a);
  CHECK(f(0, 2) == doctest::Approx(0.4));
  CHECK(f(0, 1) == doctest::Approx(0.5));
  CHECK(f(2, 0) == 0.0);

  Matrix single = Matrix::Zero(3, 3);
  single(1, 2) = 0.7;
  CHECK(cumulative_influence_matrix(single) == single);
}

TEST_CASE("cumulative influence matches the permutation oracle") {
  auto rng = seeded_rng(5, "cumulative");
  for (int trial = 0; trial < 150; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(6));
    const auto a = oracle::random_digraph(rng, n, rng.uniform(0.1, 1.0));
    const auto f = cumulative_influence_matrix(a);
    const auto expected = oracle::cumulative_by_permutations(a);
    CHECK((f - expected).cwiseAbs().maxCoeff() <= 1e-12);
    // The direct edge is itself a path.
    CHECK(((f - a).minCoeff() >= -1e-15));
    CHECK(f.diagonal().isZero());
  }
}

TEST_CASE("following relations") {
  std::vector<VehicleState> two{vehicle(1, {0, 10}, {0, 8}, 3, 10.0), vehicle(2, {0, 30}, {0, 8}, 3, 30.0)};
  const auto rel = following_relations(two);
  REQUIRE(rel.size() == 1);
  CHECK(rel[0].leader == VehicleId{2});
  CHECK(rel[0].follower == VehicleId{1});
  CHECK(rel[0].gap == doctest::Approx(20.0));

  std::vector<VehicleState> distinct{vehicle(1, {0, 0}, {0, 8}, 0, 10.0), vehicle(2, {5, 0}, {0, 8}, 1, 30.0)};
  CHECK(following_relations(distinct).empty());

  std::vector<VehicleState> three{vehicle(1, {0, 50}, {0, 8}, 2, 50.0), vehicle(2, {0, 10}, {0, 8}, 2, 10.0),
                                  vehicle(3, {0, 30}, {0, 8}, 2, 30.0)};
  const auto chain = following_relations(three);
  REQUIRE(chain.size() == 2);
  for (const auto& r : chain) {
    const auto& l = *std::find_if(three.begin(), three.end(), [&](auto& s) { return s.id == r.leader; });
    const auto& f = *std::find_if(three.begin(), three.end(), [&](auto& s) { return s.id == r.follower; });
    CHECK(l.arc_position > f.arc_position);
    CHECK(r.gap == doctest::Approx(20.0));
  }
}

TEST_CASE("following augmentation") {
  std::vector<VehicleState> s{vehicle(1, {0, 10}, {0, 8}, 3, 10.0), vehicle(2, {0, 30}, {0, 8}, 3, 30.0),
                              vehicle(3, {-30, 45}, {8, 0}, 5, 20.0)};
  const auto rel = following_relations(s);
  const auto a = direct_influence_matrix(s);
  const auto aug = augment_following(a, s, rel, 25.0);
  const double top = std::max(a.maxCoeff(), 0.0);
  CHECK(aug(0, 1) == doctest::Approx(top > 0 ? top : 1.0));
  CHECK(aug(1, 0) == doctest::Approx(top > 0 ? top : 1.0));
  CHECK(augment_following(a, s, rel, 15.0) == a);

  const auto with = compute_influence(s);
  const auto without = compute_influence(s, InfluenceOptions{false, 25.0});
  CHECK(with.normalized(0, 1) > 0.0);
  CHECK(without.direct == a);
  CHECK(with.normalized.maxCoeff() <= 1.0);
}
