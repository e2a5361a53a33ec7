#include "vicoop/grouping.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <queue>
#include <set>

#include <Eigen/Eigenvalues>

namespace vicoop {

namespace {

std::vector<Motif> build_catalog() {
  using E = std::vector<std::pair<int, int>>;
  std::vector<Motif> c;
  c.push_back({"Ms", 2, E{{0, 1}}, {0, 1}});
  c.push_back({"Md", 2, E{{0, 1}, {1, 0}}, {0, 1}});
  // Closed triads.
  c.push_back({"M1", 3, E{{0, 1}, {1, 2}, {2, 0}}, {0, 1}});
  c.push_back({"M2", 3, E{{0, 1}, {1, 0}, {1, 2}, {2, 0}}, {0, 1}});
  c.push_back({"M3", 3, E{{0, 1}, {1, 0}, {1, 2}, {2, 1}, {2, 0}}, {0, 1}});
  c.push_back({"M4", 3, E{{0, 1}, {1, 0}, {1, 2}, {2, 1}, {2, 0}, {0, 2}}, {0, 1}});
  c.push_back({"M5", 3, E{{0, 1}, {1, 2}, {0, 2}}, {0, 1}});
  c.push_back({"M6", 3, E{{0, 1}, {1, 0}, {0, 2}, {1, 2}}, {0, 1}});
  c.push_back({"M7", 3, E{{0, 1}, {1, 0}, {2, 0}, {2, 1}}, {0, 1}});
  // Open wedges, hub = node 2.
  c.push_back({"M8", 3, E{{2, 0}, {2, 1}}, {0, 1}});
  c.push_back({"M9", 3, E{{0, 2}, {2, 1}}, {0, 1}});
  c.push_back({"M10", 3, E{{0, 2}, {1, 2}}, {0, 1}});
  c.push_back({"M11", 3, E{{2, 0}, {0, 2}, {2, 1}}, {0, 1}});
  c.push_back({"M12", 3, E{{2, 0}, {0, 2}, {1, 2}}, {0, 1}});
  c.push_back({"M13", 3, E{{2, 0}, {0, 2}, {2, 1}, {1, 2}}, {0, 1}});
  return c;
}

void check_motif(const Motif& motif) {
  if (motif.node_count != 2 && motif.node_count != 3) {
    throw MotifArityUnsupported("motif " + motif.name + " has " + std::to_string(motif.node_count) +
                                " nodes; only 2 or 3 are supported");
  }
  if (motif.edges.empty()) throw std::invalid_argument("motif " + motif.name + " has no edges");
  const auto [a, b] = motif.anchors;
  if (a == b) throw std::invalid_argument("motif anchors must be distinct");
  auto in_range = [&](int v) { return v >= 0 && v < motif.node_count; };
  if (!in_range(a) || !in_range(b)) throw std::invalid_argument("motif anchor out of range");
  for (auto [u, v] : motif.edges) {
    if (!in_range(u) || !in_range(v) || u == v) throw std::invalid_argument("bad motif edge");
  }
}

// True when exchanging the two anchors maps the edge set onto itself.
bool anchor_swap_symmetric(const Motif& motif) {
  const auto [a, b] = motif.anchors;
  auto swap = [&](int v) { return v == a ? b : (v == b ? a : v); };
  std::set<std::pair<int, int>> edges(motif.edges.begin(), motif.edges.end());
  for (auto [u, v] : motif.edges) {
    if (!edges.count({swap(u), swap(v)})) return false;
  }
  return true;
}

}  // namespace

std::span<const Motif> motif_catalog() {
  static const std::vector<Motif> catalog = build_catalog();
  return catalog;
}

const Motif& motif_by_name(std::string_view name) {
  for (const auto& m : motif_catalog()) {
    if (m.name == name) return m;
  }
  throw std::invalid_argument("unknown motif: " + std::string(name));
}

IsolatedNode::IsolatedNode(std::size_t n)
    : std::runtime_error("node " + std::to_string(n) + " has zero motif degree"), node(n) {}

MotifAdjacencyMatrix motif_adjacency(const Matrix& w, const Motif& motif) {
  check_motif(motif);
  const auto n = static_cast<int>(w.rows());
  const auto [anchor_a, anchor_b] = motif.anchors;
  const int free_node = motif.node_count == 3 ? 3 - anchor_a - anchor_b : -1;
  const double edge_count = static_cast<double>(motif.edges.size());

  Matrix c = Matrix::Zero(n, n);
  int image[3] = {0, 0, 0};

  auto placement_weight = [&]() -> double {
    double sum = 0.0;
    for (auto [u, v] : motif.edges) {
      const double x = w(image[u], image[v]);
      if (!(x > 0.0)) return 0.0;
      sum += x;
    }
    return sum / edge_count;
  };

  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      image[anchor_a] = i;
      image[anchor_b] = j;
      if (free_node < 0) {
        c(i, j) += placement_weight();
        continue;
      }
      for (int k = 0; k < n; ++k) {
        if (k == i || k == j) continue;
        image[free_node] = k;
        c(i, j) += placement_weight();
      }
    }
  }
  // Averaging keeps the result exactly symmetric under rounding.
  if (anchor_swap_symmetric(motif)) return 0.5 * (c + c.transpose());
  return c + c.transpose();
}

RandomWalkLaplacian random_walk_laplacian(const MotifAdjacencyMatrix& m) {
  const auto n = m.rows();
  RandomWalkLaplacian out;
  out.degrees = m.rowwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(out.degrees(i) > 0.0)) throw IsolatedNode(static_cast<std::size_t>(i));
  }
  out.matrix = Matrix::Identity(n, n) - out.degrees.cwiseInverse().asDiagonal() * m;
  return out;
}

Matrix spectral_embedding(const RandomWalkLaplacian& laplacian, int k, bool row_normalize) {
  const auto n = laplacian.matrix.rows();
  if (k < 1 || k > n) throw std::invalid_argument("spectral_embedding: need 1 <= k <= n");

  // L_sym = D^1/2 L_rw D^-1/2 is symmetric and shares the spectrum of L_rw.
  const Eigen::VectorXd sqrt_d = laplacian.degrees.cwiseSqrt();
  Matrix sym = sqrt_d.asDiagonal() * laplacian.matrix * sqrt_d.cwiseInverse().asDiagonal();
  sym = 0.5 * (sym + sym.transpose());

  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
  if (solver.info() != Eigen::Success) throw EigenFailure("symmetric eigensolver did not converge");

  Matrix emb(n, k);
  for (int c = 0; c < k; ++c) {
    Eigen::VectorXd v = sqrt_d.cwiseInverse().cwiseProduct(solver.eigenvectors().col(c));
    v.normalize();
    const double lambda = solver.eigenvalues()(c);
    const double residual = (laplacian.matrix * v - lambda * v).norm();
    if (!(residual <= 1e-8)) {
      throw EigenFailure("eigenvector residual " + std::to_string(residual) + " exceeds tolerance");
    }
    for (Eigen::Index r = 0; r < n; ++r) {
      if (std::abs(v(r)) > 1e-12) {
        if (v(r) < 0.0) v = -v;
        break;
      }
    }
    emb.col(c) = v;
  }
  if (row_normalize) {
    for (Eigen::Index r = 0; r < n; ++r) {
      const double norm = emb.row(r).norm();
      if (norm > 0.0) emb.row(r) /= norm;
    }
  }
  return emb;
}

KMeansResult kmeans_pp(const Matrix& points, int k, SeededStream& rng) {
  const auto n = static_cast<int>(points.rows());
  if (k < 1 || k > n) throw std::invalid_argument("kmeans_pp: need 1 <= k <= n");
  const auto dim = points.cols();

  // k-means++ seeding.
  std::vector<int> centers;
  centers.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(n))));
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < k) {
    const auto& last = points.row(centers.back());
    double total = 0.0;
    for (int p = 0; p < n; ++p) {
      d2[p] = std::min(d2[p], (points.row(p) - last).squaredNorm());
      total += d2[p];
    }
    int pick = -1;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      for (int p = 0; p < n; ++p) {
        acc += d2[p];
        if (d2[p] > 0.0 && r < acc) {
          pick = p;
          break;
        }
      }
      if (pick < 0) {
        for (int p = n - 1; p >= 0; --p) {
          if (d2[p] > 0.0) {
            pick = p;
            break;
          }
        }
      }
    } else {
      for (int p = 0; p < n && pick < 0; ++p) {
        if (std::find(centers.begin(), centers.end(), p) == centers.end()) pick = p;
      }
    }
    centers.push_back(pick);
  }

  KMeansResult res;
  res.centroids = Matrix(k, dim);
  for (int c = 0; c < k; ++c) res.centroids.row(c) = points.row(centers[c]);
  res.labels.assign(n, 0);

  auto assign = [&]() {
    for (int p = 0; p < n; ++p) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (points.row(p) - res.centroids.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      res.labels[p] = best;
    }
  };

  for (res.iterations = 1; res.iterations <= 300; ++res.iterations) {
    assign();
    Matrix next = Matrix::Zero(k, dim);
    std::vector<int> count(k, 0);
    for (int p = 0; p < n; ++p) {
      next.row(res.labels[p]) += points.row(p);
      ++count[res.labels[p]];
    }
    for (int c = 0; c < k; ++c) {
      if (count[c] > 0) {
        next.row(c) /= count[c];
        continue;
      }
      // Empty cluster: take over the point farthest from its centroid.
      int far = 0;
      double far_d = -1.0;
      for (int p = 0; p < n; ++p) {
        if (count[res.labels[p]] <= 1) continue;
        const double d = (points.row(p) - res.centroids.row(res.labels[p])).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = p;
        }
      }
      --count[res.labels[far]];
      res.labels[far] = c;
      count[c] = 1;
      next.row(c) = points.row(far);
    }
    const double shift = (next - res.centroids).rowwise().norm().maxCoeff();
    res.centroids = next;
    if (shift < 1e-9) break;
  }
  res.iterations = std::min(res.iterations, 300);
  assign();
  return res;
}

double silhouette(const Matrix& points, std::span<const int> labels) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (labels.size() != n) throw std::invalid_argument("silhouette: label count mismatch");
  std::map<int, std::vector<std::size_t>> clusters;
  for (std::size_t p = 0; p < n; ++p) clusters[labels[p]].push_back(p);
  if (clusters.size() < 2) throw UndefinedSilhouette("silhouette needs at least two clusters");
  if (n < 3) throw UndefinedSilhouette("silhouette needs at least three points");

  auto mean_distance = [&](std::size_t p, const std::vector<std::size_t>& members) {
    double sum = 0.0;
    std::size_t count = 0;
    for (auto q : members) {
      if (q == p) continue;
      sum += (points.row(p) - points.row(q)).norm();
      ++count;
    }
    return count ? sum / static_cast<double>(count) : 0.0;
  };

  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    const auto& own = clusters[labels[p]];
    if (own.size() == 1) continue;
    const double a = mean_distance(p, own);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, members] : clusters) {
      if (label != labels[p]) b = std::min(b, mean_distance(p, members));
    }
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

GroupPartition partition_from_labels(std::span<const int> labels) {
  GroupPartition part;
  part.assignment.assign(labels.size(), 0);
  std::map<int, std::size_t> group_of;
  for (std::size_t v = 0; v < labels.size(); ++v) {
    auto [it, fresh] = group_of.try_emplace(labels[v], part.groups.size());
    if (fresh) part.groups.emplace_back();
    part.groups[it->second].push_back(v);
    part.assignment[v] = it->second;
  }
  return part;
}

namespace {

std::vector<std::vector<std::size_t>> connected_components(const Matrix& m) {
  const auto n = static_cast<std::size_t>(m.rows());
  std::vector<int> comp(n, -1);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    const int id = static_cast<int>(out.size());
    out.emplace_back();
    std::queue<std::size_t> q;
    q.push(s);
    comp[s] = id;
    while (!q.empty()) {
      const auto u = q.front();
      q.pop();
      out.back().push_back(u);
      for (std::size_t v = 0; v < n; ++v) {
        if (comp[v] < 0 && m(u, v) > 0.0) {
          comp[v] = id;
          q.push(v);
        }
      }
    }
    std::sort(out.back().begin(), out.back().end());
  }
  return out;
}

}  // namespace

GroupPartition divide_groups(const CumulativeInfluenceMatrix& f, const GroupingOptions& options,
                             SeededStream& rng, GroupingDiagnostics* diagnostics) {
  const auto n = static_cast<std::size_t>(f.rows());
  if (f.cols() != f.rows()) throw std::invalid_argument("divide_groups: matrix must be square");
  if (n == 0) return {};

  Matrix w = normalize(f.cwiseMax(0.0));
  w.diagonal().setZero();
  const Matrix mam = motif_adjacency(w, motif_by_name(options.motif));
  if (diagnostics) {
    diagnostics->mam = mam;
    diagnostics->components.clear();
  }

  // Provisional labels: component index * (k_max + 1) + cluster index keeps
  // labels distinct across components; partition_from_labels canonicalizes.
  std::vector<int> labels(n, 0);
  const int stride = options.k_max + 1;
  const auto components = connected_components(mam);
  for (std::size_t ci = 0; ci < components.size(); ++ci) {
    const auto& members = components[ci];
    const int base = static_cast<int>(ci) * stride;
    ComponentDiagnostics diag;
    diag.members = members;
    for (auto v : members) labels[v] = base;

    const auto nc = static_cast<int>(members.size());
    if (nc >= 3) {
      Matrix sub(nc, nc);
      for (int a = 0; a < nc; ++a) {
        for (int b = 0; b < nc; ++b) sub(a, b) = mam(members[a], members[b]);
      }
      const auto lap = random_walk_laplacian(sub);
      double best_score = -std::numeric_limits<double>::infinity();
      std::vector<int> best_labels;
      const int k_hi = std::min(nc - 1, options.k_max);
      for (int k = 2; k <= k_hi; ++k) {
        const Matrix emb = spectral_embedding(lap, k, options.row_normalize);
        const auto km = kmeans_pp(emb, k, rng);
        if (std::set<int>(km.labels.begin(), km.labels.end()).size() < 2) continue;
        const double s = silhouette(emb, km.labels);
        diag.silhouettes.emplace_back(k, s);
        if (s > best_score) {
          best_score = s;
          best_labels = km.labels;
          diag.chosen_k = k;
        }
      }
      if (!best_labels.empty() && best_score >= options.s_min) {
        for (int a = 0; a < nc; ++a) labels[members[a]] = base + best_labels[a];
      } else {
        diag.chosen_k = 1;
      }
    }
    if (diagnostics) diagnostics->components.push_back(std::move(diag));
  }
  return partition_from_labels(labels);
}

}  // namespace vicoop
