#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vicoop/influence.hpp"
#include "vicoop/rng.hpp"

namespace vicoop {

// Small directed pattern matched against the influence graph. Node indices are
// local to the motif; `anchors` are the two nodes whose images receive the
// similarity mass. For three-node motifs the remaining node is free.
struct Motif {
  std::string name;
  int node_count = 2;
  std::vector<std::pair<int, int>> edges;
  std::pair<int, int> anchors{0, 1};
};

// Ms, Md and the thirteen three-node motifs M1..M13. For the open wedges
// (M8..M13) the hub is node 2, so the anchors are the two leaves.
std::span<const Motif> motif_catalog();
const Motif& motif_by_name(std::string_view name);

class MotifArityUnsupported : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class IsolatedNode : public std::runtime_error {
 public:
  explicit IsolatedNode(std::size_t node);
  std::size_t node;
};
class EigenFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class UndefinedSilhouette : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using MotifAdjacencyMatrix = Matrix;

// Functional motif adjacency: every anchored placement whose motif edges all
// land on positive graph edges adds the mean mapped edge weight to M[i][j] and
// M[j][i]. Placements related by an anchor-swapping automorphism count once.
MotifAdjacencyMatrix motif_adjacency(const Matrix& w, const Motif& motif);

struct RandomWalkLaplacian {
  Matrix matrix;            // I - D^-1 M
  Eigen::VectorXd degrees;  // row sums of M
};

RandomWalkLaplacian random_walk_laplacian(const MotifAdjacencyMatrix& m);

// n x k matrix whose columns are unit-norm eigenvectors of L_rw for the k
// smallest eigenvalues; each column's first nonzero component is positive.
Matrix spectral_embedding(const RandomWalkLaplacian& laplacian, int k, bool row_normalize = false);

struct KMeansResult {
  std::vector<int> labels;
  Matrix centroids;
  int iterations = 0;
};

KMeansResult kmeans_pp(const Matrix& points, int k, SeededStream& rng);

double silhouette(const Matrix& points, std::span<const int> labels);

struct GroupPartition {
  std::vector<std::vector<std::size_t>> groups;  // sorted members, groups ordered by first member
  std::vector<std::size_t> assignment;           // vehicle index -> group index

  [[nodiscard]] std::size_t size() const { return groups.size(); }
};

// Builds a canonical partition from per-vertex labels.
GroupPartition partition_from_labels(std::span<const int> labels);

struct GroupingOptions {
  std::string motif = "Ms";
  int k_max = 6;
  double s_min = 0.25;
  bool row_normalize = false;
};

struct ComponentDiagnostics {
  std::vector<std::size_t> members;
  std::vector<std::pair<int, double>> silhouettes;  // (k, score)
  int chosen_k = 1;
};

struct GroupingDiagnostics {
  MotifAdjacencyMatrix mam;
  std::vector<ComponentDiagnostics> components;
};

GroupPartition divide_groups(const CumulativeInfluenceMatrix& f, const GroupingOptions& options,
                             SeededStream& rng, GroupingDiagnostics* diagnostics = nullptr);

}  // namespace vicoop
