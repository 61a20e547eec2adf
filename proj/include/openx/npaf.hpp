#pragma once

#include "openx/graph.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace openx {

inline constexpr int kDegreeBuckets = 5;

// One-hot degree bucket (1, 2, 3, 4, >=5; degree 0 shares bucket 1) followed by
// one-hot node type. Types >= num_types are clamped into the last slot.
Matrix structure_features(const Graph& g, int num_types);

struct StructureEmbeddings {
  Matrix nodes;  // n x (d_s * (T + 1))
  Vector graph;  // mean over node rows
};

// Continuous WL: h_t = (h_{t-1} + mean_neighbors(h_{t-1})) / 2, iterations
// concatenated. An isolated node keeps its own value.
StructureEmbeddings wl_embed(const Graph& g, const Matrix& x_str, int iterations);

struct KMeansResult {
  Matrix centers;  // K x d
  std::vector<int> assignment;
  std::vector<double> inertia_history;  // after every assignment step
  double inertia = 0.0;
};

// k-means++ seeding and Lloyd iterations; ties go to the lowest center index
// and empty clusters are reseeded at the farthest point.
KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter = 100,
                    double tol = 1e-4);
int nearest_center(const Matrix& centers, const Vector& x);
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

// Sum over columns of the within-group variance of the rows.
double group_variance(const Matrix& rows);
// d S / d h_i = 2 (h_i - mean) / N for every row.
Matrix group_variance_gradient(const Matrix& rows);

struct NodeScores {
  Vector scores;
  Mask causal;  // V_c: score strictly above the group median
};
NodeScores causal_nodes(const Matrix& group_rows);

struct EdgeScores {
  Vector scores;
  Mask env_critical;  // G_s: score > mean + std
};
EdgeScores causal_edges(const Graph& g, const Vector& center, int num_types, int iterations);

// Base-2 Jensen-Shannon divergence between two distributions.
double js_divergence(const Vector& p, const Vector& q);
Vector histogram(const std::vector<double>& values, double lo, double hi, int bins);

struct NpafConfig {
  int k = 5;
  int wl_iters = 3;
  int num_types = 2;
  double theta = 0.2;
  int bins = 16;
  int refine_rounds = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

// Mean pairwise JS divergence per dimension across node groups.
// node_groups[i][v] is the group of node v of graphs[i], or -1 to skip it.
// Histogram bins span each dimension's range over all graphs.
std::vector<double> mean_pairwise_js(const std::vector<const Graph*>& graphs,
                                     const std::vector<std::vector<int>>& node_groups,
                                     int bins);

// Candidate Dim_env: dims whose distribution is similar across (type, Y) groups.
std::vector<int> env_feature_dims(const std::vector<const Graph*>& graphs, const NpafConfig& cfg);
// Keep candidates that are also similar across node types within each feature environment.
std::vector<int> refine_env_dims(const std::vector<const Graph*>& graphs,
                                 const std::vector<int>& candidates,
                                 const std::vector<int>& feature_labels, const NpafConfig& cfg);

class EnvModel {
 public:
  int k = 0;
  int wl_iters = 3;
  int num_types = 2;
  int feature_dim = 0;
  double theta = 0.2;
  Matrix structure_centers;
  Matrix feature_centers;
  std::vector<int> structure_labels;  // per training graph
  std::vector<int> feature_labels;
  std::vector<int> dim_env;
  bool dim_env_fallback = false;
  // Per training graph: y_v = 1 for V_c nodes, y_e = 1 for G_c edges.
  std::vector<Mask> node_causal;
  std::vector<Mask> edge_causal;

  bool fitted() const { return structure_centers.rows() > 0; }
  Vector structure_point(const Graph& g) const;
  Vector feature_point(const Graph& g) const;
  // (E^s, E^f); throws StateError when unfitted.
  std::pair<int, int> infer_env(const Graph& g) const;

  void save(const std::string& path, const nlohmann::json& meta) const;
  static EnvModel load(const std::string& path, nlohmann::json* meta = nullptr);
  bool operator==(const EnvModel& o) const;
};

EnvModel fit_npaf(const std::vector<const Graph*>& train, const NpafConfig& cfg);

}  // namespace openx
