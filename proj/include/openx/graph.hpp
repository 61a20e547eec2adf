#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace openx {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Mask = std::vector<bool>;

// Undirected edge, always stored with src < dst.
struct Edge {
  int src = 0;
  int dst = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

// Generator-side record of how a graph was produced.
struct EnvMeta {
  int family = 0;       // index into the generator's base-family list
  int size_bucket = 0;  // 0..4, equal-width buckets over the base size range
  int env_id = 0;       // planted feature environment
  std::vector<int> env_dims;
  friend bool operator==(const EnvMeta&, const EnvMeta&) = default;
};

struct GroundTruth {
  Mask nodes;
  Mask edges;
  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

// Immutable attributed graph. The constructor normalizes edge orientation and
// rejects self-loops, duplicate edges, out-of-range endpoints and shape errors.
class Graph {
 public:
  Graph() = default;
  Graph(int num_nodes, std::vector<Edge> edges, Matrix features, std::vector<int> node_types,
        int label, std::optional<EnvMeta> env = std::nullopt,
        std::optional<GroundTruth> gt = std::nullopt);

  int num_nodes() const { return num_nodes_; }
  int num_edges() const { return static_cast<int>(edges_.size()); }
  int feature_dim() const { return static_cast<int>(features_.cols()); }
  const std::vector<Edge>& edges() const { return edges_; }
  const Matrix& features() const { return features_; }
  const std::vector<int>& node_types() const { return node_types_; }
  int label() const { return label_; }
  const std::optional<EnvMeta>& env_meta() const { return env_; }
  const std::optional<GroundTruth>& gt_motif() const { return gt_; }

  std::vector<int> degrees() const;
  // Neighbor lists, each sorted ascending.
  std::vector<std::vector<int>> adjacency() const;

  Graph with_features(Matrix features) const;
  Graph without_edge(int edge_index) const;

  friend bool operator==(const Graph& a, const Graph& b);

 private:
  int num_nodes_ = 0;
  std::vector<Edge> edges_;
  Matrix features_;
  std::vector<int> node_types_;
  int label_ = 0;
  std::optional<EnvMeta> env_;
  std::optional<GroundTruth> gt_;
};

// Explanation subgraph G_c: node and edge selections plus ln Prob(G_c).
struct Explanation {
  Mask node_mask;
  Mask edge_mask;
  double log_prob = 0.0;

  static Explanation empty(const Graph& g);
  static Explanation full(const Graph& g);
  int node_count() const;
  int edge_count() const;
};

// Throws StructuralError unless the masks fit `g` and every selected edge has
// both endpoints selected.
void validate(const Graph& g, const Explanation& e);

// Explanation whose node mask is exactly the endpoints of the selected edges.
Explanation from_edge_mask(const Graph& g, Mask edge_mask);

// G_c. Nodes are renumbered in ascending original order; `kept_nodes`, when
// given, receives the original index of every retained node.
Graph induced_subgraph(const Graph& g, const Explanation& e,
                       std::vector<int>* kept_nodes = nullptr);

// G_s: `g` with the explanation's edges removed and nodes that belong only to
// G_c dropped. Nodes shared with the remainder stay, even when isolated.
Graph complement_graph(const Graph& g, const Explanation& e,
                       std::vector<int>* kept_nodes = nullptr);

enum class SplitTag : std::uint8_t { Unassigned, Train, Val, Test };
enum class ShiftType : std::uint8_t { None, Covariate, Concept, Iid };
enum class ShiftDomain : std::uint8_t { None, Basis, Size };

struct ShiftDescriptor {
  ShiftType type = ShiftType::None;
  ShiftDomain domain = ShiftDomain::None;
  friend bool operator==(const ShiftDescriptor&, const ShiftDescriptor&) = default;
};

std::string to_string(SplitTag t);
std::string to_string(ShiftType t);
std::string to_string(ShiftDomain d);
SplitTag split_tag_from_string(const std::string& s);
ShiftType shift_type_from_string(const std::string& s);
ShiftDomain shift_domain_from_string(const std::string& s);

struct Dataset {
  std::vector<Graph> graphs;
  std::vector<SplitTag> split_tags;
  ShiftDescriptor shift;

  std::size_t size() const { return graphs.size(); }
  std::vector<const Graph*> select(SplitTag tag) const;
  std::vector<int> indices(SplitTag tag) const;
  // Throws StructuralError unless tags cover every graph and train is nonempty.
  void validate_split() const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// JSON-lines persistence, one graph per line (schema in docs/formats.md).
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);
std::string graph_to_json_line(const Graph& g, SplitTag tag, const ShiftDescriptor& shift);

// Graphviz text. Explained nodes and edges are drawn red.
std::string to_dot(const Graph& g, const Explanation& e);
void export_dot(const Graph& g, const Explanation& e, const std::string& path);

}  // namespace openx
