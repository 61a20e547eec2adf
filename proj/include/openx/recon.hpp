#pragma once

#include "openx/graph.hpp"
#include "openx/nn.hpp"

#include <optional>
#include <string>
#include <vector>

namespace openx {

inline constexpr double kProbEps = 1e-6;

// Existence probabilities for every node and edge of one graph.
struct ProbMap {
  Vector node_prob;
  Vector edge_prob;
};

struct ReconConfig {
  int max_nodes = 7;
  int min_nodes = 5;
  std::optional<int> start_nid;
  double density = 0.1;
  int max_iter = 20;
  int min_edges = 1;

  void validate() const;
};

// ln of the product of selected node and edge probabilities.
double graph_log_prob(const ProbMap& pm, const Explanation& e);

// Shifts every probability into [kProbEps, 1 - kProbEps].
ProbMap shifted(const ProbMap& pm);

// min(m, max(ceil(density * m), min_edges))
int edge_budget(int num_edges, double density, int min_edges);

// Edge counts after each edge-sampling batch, and the number of top-up edges.
struct ReconTrace {
  std::vector<int> edges_after_batch;
  int topped_up = 0;
};

Explanation sample_subgraph_train(const ProbMap& pm, const Graph& g, const ReconConfig& cfg,
                                  Rng& rng, ReconTrace* trace = nullptr);
Explanation reconstruct_edge_first(const ProbMap& pm, const Graph& g, const ReconConfig& cfg);

struct RuntimeRow {
  int n = 0;
  int max_iter = 0;
  double seconds = 0.0;
};

// Random graph with n nodes and about 2n edges plus random probabilities.
std::pair<Graph, ProbMap> random_probe_instance(int n, Rng& rng);

// Best-of-`repeats` wall time of sample_subgraph_train per size.
std::vector<RuntimeRow> runtime_probe(const std::vector<int>& sizes, const ReconConfig& cfg,
                                      int repeats = 5, std::uint64_t seed = 0);
void write_runtime_csv(const std::vector<RuntimeRow>& rows, const std::string& path);

}  // namespace openx
