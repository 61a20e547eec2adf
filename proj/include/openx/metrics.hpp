#pragma once

#include "openx/blackbox.hpp"
#include "openx/nn.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace openx {

inline constexpr double kGefFloor = 1e-12;

struct Fidelity {
  int plus = 0;   // label(G_s) != label(G)
  int minus = 0;  // label(G_c) != label(G)
};

Fidelity fidelity(const BlackBox& model, const Graph& g, const Explanation& e);
// 1 - exp(-KL(p || q)) with q floor-clamped.
double gef(const Vector& p, const Vector& q);
double gef(const BlackBox& model, const Graph& g, const Explanation& e);
// (rho_v, rho_e); rho_e is 0 for edgeless graphs.
std::pair<double, double> density(const Graph& g, const Explanation& e);

// k edges drawn uniformly without replacement, nodes = endpoints.
Explanation random_explanation(const Graph& g, int k, Rng& rng);
// k edges with the largest endpoint degree sum, lower index on ties.
Explanation top_degree_explanation(const Graph& g, int k);

struct GraphRow {
  int graph = 0;  // position in the evaluated split
  int label = 0;
  int pred = 0;
  int fid_plus = 0;
  int fid_minus = 0;
  double gef = 0.0;
  double rho_v = 0.0;
  double rho_e = 0.0;
  int edges = 0;
  bool has_gt = false;
  double gt_precision = 0.0;
  double gt_recall = 0.0;
};

struct MetricsReport {
  std::string method;
  double fid_plus = 0.0;
  double fid_minus = 0.0;
  double gef = 0.0;
  double rho_v = 0.0;
  double rho_e = 0.0;
  double t_100 = 0.0;
  double gt_precision = 0.0;
  double gt_recall = 0.0;
  std::vector<GraphRow> rows;
};

using ExplainFn = std::function<Explanation(const Graph&)>;

// Scores explanations of one method over a split; fills every field except t_100.
MetricsReport score(const std::string& method, const std::vector<Explanation>& explanations,
                    const std::vector<const Graph*>& split, const BlackBox& model);

// Wall seconds for exactly 100 calls, cycling through the split.
double time_100(const std::function<void(const Graph&, std::size_t)>& call,
                const std::vector<const Graph*>& split);

// Reports for "open", "random" and "degree". Baselines select, per graph, the
// same number of edges as the explainer did.
std::vector<MetricsReport> evaluate(const ExplainFn& explain,
                                    const std::vector<const Graph*>& split,
                                    const BlackBox& model, std::uint64_t seed);

void write_metrics_csv(const std::vector<MetricsReport>& reports, const std::string& path);
void write_rows_csv(const std::vector<MetricsReport>& reports, const std::string& path);
void write_metrics_json(const std::vector<MetricsReport>& reports, const std::string& path);

}  // namespace openx
