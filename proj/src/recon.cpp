#include "openx/recon.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

namespace openx {

void ReconConfig::validate() const {
  if (max_nodes < 1) throw ConfigError("recon.max_nodes", "must be >= 1");
  if (min_nodes < 1 || min_nodes > max_nodes)
    throw ConfigError("recon.min_nodes", "must be in [1, max_nodes]");
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("recon.density", "must be in (0, 1]");
  if (max_iter < 1) throw ConfigError("recon.max_iter", "must be >= 1");
  if (min_edges < 1) throw ConfigError("recon.min_edges", "must be >= 1");
  if (start_nid && *start_nid < 0) throw ConfigError("recon.start_nid", "must be >= 0");
}

namespace {

void check_sizes(const ProbMap& pm, const Graph& g) {
  if (pm.node_prob.size() != g.num_nodes() || pm.edge_prob.size() != g.num_edges())
    throw StructuralError("prob map does not match graph size");
}

}  // namespace

double graph_log_prob(const ProbMap& pm, const Explanation& e) {
  if (e.node_mask.size() != static_cast<std::size_t>(pm.node_prob.size()) ||
      e.edge_mask.size() != static_cast<std::size_t>(pm.edge_prob.size()))
    throw StructuralError("graph_log_prob: mask size mismatch");
  double lp = 0.0;
  for (std::size_t v = 0; v < e.node_mask.size(); ++v)
    if (e.node_mask[v]) lp += std::log(pm.node_prob[static_cast<Eigen::Index>(v)]);
  for (std::size_t k = 0; k < e.edge_mask.size(); ++k)
    if (e.edge_mask[k]) lp += std::log(pm.edge_prob[static_cast<Eigen::Index>(k)]);
  return lp;
}

ProbMap shifted(const ProbMap& pm) {
  return {pm.node_prob.cwiseMax(kProbEps).cwiseMin(1.0 - kProbEps),
          pm.edge_prob.cwiseMax(kProbEps).cwiseMin(1.0 - kProbEps)};
}

int edge_budget(int num_edges, double density, int min_edges) {
  // density * m is often a hair above an integer in floating point
  int k = static_cast<int>(std::ceil(density * num_edges - 1e-9));
  k = std::max(k, min_edges);
  return std::min(k, num_edges);
}

Explanation sample_subgraph_train(const ProbMap& raw, const Graph& g, const ReconConfig& cfg,
                                  Rng& rng, ReconTrace* trace) {
  cfg.validate();
  check_sizes(raw, g);
  const int n = g.num_nodes(), m = g.num_edges();
  Explanation e = Explanation::empty(g);
  if (trace) *trace = {};
  if (n == 0) return e;
  const ProbMap pm = shifted(raw);
  const int max_nodes = std::min(cfg.max_nodes, n);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Mask& node = e.node_mask;
  int count = 0;
  if (cfg.start_nid) {
    if (*cfg.start_nid >= n) throw StructuralError("start_nid out of range");
    node[*cfg.start_nid] = true;
    count = 1;
  }
  for (int it = 0; it < cfg.max_iter && count < max_nodes; ++it) {
    for (int v = 0; v < n; ++v) {
      if (node[v]) continue;
      if (unif(rng) < pm.node_prob[v]) {
        node[v] = true;
        ++count;
      }
    }
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return pm.node_prob[a] > pm.node_prob[b]; });
  if (count < max_nodes) {
    for (int v : order) {
      if (count >= max_nodes) break;
      if (!node[v]) {
        node[v] = true;
        ++count;
      }
    }
  } else {
    for (auto it = order.rbegin(); it != order.rend() && count > max_nodes; ++it) {
      if (node[*it] && (!cfg.start_nid || *it != *cfg.start_nid)) {
        node[*it] = false;
        --count;
      }
    }
  }

  Vector pn = pm.node_prob;
  for (int v = 0; v < n; ++v)
    if (node[v]) pn[v] = 1.0;

  Mask& edge = e.edge_mask;
  int chosen = 0;
  Vector pe(m);
  auto refresh = [&] {
    for (int k = 0; k < m; ++k) {
      const Edge& ed = g.edges()[k];
      pe[k] = edge[k] ? 0.0 : pm.edge_prob[k] * pn[ed.src] * pn[ed.dst];
    }
  };
  for (int it = 0; it < cfg.max_iter && m > 0; ++it) {
    refresh();
    for (int k = 0; k < m; ++k) {
      if (pe[k] > 0.0 && unif(rng) < pe[k]) {
        edge[k] = true;
        ++chosen;
      }
    }
    if (trace) trace->edges_after_batch.push_back(chosen);
    if (static_cast<double>(chosen) / m > cfg.density) break;
  }
  const int floor_edges = std::min(cfg.min_edges, m);
  if (chosen < floor_edges) {
    refresh();
    std::vector<int> eorder(m);
    std::iota(eorder.begin(), eorder.end(), 0);
    std::stable_sort(eorder.begin(), eorder.end(), [&](int a, int b) { return pe[a] > pe[b]; });
    for (int k : eorder) {
      if (chosen >= floor_edges) break;
      if (!edge[k]) {
        edge[k] = true;
        ++chosen;
        if (trace) ++trace->topped_up;
      }
    }
  }

  std::fill(node.begin(), node.end(), false);
  for (int k = 0; k < m; ++k) {
    if (!edge[k]) continue;
    node[g.edges()[k].src] = true;
    node[g.edges()[k].dst] = true;
  }
  e.log_prob = graph_log_prob(pm, e);
  return e;
}

Explanation reconstruct_edge_first(const ProbMap& raw, const Graph& g, const ReconConfig& cfg) {
  cfg.validate();
  check_sizes(raw, g);
  const int m = g.num_edges();
  Explanation e = Explanation::empty(g);
  if (m == 0) return e;
  const ProbMap pm = shifted(raw);
  Vector pe(m);
  for (int k = 0; k < m; ++k) {
    const Edge& ed = g.edges()[k];
    pe[k] = pm.edge_prob[k] * pm.node_prob[ed.src] * pm.node_prob[ed.dst];
  }
  const int budget = edge_budget(m, cfg.density, cfg.min_edges);
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return pe[a] > pe[b]; });
  for (int r = 0; r < budget; ++r) {
    const int k = order[r];
    e.edge_mask[k] = true;
    e.node_mask[g.edges()[k].src] = true;
    e.node_mask[g.edges()[k].dst] = true;
    e.log_prob += std::log(pe[k]);
  }
  return e;
}

std::pair<Graph, ProbMap> random_probe_instance(int n, Rng& rng) {
  std::vector<Edge> edges;
  std::set<std::pair<int, int>> seen;
  for (int v = 1; v < n; ++v) {
    std::uniform_int_distribution<int> pick(0, v - 1);
    const int u = pick(rng);
    edges.push_back({u, v});
    seen.insert({u, v});
  }
  if (n > 2) {
    const long long room = static_cast<long long>(n) * (n - 1) / 2 - (n - 1);
    const int extra = static_cast<int>(std::min<long long>(n + 1, room));
    std::uniform_int_distribution<int> any(0, n - 1);
    for (int added = 0; added < extra;) {
      int a = any(rng), b = any(rng);
      if (a == b) continue;
      if (a > b) std::swap(a, b);
      if (!seen.insert({a, b}).second) continue;
      edges.push_back({a, b});
      ++added;
    }
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return std::pair(a.src, a.dst) < std::pair(b.src, b.dst);
  });
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  ProbMap pm{Vector(n), Vector(static_cast<Eigen::Index>(edges.size()))};
  for (int v = 0; v < n; ++v) pm.node_prob[v] = unif(rng);
  for (Eigen::Index k = 0; k < pm.edge_prob.size(); ++k) pm.edge_prob[k] = unif(rng);
  Graph g(n, std::move(edges), Matrix::Zero(n, 1), std::vector<int>(n, 0), 0);
  return {std::move(g), std::move(pm)};
}

std::vector<RuntimeRow> runtime_probe(const std::vector<int>& sizes, const ReconConfig& cfg,
                                      int repeats, std::uint64_t seed) {
  cfg.validate();
  std::vector<RuntimeRow> rows;
  Rng rng(seed);
  for (int n : sizes) {
    if (n < 0) throw ConfigError("bench.sizes", "sizes must be >= 0");
    auto [g, pm] = random_probe_instance(n, rng);
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < std::max(repeats, 1); ++r) {
      Rng local(seed + static_cast<std::uint64_t>(r));
      const auto t0 = std::chrono::steady_clock::now();
      Explanation e = sample_subgraph_train(pm, g, cfg, local);
      const auto t1 = std::chrono::steady_clock::now();
      (void)e;
      best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
    }
    rows.push_back({n, cfg.max_iter, best});
  }
  return rows;
}

void write_runtime_csv(const std::vector<RuntimeRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << "n,max_iter,seconds\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.9g\n", r.n, r.max_iter, r.seconds);
    out << buf;
  }
  if (!out) throw IoError(path, "write failed");
}

}  // namespace openx
