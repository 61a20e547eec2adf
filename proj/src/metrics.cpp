#include "openx/metrics.hpp"

#include "openx/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace openx {

Fidelity fidelity(const BlackBox& model, const Graph& g, const Explanation& e) {
  const int y = model.predict(g, 0).label;
  Fidelity f;
  f.minus = model.predict(induced_subgraph(g, e), 0).label != y;
  f.plus = model.predict(complement_graph(g, e), 0).label != y;
  return f;
}

double gef(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw StructuralError("gef: distribution size mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kGefFloor)));
  return 1.0 - std::exp(-std::max(kl, 0.0));
}

double gef(const BlackBox& model, const Graph& g, const Explanation& e) {
  return gef(model.predict(g, 0).class_probs, model.predict(induced_subgraph(g, e), 0).class_probs);
}

std::pair<double, double> density(const Graph& g, const Explanation& e) {
  const double rv = g.num_nodes() ? static_cast<double>(e.node_count()) / g.num_nodes() : 0.0;
  const double re = g.num_edges() ? static_cast<double>(e.edge_count()) / g.num_edges() : 0.0;
  return {rv, re};
}

Explanation random_explanation(const Graph& g, int k, Rng& rng) {
  const int m = g.num_edges();
  std::vector<int> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  Mask mask(m, false);
  k = std::clamp(k, 0, m);
  // partial Fisher-Yates
  for (int i = 0; i < k; ++i) {
    const int j = std::uniform_int_distribution<int>(i, m - 1)(rng);
    std::swap(idx[i], idx[j]);
    mask[idx[i]] = true;
  }
  return from_edge_mask(g, std::move(mask));
}

Explanation top_degree_explanation(const Graph& g, int k) {
  const int m = g.num_edges();
  const auto deg = g.degrees();
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  auto weight = [&](int e) { return deg[g.edges()[e].src] + deg[g.edges()[e].dst]; };
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return weight(a) > weight(b); });
  Mask mask(m, false);
  for (int i = 0; i < std::clamp(k, 0, m); ++i) mask[order[i]] = true;
  return from_edge_mask(g, std::move(mask));
}

MetricsReport score(const std::string& method, const std::vector<Explanation>& explanations,
                    const std::vector<const Graph*>& split, const BlackBox& model) {
  if (split.empty()) throw StructuralError("evaluate: empty split");
  if (explanations.size() != split.size())
    throw StructuralError("evaluate: one explanation per graph required");
  MetricsReport r;
  r.method = method;
  int with_gt = 0, with_sel = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const Graph& g = *split[i];
    const Explanation& e = explanations[i];
    validate(g, e);
    GraphRow row;
    row.graph = static_cast<int>(i);
    row.label = g.label();
    const Prediction full = model.predict(g, 0);
    const Prediction pc = model.predict(induced_subgraph(g, e), 0);
    row.pred = full.label;
    row.fid_minus = pc.label != full.label;
    row.fid_plus = model.predict(complement_graph(g, e), 0).label != full.label;
    row.gef = gef(full.class_probs, pc.class_probs);
    std::tie(row.rho_v, row.rho_e) = density(g, e);
    row.edges = e.edge_count();
    if (g.gt_motif()) {
      int hit = 0, gt = 0;
      for (int k = 0; k < g.num_edges(); ++k) {
        gt += g.gt_motif()->edges[k];
        hit += g.gt_motif()->edges[k] && e.edge_mask[k];
      }
      if (gt > 0) {
        row.has_gt = true;
        row.gt_recall = static_cast<double>(hit) / gt;
        row.gt_precision = row.edges ? static_cast<double>(hit) / row.edges : 0.0;
        r.gt_recall += row.gt_recall;
        ++with_gt;
        if (row.edges) {
          r.gt_precision += row.gt_precision;
          ++with_sel;
        }
      }
    }
    r.fid_plus += row.fid_plus;
    r.fid_minus += row.fid_minus;
    r.gef += row.gef;
    r.rho_v += row.rho_v;
    r.rho_e += row.rho_e;
    r.rows.push_back(row);
  }
  const double n = static_cast<double>(split.size());
  r.fid_plus /= n;
  r.fid_minus /= n;
  r.gef /= n;
  r.rho_v /= n;
  r.rho_e /= n;
  if (with_gt) r.gt_recall /= with_gt;
  if (with_sel) r.gt_precision /= with_sel;
  return r;
}

double time_100(const std::function<void(const Graph&, std::size_t)>& call,
                const std::vector<const Graph*>& split) {
  if (split.empty()) throw StructuralError("evaluate: empty split");
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t k = 0; k < 100; ++k) call(*split[k % split.size()], k % split.size());
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<MetricsReport> evaluate(const ExplainFn& explain,
                                    const std::vector<const Graph*>& split, const BlackBox& model,
                                    std::uint64_t seed) {
  if (split.empty()) throw StructuralError("evaluate: empty split");
  std::vector<Explanation> open, rnd, deg;
  Rng rng(seed);
  for (const Graph* g : split) {
    open.push_back(explain(*g));
    const int k = open.back().edge_count();
    rnd.push_back(random_explanation(*g, k, rng));
    deg.push_back(top_degree_explanation(*g, k));
  }
  std::vector<MetricsReport> out{score("open", open, split, model),
                                 score("random", rnd, split, model),
                                 score("degree", deg, split, model)};
  out[0].t_100 = time_100([&](const Graph& g, std::size_t) { (void)explain(g); }, split);
  Rng timing_rng(seed);
  out[1].t_100 = time_100(
      [&](const Graph& g, std::size_t i) { (void)random_explanation(g, open[i].edge_count(), timing_rng); },
      split);
  out[2].t_100 = time_100(
      [&](const Graph& g, std::size_t i) { (void)top_degree_explanation(g, open[i].edge_count()); },
      split);
  return out;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  return out;
}

}  // namespace

void write_metrics_csv(const std::vector<MetricsReport>& reports, const std::string& path) {
  auto out = open_out(path);
  out << "method,graphs,fid_plus,fid_minus,gef,rho_v,rho_e,gt_precision,gt_recall,T_100\n";
  char buf[512];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.9g\n",
                  r.method.c_str(), r.rows.size(), r.fid_plus, r.fid_minus, r.gef, r.rho_v,
                  r.rho_e, r.gt_precision, r.gt_recall, r.t_100);
    out << buf;
  }
  if (!out) throw IoError(path, "write failed");
}

void write_rows_csv(const std::vector<MetricsReport>& reports, const std::string& path) {
  auto out = open_out(path);
  out << "method,graph,label,pred,fid_plus,fid_minus,gef,rho_v,rho_e,edges,gt_precision,gt_recall\n";
  char buf[512];
  for (const auto& r : reports)
    for (const auto& w : r.rows) {
      std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%d,%d,%.17g,%.17g,%.17g,%d,", r.method.c_str(),
                    w.graph, w.label, w.pred, w.fid_plus, w.fid_minus, w.gef, w.rho_v, w.rho_e,
                    w.edges);
      out << buf;
      if (w.has_gt) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g", w.gt_precision, w.gt_recall);
        out << buf;
      } else {
        out << ',';
      }
      out << '\n';
    }
  if (!out) throw IoError(path, "write failed");
}

void write_metrics_json(const std::vector<MetricsReport>& reports, const std::string& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports)
    j.push_back({{"method", r.method},
                 {"graphs", r.rows.size()},
                 {"fid_plus", r.fid_plus},
                 {"fid_minus", r.fid_minus},
                 {"gef", r.gef},
                 {"rho_v", r.rho_v},
                 {"rho_e", r.rho_e},
                 {"gt_precision", r.gt_precision},
                 {"gt_recall", r.gt_recall},
                 {"T_100", r.t_100}});
  auto out = open_out(path);
  out << j.dump(1) << '\n';
  if (!out) throw IoError(path, "write failed");
}

}  // namespace openx
