#include "openx/npaf.hpp"

#include "openx/error.hpp"
#include "openx/nn.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

namespace openx {

using json = nlohmann::json;

Matrix structure_features(const Graph& g, int num_types) {
  if (num_types < 1) throw ConfigError("num_types", "must be >= 1");
  Matrix x = Matrix::Zero(g.num_nodes(), kDegreeBuckets + num_types);
  const auto deg = g.degrees();
  for (int v = 0; v < g.num_nodes(); ++v) {
    x(v, std::clamp(deg[v], 1, kDegreeBuckets) - 1) = 1.0;
    x(v, kDegreeBuckets + std::clamp(g.node_types()[v], 0, num_types - 1)) = 1.0;
  }
  return x;
}

StructureEmbeddings wl_embed(const Graph& g, const Matrix& x_str, int iterations) {
  if (x_str.rows() != g.num_nodes()) throw StructuralError("wl_embed: row count mismatch");
  if (iterations < 0) throw ConfigError("wl_iters", "must be >= 0");
  const Eigen::Index d = x_str.cols();
  const auto adj = g.adjacency();
  StructureEmbeddings out;
  out.nodes.resize(g.num_nodes(), d * (iterations + 1));
  out.nodes.leftCols(d) = x_str;
  Matrix h = x_str;
  for (int t = 1; t <= iterations; ++t) {
    Matrix next(h.rows(), d);
    for (int v = 0; v < g.num_nodes(); ++v) {
      if (adj[v].empty()) {
        next.row(v) = h.row(v);
        continue;
      }
      RowVector nb = RowVector::Zero(d);
      for (int u : adj[v]) nb += h.row(u);
      next.row(v) = 0.5 * (h.row(v) + nb / static_cast<double>(adj[v].size()));
    }
    h = std::move(next);
    out.nodes.middleCols(d * t, d) = h;
  }
  out.graph = g.num_nodes() > 0 ? Vector(out.nodes.colwise().mean().transpose())
                                : Vector(Vector::Zero(out.nodes.cols()));
  return out;
}

int nearest_center(const Matrix& centers, const Vector& x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    const double d = (centers.row(c).transpose() - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

namespace {

double assign(const Matrix& points, const Matrix& centers, std::vector<int>& assignment,
              std::vector<double>& dist) {
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const int c = nearest_center(centers, points.row(i).transpose());
    assignment[i] = c;
    dist[i] = (points.row(i) - centers.row(c)).squaredNorm();
    inertia += dist[i];
  }
  return inertia;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter, double tol) {
  if (k <= 0) throw ConfigError("k", "must be >= 1");
  const Eigen::Index n = points.rows();
  if (n == 0) throw StructuralError("kmeans: no points");
  Rng rng(seed);
  KMeansResult res;
  res.centers.resize(k, points.cols());

  // k-means++ seeding.
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  res.centers.row(0) = points.row(first(rng));
  Vector d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = (points.row(i) - res.centers.row(0)).squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng), acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > r && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
      if (d2[pick] == 0.0)
        for (Eigen::Index i = n - 1; i >= 0; --i)
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
    }
    res.centers.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], (points.row(i) - res.centers.row(c)).squaredNorm());
  }

  res.assignment.assign(n, 0);
  std::vector<double> dist(n);
  for (int iter = 0; iter < max_iter; ++iter) {
    res.inertia_history.push_back(assign(points, res.centers, res.assignment, dist));
    Matrix next = Matrix::Zero(k, points.cols());
    std::vector<int> count(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(res.assignment[i]) += points.row(i);
      ++count[res.assignment[i]];
    }
    std::set<Eigen::Index> used;
    for (int c = 0; c < k; ++c) {
      if (count[c] > 0) {
        next.row(c) /= count[c];
        continue;
      }
      Eigen::Index far = -1;
      for (Eigen::Index i = 0; i < n; ++i)
        if (!used.count(i) && (far < 0 || dist[i] > dist[far])) far = i;
      if (far < 0) far = 0;
      used.insert(far);
      next.row(c) = points.row(far);
    }
    const double shift = (next - res.centers).rowwise().norm().maxCoeff();
    res.centers = std::move(next);
    if (shift < tol) break;
  }
  res.inertia = assign(points, res.centers, res.assignment, dist);
  res.inertia_history.push_back(res.inertia);
  return res;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw StructuralError("adjusted_rand_index: length mismatch");
  auto c2 = [](double x) { return x * (x - 1.0) / 2.0; };
  std::map<std::pair<int, int>, double> nij;
  std::map<int, double> ai, bj;
  for (std::size_t i = 0; i < a.size(); ++i) {
    nij[{a[i], b[i]}] += 1;
    ai[a[i]] += 1;
    bj[b[i]] += 1;
  }
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  for (const auto& [_, v] : nij) sum_ij += c2(v);
  for (const auto& [_, v] : ai) sum_a += c2(v);
  for (const auto& [_, v] : bj) sum_b += c2(v);
  const double total = c2(static_cast<double>(a.size()));
  if (total == 0.0) return 1.0;
  const double expected = sum_a * sum_b / total;
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;
  return (sum_ij - expected) / (max_index - expected);
}

double group_variance(const Matrix& rows) {
  if (rows.rows() == 0) return 0.0;
  const RowVector mean = rows.colwise().mean();
  return (rows.rowwise() - mean).squaredNorm() / static_cast<double>(rows.rows());
}

Matrix group_variance_gradient(const Matrix& rows) {
  if (rows.rows() == 0) return rows;
  const RowVector mean = rows.colwise().mean();
  return (2.0 / static_cast<double>(rows.rows())) * (rows.rowwise() - mean);
}

NodeScores causal_nodes(const Matrix& group_rows) {
  NodeScores out;
  const Eigen::Index n = group_rows.rows();
  out.scores = Vector::Zero(n);
  out.causal.assign(n, false);
  if (n <= 1) return out;
  out.scores = group_variance_gradient(group_rows).rowwise().norm();
  std::vector<double> sorted(out.scores.data(), out.scores.data() + n);
  std::sort(sorted.begin(), sorted.end());
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  for (Eigen::Index i = 0; i < n; ++i) out.causal[i] = out.scores[i] > median;
  return out;
}

EdgeScores causal_edges(const Graph& g, const Vector& center, int num_types, int iterations) {
  EdgeScores out;
  const int m = g.num_edges();
  out.scores = Vector::Zero(m);
  out.env_critical.assign(m, false);
  if (m == 0) return out;
  const double base = (wl_embed(g, structure_features(g, num_types), iterations).graph - center).norm();
  for (int e = 0; e < m; ++e) {
    const Graph h = g.without_edge(e);
    const double d = (wl_embed(h, structure_features(h, num_types), iterations).graph - center).norm();
    out.scores[e] = std::abs(d - base);
  }
  const double mean = out.scores.mean();
  const double std = std::sqrt((out.scores.array() - mean).square().mean());
  for (int e = 0; e < m; ++e) out.env_critical[e] = out.scores[e] > mean + std;
  return out;
}

double js_divergence(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw StructuralError("js_divergence: length mismatch");
  const Vector m = 0.5 * (p + q);
  auto kl = [&m](const Vector& a) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i)
      if (a[i] > 0.0) s += a[i] * std::log2(a[i] / m[i]);
    return s;
  };
  return std::max(0.0, 0.5 * kl(p) + 0.5 * kl(q));
}

Vector histogram(const std::vector<double>& values, double lo, double hi, int bins) {
  Vector h = Vector::Zero(bins);
  if (values.empty()) return h;
  const double width = hi - lo;
  for (double v : values) {
    int b = width > 0.0 ? static_cast<int>((v - lo) / width * bins) : 0;
    h[std::clamp(b, 0, bins - 1)] += 1.0;
  }
  return h / static_cast<double>(values.size());
}

void NpafConfig::validate() const {
  if (k < 1) throw ConfigError("k", "must be >= 1");
  if (wl_iters < 1) throw ConfigError("structure.wl_iters", "must be >= 1");
  if (num_types < 1) throw ConfigError("num_types", "must be >= 1");
  if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("theta", "must lie in [0, 1]");
  if (bins < 2) throw ConfigError("bins", "must be >= 2");
  if (refine_rounds < 0) throw ConfigError("structure_infer_epochs", "must be >= 0");
}

std::vector<double> mean_pairwise_js(const std::vector<const Graph*>& graphs,
                                     const std::vector<std::vector<int>>& node_groups, int bins) {
  if (graphs.empty()) return {};
  const int d = graphs.front()->feature_dim();
  std::vector<double> out(d, 0.0);
  for (int c = 0; c < d; ++c) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::map<int, std::vector<double>> groups;
    for (std::size_t i = 0; i < graphs.size(); ++i)
      for (int v = 0; v < graphs[i]->num_nodes(); ++v) {
        const double x = graphs[i]->features()(v, c);
        lo = std::min(lo, x);
        hi = std::max(hi, x);
        if (node_groups[i][v] >= 0) groups[node_groups[i][v]].push_back(x);
      }
    if (groups.size() < 2 || !(hi > lo)) continue;
    std::vector<Vector> hists;
    for (const auto& [_, vals] : groups) hists.push_back(histogram(vals, lo, hi, bins));
    double total = 0.0;
    int pairs = 0;
    for (std::size_t a = 0; a < hists.size(); ++a)
      for (std::size_t b = a + 1; b < hists.size(); ++b) {
        total += js_divergence(hists[a], hists[b]);
        ++pairs;
      }
    out[c] = total / pairs;
  }
  return out;
}

std::vector<int> env_feature_dims(const std::vector<const Graph*>& graphs, const NpafConfig& cfg) {
  std::vector<std::vector<int>> groups(graphs.size());
  for (std::size_t i = 0; i < graphs.size(); ++i)
    for (int v = 0; v < graphs[i]->num_nodes(); ++v)
      groups[i].push_back(std::clamp(graphs[i]->node_types()[v], 0, cfg.num_types - 1) * 1000 +
                          graphs[i]->label());
  const auto js = mean_pairwise_js(graphs, groups, cfg.bins);
  std::vector<int> dims;
  for (std::size_t c = 0; c < js.size(); ++c)
    if (js[c] <= cfg.theta) dims.push_back(static_cast<int>(c));
  return dims;
}

std::vector<int> refine_env_dims(const std::vector<const Graph*>& graphs,
                                 const std::vector<int>& candidates,
                                 const std::vector<int>& feature_labels, const NpafConfig& cfg) {
  if (graphs.empty()) return candidates;
  const int d = graphs.front()->feature_dim();
  std::vector<double> total(d, 0.0);
  int clusters = 0;
  std::set<int> labels(feature_labels.begin(), feature_labels.end());
  for (int env : labels) {
    std::vector<std::vector<int>> groups(graphs.size());
    std::set<int> types;
    for (std::size_t i = 0; i < graphs.size(); ++i)
      for (int v = 0; v < graphs[i]->num_nodes(); ++v) {
        const int t = std::clamp(graphs[i]->node_types()[v], 0, cfg.num_types - 1);
        groups[i].push_back(feature_labels[i] == env ? t : -1);
        if (feature_labels[i] == env) types.insert(t);
      }
    if (types.size() < 2) continue;
    const auto js = mean_pairwise_js(graphs, groups, cfg.bins);
    for (int c = 0; c < d; ++c) total[c] += js[c];
    ++clusters;
  }
  if (clusters == 0) return candidates;
  std::vector<int> kept;
  for (int c : candidates)
    if (total[c] / clusters <= cfg.theta) kept.push_back(c);
  return kept;
}

Vector EnvModel::structure_point(const Graph& g) const {
  return wl_embed(g, structure_features(g, num_types), wl_iters).graph;
}

Vector EnvModel::feature_point(const Graph& g) const {
  Vector p = Vector::Zero(static_cast<Eigen::Index>(dim_env.size()));
  if (g.num_nodes() == 0) return p;
  for (std::size_t k = 0; k < dim_env.size(); ++k) p[k] = g.features().col(dim_env[k]).mean();
  return p;
}

std::pair<int, int> EnvModel::infer_env(const Graph& g) const {
  if (!fitted()) throw StateError("environment model is not fitted");
  if (g.feature_dim() != feature_dim) throw StructuralError("infer_env: feature dim mismatch");
  return {nearest_center(structure_centers, structure_point(g)),
          nearest_center(feature_centers, feature_point(g))};
}

namespace {

Matrix stack_rows(const std::vector<Vector>& rows, Eigen::Index cols) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(i) = rows[i].transpose();
  return m;
}

std::vector<int> all_dims(int d) {
  std::vector<int> v(d);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

EnvModel fit_npaf(const std::vector<const Graph*>& train, const NpafConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw StructuralError("fit_npaf: empty training set");
  EnvModel m;
  m.k = cfg.k;
  m.wl_iters = cfg.wl_iters;
  m.num_types = cfg.num_types;
  m.feature_dim = train.front()->feature_dim();
  m.theta = cfg.theta;

  // Structure environments.
  std::vector<StructureEmbeddings> emb;
  std::vector<Vector> spoints;
  for (const Graph* g : train) {
    emb.push_back(wl_embed(*g, structure_features(*g, cfg.num_types), cfg.wl_iters));
    spoints.push_back(emb.back().graph);
  }
  const Eigen::Index sdim = emb.front().graph.size();
  KMeansResult sk = kmeans(stack_rows(spoints, sdim), cfg.k, cfg.seed);
  m.structure_centers = sk.centers;
  m.structure_labels = sk.assignment;

  // Causal nodes within (E^s, Y) groups.
  m.node_causal.resize(train.size());
  std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < train.size(); ++i) {
    m.node_causal[i].assign(train[i]->num_nodes(), false);
    groups[{m.structure_labels[i], train[i]->label()}].push_back(i);
  }
  for (const auto& [_, members] : groups) {
    Eigen::Index rows = 0;
    for (auto i : members) rows += emb[i].nodes.rows();
    Matrix stacked(rows, emb[members.front()].nodes.cols());
    Eigen::Index off = 0;
    for (auto i : members) {
      stacked.middleRows(off, emb[i].nodes.rows()) = emb[i].nodes;
      off += emb[i].nodes.rows();
    }
    const NodeScores ns = causal_nodes(stacked);
    off = 0;
    for (auto i : members)
      for (Eigen::Index v = 0; v < emb[i].nodes.rows(); ++v) m.node_causal[i][v] = ns.causal[off++];
  }

  // Causal edges against each graph's own structure center.
  m.edge_causal.resize(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    const EdgeScores es = causal_edges(*train[i], m.structure_centers.row(m.structure_labels[i]).transpose(),
                                       cfg.num_types, cfg.wl_iters);
    m.edge_causal[i].resize(es.env_critical.size());
    for (std::size_t e = 0; e < es.env_critical.size(); ++e) m.edge_causal[i][e] = !es.env_critical[e];
  }

  // Feature environments and Dim_env, alternating assignment and refinement.
  const std::vector<int> candidates = env_feature_dims(train, cfg);
  m.dim_env = candidates;
  if (m.dim_env.empty()) {
    std::cerr << "warning: no environment feature dimensions found; using all dimensions\n";
    m.dim_env = all_dims(m.feature_dim);
    m.dim_env_fallback = true;
  }
  auto cluster_features = [&]() {
    std::vector<Vector> fpoints;
    for (const Graph* g : train) fpoints.push_back(m.feature_point(*g));
    return kmeans(stack_rows(fpoints, static_cast<Eigen::Index>(m.dim_env.size())), cfg.k,
                  cfg.seed + 1);
  };
  KMeansResult fk = cluster_features();
  for (int round = 0; round < cfg.refine_rounds && !m.dim_env_fallback; ++round) {
    std::vector<int> refined = refine_env_dims(train, candidates, fk.assignment, cfg);
    if (refined.empty() || refined == m.dim_env) break;
    m.dim_env = std::move(refined);
    fk = cluster_features();
  }
  m.feature_centers = fk.centers;
  m.feature_labels = fk.assignment;
  return m;
}

bool EnvModel::operator==(const EnvModel& o) const {
  auto same = [](const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
  };
  return k == o.k && wl_iters == o.wl_iters && num_types == o.num_types &&
         feature_dim == o.feature_dim && theta == o.theta &&
         same(structure_centers, o.structure_centers) && same(feature_centers, o.feature_centers) &&
         structure_labels == o.structure_labels && feature_labels == o.feature_labels &&
         dim_env == o.dim_env && dim_env_fallback == o.dim_env_fallback &&
         node_causal == o.node_causal && edge_causal == o.edge_causal;
}

namespace {

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

Matrix json_matrix(const json& j, Eigen::Index cols) {
  Matrix m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (static_cast<Eigen::Index>(j[i].size()) != cols)
      throw StructuralError("environment model: ragged center matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

json masks_json(const std::vector<Mask>& masks) {
  json out = json::array();
  for (const auto& mk : masks) {
    std::string s;
    for (bool b : mk) s.push_back(b ? '1' : '0');
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Mask> json_masks(const json& j) {
  std::vector<Mask> out;
  for (const auto& s : j) {
    Mask mk;
    for (char c : s.get<std::string>()) mk.push_back(c == '1');
    out.push_back(std::move(mk));
  }
  return out;
}

}  // namespace

void EnvModel::save(const std::string& path, const json& meta) const {
  json doc;
  doc["format"] = "openx-envmodel";
  doc["v"] = 1;
  doc["meta"] = meta;
  doc["k"] = k;
  doc["wl_iters"] = wl_iters;
  doc["num_types"] = num_types;
  doc["feature_dim"] = feature_dim;
  doc["theta"] = theta;
  doc["structure_centers"] = matrix_json(structure_centers);
  doc["feature_centers"] = matrix_json(feature_centers);
  doc["structure_labels"] = structure_labels;
  doc["feature_labels"] = feature_labels;
  doc["dim_env"] = dim_env;
  doc["dim_env_fallback"] = dim_env_fallback;
  doc["node_causal"] = masks_json(node_causal);
  doc["edge_causal"] = masks_json(edge_causal);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << doc.dump(1) << '\n';
  if (!out) throw IoError(path, "write failed");
}

EnvModel EnvModel::load(const std::string& path, json* meta) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open for reading");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const std::exception& e) {
    throw ParseError(e.what(), 0);
  }
  if (doc.value("format", "") != "openx-envmodel" || doc.value("v", 0) != 1)
    throw StructuralError(path + ": not a version-1 environment model");
  EnvModel m;
  try {
    m.k = doc.at("k").get<int>();
    m.wl_iters = doc.at("wl_iters").get<int>();
    m.num_types = doc.at("num_types").get<int>();
    m.feature_dim = doc.at("feature_dim").get<int>();
    m.theta = doc.at("theta").get<double>();
    m.dim_env = doc.at("dim_env").get<std::vector<int>>();
    const Eigen::Index sdim = (kDegreeBuckets + m.num_types) * (m.wl_iters + 1);
    m.structure_centers = json_matrix(doc.at("structure_centers"), sdim);
    m.feature_centers = json_matrix(doc.at("feature_centers"), static_cast<Eigen::Index>(m.dim_env.size()));
    m.structure_labels = doc.at("structure_labels").get<std::vector<int>>();
    m.feature_labels = doc.at("feature_labels").get<std::vector<int>>();
    m.dim_env_fallback = doc.at("dim_env_fallback").get<bool>();
    m.node_causal = json_masks(doc.at("node_causal"));
    m.edge_causal = json_masks(doc.at("edge_causal"));
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what(), 0);
  }
  for (int d : m.dim_env)
    if (d < 0 || d >= m.feature_dim) throw StructuralError(path + ": Dim_env out of range");
  if (meta) *meta = doc.value("meta", json::object());
  return m;
}

}  // namespace openx
