#include "openx/graph.hpp"

#include "openx/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <utility>

namespace openx {

using json = nlohmann::json;

Graph::Graph(int num_nodes, std::vector<Edge> edges, Matrix features, std::vector<int> node_types,
             int label, std::optional<EnvMeta> env, std::optional<GroundTruth> gt)
    : num_nodes_(num_nodes),
      edges_(std::move(edges)),
      features_(std::move(features)),
      node_types_(std::move(node_types)),
      label_(label),
      env_(std::move(env)),
      gt_(std::move(gt)) {
  if (num_nodes_ < 0) throw StructuralError("negative node count");
  if (features_.rows() != num_nodes_)
    throw StructuralError("feature matrix has " + std::to_string(features_.rows()) +
                          " rows, expected " + std::to_string(num_nodes_));
  if (static_cast<int>(node_types_.size()) != num_nodes_)
    throw StructuralError("node_types length differs from node count");
  std::set<std::pair<int, int>> seen;
  for (auto& e : edges_) {
    if (e.src > e.dst) std::swap(e.src, e.dst);
    if (e.src < 0 || e.dst >= num_nodes_)
      throw StructuralError("edge endpoint out of range");
    if (e.src == e.dst) throw StructuralError("self-loop on node " + std::to_string(e.src));
    if (!seen.emplace(e.src, e.dst).second)
      throw StructuralError("duplicate edge " + std::to_string(e.src) + "-" +
                            std::to_string(e.dst));
  }
  if (gt_) {
    if (static_cast<int>(gt_->nodes.size()) != num_nodes_ ||
        static_cast<int>(gt_->edges.size()) != num_edges())
      throw StructuralError("gt_motif mask length mismatch");
  }
}

std::vector<int> Graph::degrees() const {
  std::vector<int> deg(num_nodes_, 0);
  for (const auto& e : edges_) {
    ++deg[e.src];
    ++deg[e.dst];
  }
  return deg;
}

std::vector<std::vector<int>> Graph::adjacency() const {
  std::vector<std::vector<int>> adj(num_nodes_);
  for (const auto& e : edges_) {
    adj[e.src].push_back(e.dst);
    adj[e.dst].push_back(e.src);
  }
  for (auto& a : adj) std::sort(a.begin(), a.end());
  return adj;
}

Graph Graph::with_features(Matrix features) const {
  return Graph(num_nodes_, edges_, std::move(features), node_types_, label_, env_, gt_);
}

Graph Graph::without_edge(int edge_index) const {
  std::vector<Edge> edges;
  edges.reserve(edges_.size());
  for (int i = 0; i < num_edges(); ++i)
    if (i != edge_index) edges.push_back(edges_[i]);
  return Graph(num_nodes_, std::move(edges), features_, node_types_, label_, env_);
}

bool operator==(const Graph& a, const Graph& b) {
  return a.num_nodes_ == b.num_nodes_ && a.edges_ == b.edges_ &&
         a.features_.rows() == b.features_.rows() && a.features_.cols() == b.features_.cols() &&
         a.features_ == b.features_ && a.node_types_ == b.node_types_ && a.label_ == b.label_ &&
         a.env_ == b.env_ && a.gt_ == b.gt_;
}

Explanation Explanation::empty(const Graph& g) {
  return {Mask(g.num_nodes(), false), Mask(g.num_edges(), false), 0.0};
}

Explanation Explanation::full(const Graph& g) {
  return {Mask(g.num_nodes(), true), Mask(g.num_edges(), true), 0.0};
}

int Explanation::node_count() const {
  return static_cast<int>(std::count(node_mask.begin(), node_mask.end(), true));
}

int Explanation::edge_count() const {
  return static_cast<int>(std::count(edge_mask.begin(), edge_mask.end(), true));
}

void validate(const Graph& g, const Explanation& e) {
  if (static_cast<int>(e.node_mask.size()) != g.num_nodes())
    throw StructuralError("node mask length " + std::to_string(e.node_mask.size()) +
                          " != " + std::to_string(g.num_nodes()));
  if (static_cast<int>(e.edge_mask.size()) != g.num_edges())
    throw StructuralError("edge mask length " + std::to_string(e.edge_mask.size()) +
                          " != " + std::to_string(g.num_edges()));
  for (int i = 0; i < g.num_edges(); ++i) {
    if (!e.edge_mask[i]) continue;
    const Edge& ed = g.edges()[i];
    if (!e.node_mask[ed.src] || !e.node_mask[ed.dst])
      throw StructuralError("edge " + std::to_string(i) + " selected without its endpoints");
  }
}

Explanation from_edge_mask(const Graph& g, Mask edge_mask) {
  if (static_cast<int>(edge_mask.size()) != g.num_edges())
    throw StructuralError("edge mask length mismatch");
  Explanation e{Mask(g.num_nodes(), false), std::move(edge_mask), 0.0};
  for (int i = 0; i < g.num_edges(); ++i) {
    if (!e.edge_mask[i]) continue;
    e.node_mask[g.edges()[i].src] = true;
    e.node_mask[g.edges()[i].dst] = true;
  }
  return e;
}

namespace {

Graph keep(const Graph& g, const Mask& node_keep, const Mask& edge_keep,
           std::vector<int>* kept_nodes) {
  std::vector<int> remap(g.num_nodes(), -1);
  std::vector<int> order;
  for (int i = 0; i < g.num_nodes(); ++i) {
    if (!node_keep[i]) continue;
    remap[i] = static_cast<int>(order.size());
    order.push_back(i);
  }
  const int n = static_cast<int>(order.size());
  Matrix x(n, g.feature_dim());
  std::vector<int> types(n);
  for (int k = 0; k < n; ++k) {
    x.row(k) = g.features().row(order[k]);
    types[k] = g.node_types()[order[k]];
  }
  std::vector<Edge> edges;
  for (int i = 0; i < g.num_edges(); ++i) {
    if (!edge_keep[i]) continue;
    const Edge& e = g.edges()[i];
    edges.push_back({remap[e.src], remap[e.dst]});
  }
  if (kept_nodes) *kept_nodes = order;
  return Graph(n, std::move(edges), std::move(x), std::move(types), g.label(), g.env_meta());
}

}  // namespace

Graph induced_subgraph(const Graph& g, const Explanation& e, std::vector<int>* kept_nodes) {
  validate(g, e);
  return keep(g, e.node_mask, e.edge_mask, kept_nodes);
}

Graph complement_graph(const Graph& g, const Explanation& e, std::vector<int>* kept_nodes) {
  validate(g, e);
  Mask edge_keep(g.num_edges());
  std::vector<bool> touches_rest(g.num_nodes(), false);
  for (int i = 0; i < g.num_edges(); ++i) {
    edge_keep[i] = !e.edge_mask[i];
    if (edge_keep[i]) {
      touches_rest[g.edges()[i].src] = true;
      touches_rest[g.edges()[i].dst] = true;
    }
  }
  Mask node_keep(g.num_nodes());
  for (int i = 0; i < g.num_nodes(); ++i) node_keep[i] = !e.node_mask[i] || touches_rest[i];
  return keep(g, node_keep, edge_keep, kept_nodes);
}

std::vector<const Graph*> Dataset::select(SplitTag tag) const {
  std::vector<const Graph*> out;
  for (std::size_t i = 0; i < graphs.size(); ++i)
    if (split_tags[i] == tag) out.push_back(&graphs[i]);
  return out;
}

std::vector<int> Dataset::indices(SplitTag tag) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < graphs.size(); ++i)
    if (split_tags[i] == tag) out.push_back(static_cast<int>(i));
  return out;
}

void Dataset::validate_split() const {
  if (split_tags.size() != graphs.size()) throw StructuralError("split tags do not cover dataset");
  bool has_train = false;
  for (auto t : split_tags) {
    if (t == SplitTag::Unassigned) throw StructuralError("graph without split tag");
    has_train |= t == SplitTag::Train;
  }
  if (!has_train) throw StructuralError("empty train split");
}

std::string to_string(SplitTag t) {
  switch (t) {
    case SplitTag::Train: return "train";
    case SplitTag::Val: return "val";
    case SplitTag::Test: return "test";
    default: return "none";
  }
}

std::string to_string(ShiftType t) {
  switch (t) {
    case ShiftType::Covariate: return "covariate";
    case ShiftType::Concept: return "concept";
    case ShiftType::Iid: return "iid";
    default: return "none";
  }
}

std::string to_string(ShiftDomain d) {
  switch (d) {
    case ShiftDomain::Basis: return "basis";
    case ShiftDomain::Size: return "size";
    default: return "none";
  }
}

SplitTag split_tag_from_string(const std::string& s) {
  if (s == "train") return SplitTag::Train;
  if (s == "val") return SplitTag::Val;
  if (s == "test") return SplitTag::Test;
  if (s == "none") return SplitTag::Unassigned;
  throw ConfigError("split", "unknown split tag '" + s + "'");
}

ShiftType shift_type_from_string(const std::string& s) {
  if (s == "covariate") return ShiftType::Covariate;
  if (s == "concept") return ShiftType::Concept;
  if (s == "iid") return ShiftType::Iid;
  if (s == "none") return ShiftType::None;
  throw ConfigError("shift", "unknown shift type '" + s + "'");
}

ShiftDomain shift_domain_from_string(const std::string& s) {
  if (s == "basis") return ShiftDomain::Basis;
  if (s == "size") return ShiftDomain::Size;
  if (s == "none") return ShiftDomain::None;
  throw ConfigError("domain", "unknown shift domain '" + s + "'");
}

namespace {

json mask_to_json(const Mask& m) {
  json a = json::array();
  for (bool b : m) a.push_back(b ? 1 : 0);
  return a;
}

Mask mask_from_json(const json& a) {
  Mask m;
  m.reserve(a.size());
  for (const auto& v : a) m.push_back(v.get<int>() != 0);
  return m;
}

}  // namespace

std::string graph_to_json_line(const Graph& g, SplitTag tag, const ShiftDescriptor& shift) {
  json j;
  j["v"] = 1;
  j["n"] = g.num_nodes();
  j["d"] = g.feature_dim();
  json edges = json::array();
  for (const auto& e : g.edges()) edges.push_back({e.src, e.dst});
  j["edges"] = std::move(edges);
  json x = json::array();
  for (int i = 0; i < g.num_nodes(); ++i) {
    json row = json::array();
    for (int c = 0; c < g.feature_dim(); ++c) row.push_back(g.features()(i, c));
    x.push_back(std::move(row));
  }
  j["x"] = std::move(x);
  j["types"] = g.node_types();
  j["y"] = g.label();
  j["split"] = to_string(tag);
  j["shift"] = {{"type", to_string(shift.type)}, {"domain", to_string(shift.domain)}};
  if (const auto& env = g.env_meta()) {
    j["env"] = {{"family", env->family},
                {"size_bucket", env->size_bucket},
                {"env_id", env->env_id},
                {"env_dims", env->env_dims}};
  }
  if (const auto& gt = g.gt_motif())
    j["gt"] = {{"nodes", mask_to_json(gt->nodes)}, {"edges", mask_to_json(gt->edges)}};
  return j.dump();
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  for (std::size_t i = 0; i < ds.graphs.size(); ++i) {
    const SplitTag tag = i < ds.split_tags.size() ? ds.split_tags[i] : SplitTag::Unassigned;
    out << graph_to_json_line(ds.graphs[i], tag, ds.shift) << '\n';
  }
  if (!out) throw IoError(path, "write failed");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  Dataset ds;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (j.at("v").get<int>() != 1) throw ParseError("unsupported version", lineno);
      const int n = j.at("n").get<int>();
      const int d = j.at("d").get<int>();
      std::vector<Edge> edges;
      for (const auto& e : j.at("edges")) edges.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
      const auto& xj = j.at("x");
      if (static_cast<int>(xj.size()) != n) throw ParseError("feature row count != n", lineno);
      Matrix x(n, d);
      for (int i = 0; i < n; ++i) {
        if (static_cast<int>(xj[i].size()) != d) throw ParseError("feature width != d", lineno);
        for (int c = 0; c < d; ++c) x(i, c) = xj[i][c].get<double>();
      }
      std::optional<EnvMeta> env;
      if (j.contains("env")) {
        const auto& ej = j["env"];
        env = EnvMeta{ej.at("family").get<int>(), ej.at("size_bucket").get<int>(),
                      ej.at("env_id").get<int>(), ej.at("env_dims").get<std::vector<int>>()};
      }
      std::optional<GroundTruth> gt;
      if (j.contains("gt"))
        gt = GroundTruth{mask_from_json(j["gt"].at("nodes")), mask_from_json(j["gt"].at("edges"))};
      ds.graphs.emplace_back(n, std::move(edges), std::move(x),
                             j.at("types").get<std::vector<int>>(), j.at("y").get<int>(),
                             std::move(env), std::move(gt));
      ds.split_tags.push_back(split_tag_from_string(j.at("split").get<std::string>()));
      const auto& sj = j.at("shift");
      ds.shift = {shift_type_from_string(sj.at("type").get<std::string>()),
                  shift_domain_from_string(sj.at("domain").get<std::string>())};
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& ex) {
      throw ParseError(ex.what(), lineno);
    }
  }
  return ds;
}

std::string to_dot(const Graph& g, const Explanation& e) {
  validate(g, e);
  std::ostringstream os;
  os << "digraph explanation {\n";
  for (int i = 0; i < g.num_nodes(); ++i) {
    os << "  n" << i << " [label=\"" << i << "\", type=" << g.node_types()[i];
    if (e.node_mask[i]) os << ", explained=true, color=red, style=filled, fillcolor=\"#f4cccc\"";
    os << "];\n";
  }
  for (int i = 0; i < g.num_edges(); ++i) {
    const Edge& ed = g.edges()[i];
    os << "  n" << ed.src << " -> n" << ed.dst << " [dir=none";
    if (e.edge_mask[i]) os << ", explained=true, color=red, penwidth=2";
    os << "];\n";
  }
  os << "}\n";
  return os.str();
}

void export_dot(const Graph& g, const Explanation& e, const std::string& path) {
  const std::string text = to_dot(g, e);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << text;
  if (!out) throw IoError(path, "write failed");
}

}  // namespace openx
