#include "openx/datagen.hpp"

#include "openx/error.hpp"
#include "openx/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace openx {

std::string to_string(BaseFamily f) {
  switch (f) {
    case BaseFamily::Path: return "path";
    case BaseFamily::Cycle: return "cycle";
    case BaseFamily::Tree: return "tree";
    case BaseFamily::BarabasiAlbert: return "barabasi-albert";
    case BaseFamily::Wheel: return "wheel";
  }
  return "?";
}

std::string to_string(Motif m) {
  switch (m) {
    case Motif::House: return "house";
    case Motif::Pentagon: return "pentagon";
    case Motif::Candy: return "candy";
  }
  return "?";
}

BaseFamily base_family_from_string(const std::string& s) {
  for (auto f : {BaseFamily::Path, BaseFamily::Cycle, BaseFamily::Tree,
                 BaseFamily::BarabasiAlbert, BaseFamily::Wheel})
    if (to_string(f) == s) return f;
  throw ConfigError("base_families", "unknown family '" + s + "'");
}

Motif motif_from_string(const std::string& s) {
  for (auto m : {Motif::House, Motif::Pentagon, Motif::Candy})
    if (to_string(m) == s) return m;
  throw ConfigError("motif_set", "unknown motif '" + s + "'");
}

int motif_node_count(Motif) { return 5; }

void GenConfig::validate() const {
  if (num_graphs < 0) throw ConfigError("num_graphs", "must be >= 0");
  if (base_families.empty()) throw ConfigError("base_families", "must be nonempty");
  if (motif_set.empty()) throw ConfigError("motif_set", "must be nonempty");
  if (std::set<BaseFamily>(base_families.begin(), base_families.end()).size() !=
      base_families.size())
    throw ConfigError("base_families", "duplicate family");
  if (std::set<Motif>(motif_set.begin(), motif_set.end()).size() != motif_set.size())
    throw ConfigError("motif_set", "duplicate motif");
  int min_motif = 1 << 30;
  for (auto m : motif_set) min_motif = std::min(min_motif, motif_node_count(m));
  if (base_size_range.first < min_motif)
    throw ConfigError("base_size_range", "minimum base size " +
                                             std::to_string(base_size_range.first) +
                                             " is below the motif size " +
                                             std::to_string(min_motif));
  if (base_size_range.second < base_size_range.first)
    throw ConfigError("base_size_range", "max < min");
  if (feature_dim < role_dims())
    throw ConfigError("feature_dim", "needs at least " + std::to_string(role_dims()) +
                                         " role dimensions");
  for (int d : env_dims) {
    if (d < 0 || d >= feature_dim) throw ConfigError("env_dims", "dimension out of range");
    if (d < role_dims()) throw ConfigError("env_dims", "overlaps the role dimensions");
  }
  if (std::set<int>(env_dims.begin(), env_dims.end()).size() != env_dims.size())
    throw ConfigError("env_dims", "duplicate dimension");
  if (num_feature_envs < 1) throw ConfigError("num_feature_envs", "must be >= 1");
  if (!(concept_corr >= 0.0 && concept_corr <= 1.0))
    throw ConfigError("concept_corr", "must lie in [0, 1]");
  if (concept_domain != ShiftDomain::Basis && concept_domain != ShiftDomain::Size)
    throw ConfigError("concept_domain", "must be basis or size");
}

int size_bucket(int size, std::pair<int, int> range) {
  const int width = range.second - range.first + 1;
  const int b = (size - range.first) * kSizeBuckets / width;
  return std::clamp(b, 0, kSizeBuckets - 1);
}

namespace {

using EdgeList = std::vector<Edge>;

EdgeList base_edges(BaseFamily f, int n, Rng& rng) {
  EdgeList e;
  switch (f) {
    case BaseFamily::Path:
      for (int i = 0; i + 1 < n; ++i) e.push_back({i, i + 1});
      break;
    case BaseFamily::Cycle:
      for (int i = 0; i + 1 < n; ++i) e.push_back({i, i + 1});
      e.push_back({0, n - 1});
      break;
    case BaseFamily::Tree:
      for (int i = 1; i < n; ++i) {
        std::uniform_int_distribution<int> pick(0, i - 1);
        e.push_back({pick(rng), i});
      }
      break;
    case BaseFamily::BarabasiAlbert: {
      // Preferential attachment, two links per new node, seeded by a triangle.
      e = {{0, 1}, {1, 2}, {0, 2}};
      std::vector<int> ends = {0, 1, 1, 2, 0, 2};
      for (int v = 3; v < n; ++v) {
        std::set<int> targets;
        std::uniform_int_distribution<std::size_t> pick(0, ends.size() - 1);
        while (targets.size() < 2) targets.insert(ends[pick(rng)]);
        for (int t : targets) {
          e.push_back({t, v});
          ends.push_back(t);
          ends.push_back(v);
        }
      }
      break;
    }
    case BaseFamily::Wheel:
      for (int i = 1; i < n; ++i) {
        e.push_back({0, i});
        e.push_back({i, i + 1 < n ? i + 1 : 1});
      }
      break;
  }
  return e;
}

EdgeList motif_edges(Motif m) {
  switch (m) {
    case Motif::House: return {{0, 1}, {1, 2}, {2, 3}, {0, 3}, {0, 4}, {1, 4}};
    case Motif::Pentagon: return {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {0, 4}};
    case Motif::Candy: return {{0, 1}, {1, 2}, {2, 3}, {0, 3}, {3, 4}};
  }
  return {};
}

}  // namespace

Dataset generate(const GenConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int num_families = static_cast<int>(cfg.base_families.size());
  const int num_motifs = static_cast<int>(cfg.motif_set.size());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> pick_family(0, num_families - 1);
  std::uniform_int_distribution<int> pick_motif(0, num_motifs - 1);
  std::uniform_int_distribution<int> pick_env(0, cfg.num_feature_envs - 1);
  std::uniform_int_distribution<int> pick_size(cfg.base_size_range.first,
                                               cfg.base_size_range.second);
  std::uniform_int_distribution<int> pick_bucket(0, kSizeBuckets - 1);

  auto sample_size_in_bucket = [&](int bucket) {
    std::vector<int> sizes;
    for (int s = cfg.base_size_range.first; s <= cfg.base_size_range.second; ++s)
      if (size_bucket(s, cfg.base_size_range) == bucket) sizes.push_back(s);
    if (sizes.empty()) return pick_size(rng);
    std::uniform_int_distribution<std::size_t> p(0, sizes.size() - 1);
    return sizes[p(rng)];
  };

  Dataset ds;
  ds.graphs.reserve(static_cast<std::size_t>(cfg.num_graphs));
  for (int gi = 0; gi < cfg.num_graphs; ++gi) {
    const int label = pick_motif(rng);
    const Motif motif = cfg.motif_set[label];
    const bool follow = unit(rng) < cfg.concept_corr;

    int family = pick_family(rng);
    if (follow && cfg.concept_domain == ShiftDomain::Basis) family = label % num_families;
    int base_n = pick_size(rng);
    if (follow && cfg.concept_domain == ShiftDomain::Size)
      base_n = sample_size_in_bucket(label % kSizeBuckets);
    const int env_id = pick_env(rng);

    EdgeList edges = base_edges(cfg.base_families[family], base_n, rng);
    const int motif_n = motif_node_count(motif);
    const int n = base_n + motif_n;
    const std::size_t motif_edge_begin = edges.size();
    for (const auto& e : motif_edges(motif)) edges.push_back({e.src + base_n, e.dst + base_n});
    const std::size_t motif_edge_end = edges.size();
    {
      std::uniform_int_distribution<int> pb(0, base_n - 1), pm(0, motif_n - 1);
      const int u = pb(rng);
      const int v = base_n + pm(rng);
      edges.push_back({u, v});
    }

    // Random relabeling so motif nodes carry no positional signature.
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);

    std::vector<std::pair<Edge, bool>> tagged;
    for (std::size_t k = 0; k < edges.size(); ++k) {
      Edge e{perm[edges[k].src], perm[edges[k].dst]};
      if (e.src > e.dst) std::swap(e.src, e.dst);
      tagged.push_back({e, k >= motif_edge_begin && k < motif_edge_end});
    }
    std::sort(tagged.begin(), tagged.end(), [](const auto& a, const auto& b) {
      return std::pair(a.first.src, a.first.dst) < std::pair(b.first.src, b.first.dst);
    });

    Matrix x(n, cfg.feature_dim);
    std::vector<int> types(n);
    Mask gt_nodes(n, false);
    for (int old = 0; old < n; ++old) {
      const int v = perm[old];
      const bool in_motif = old >= base_n;
      const int role = in_motif ? 1 + label : 0;
      types[v] = in_motif ? 1 : 0;
      gt_nodes[v] = in_motif;
      for (int c = 0; c < cfg.feature_dim; ++c) x(v, c) = 0.1 * normal(rng);
      x(v, role) += 1.0;
      for (int d : cfg.env_dims) x(v, d) = env_id + 0.3 * normal(rng);
    }

    std::vector<Edge> final_edges;
    Mask gt_edges;
    for (const auto& [e, is_motif] : tagged) {
      final_edges.push_back(e);
      gt_edges.push_back(is_motif);
    }
    ds.graphs.emplace_back(
        n, std::move(final_edges), std::move(x), std::move(types), label,
        EnvMeta{family, size_bucket(base_n, cfg.base_size_range), env_id, cfg.env_dims},
        GroundTruth{std::move(gt_nodes), std::move(gt_edges)});
  }
  ds.split_tags.assign(ds.graphs.size(), SplitTag::Unassigned);
  return ds;
}

bool concept_matched(const Graph& g, ShiftDomain domain, int num_families) {
  const auto& env = g.env_meta();
  if (!env) throw StructuralError("graph lacks env metadata");
  if (domain == ShiftDomain::Size) return env->size_bucket == g.label() % kSizeBuckets;
  return env->family == g.label() % num_families;
}

namespace {

// Holds out the last two distinct environment values: train gets the rest.
void split_by_environment(Dataset& ds, const std::vector<int>& env, const char* what) {
  std::set<int> values(env.begin(), env.end());
  if (values.size() < 3)
    throw ConfigError("shift", std::string("covariate split needs at least 3 distinct ") + what +
                                   ", found " + std::to_string(values.size()));
  std::vector<int> sorted(values.begin(), values.end());
  const int val_env = sorted[sorted.size() - 2];
  const int test_env = sorted.back();
  for (std::size_t i = 0; i < env.size(); ++i)
    ds.split_tags[i] = env[i] == test_env  ? SplitTag::Test
                       : env[i] == val_env ? SplitTag::Val
                                           : SplitTag::Train;
}

}  // namespace

Dataset split(Dataset ds, ShiftType shift, ShiftDomain domain, const SplitConfig& cfg) {
  const std::size_t n = ds.graphs.size();
  ds.split_tags.assign(n, SplitTag::Unassigned);
  ds.shift = {shift, domain};
  if (n == 0) throw ConfigError("dataset", "cannot split an empty dataset");
  if (shift == ShiftType::None) throw ConfigError("shift", "shift type required");
  Rng rng(cfg.seed);

  if (shift == ShiftType::Iid) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_train = (3 * n + 4) / 5;
    const std::size_t n_val = (n - n_train) / 2;
    for (std::size_t k = 0; k < n; ++k)
      ds.split_tags[order[k]] = k < n_train           ? SplitTag::Train
                                : k < n_train + n_val ? SplitTag::Val
                                                      : SplitTag::Test;
    ds.shift.domain = ShiftDomain::None;
    return ds;
  }

  if (domain != ShiftDomain::Basis && domain != ShiftDomain::Size)
    throw ConfigError("domain", "basis or size required");
  std::vector<int> env(n);
  int num_families = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& meta = ds.graphs[i].env_meta();
    if (!meta) throw StructuralError("graph " + std::to_string(i) + " lacks env metadata");
    env[i] = domain == ShiftDomain::Basis ? meta->family : meta->size_bucket;
    num_families = std::max(num_families, meta->family + 1);
  }

  if (shift == ShiftType::Covariate) {
    split_by_environment(ds, env, domain == ShiftDomain::Basis ? "families" : "size buckets");
    return ds;
  }

  // Concept shift.
  if (!(cfg.concept_train_corr >= 0.0 && cfg.concept_train_corr <= 1.0))
    throw ConfigError("concept_train_corr", "must lie in [0, 1]");
  std::vector<int> matched, unmatched;
  for (std::size_t i = 0; i < n; ++i)
    (concept_matched(ds.graphs[i], domain, num_families) ? matched : unmatched)
        .push_back(static_cast<int>(i));
  std::shuffle(matched.begin(), matched.end(), rng);
  std::shuffle(unmatched.begin(), unmatched.end(), rng);

  const auto n_train = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  const double c = cfg.concept_train_corr;
  std::size_t tm = std::min(matched.size(),
                            static_cast<std::size_t>(std::llround(c * static_cast<double>(n_train))));
  std::size_t tu = std::min(unmatched.size(), n_train - tm);
  std::size_t su = std::min(unmatched.size() - tu,
                            static_cast<std::size_t>(std::llround(c * static_cast<double>(n_test))));
  std::size_t sm = std::min(matched.size() - tm, n_test - su);
  if (tm + tu == 0) throw ConfigError("concept_train_corr", "no graphs available for train");
  std::size_t mi = 0, ui = 0;
  for (; mi < tm; ++mi) ds.split_tags[matched[mi]] = SplitTag::Train;
  for (; ui < tu; ++ui) ds.split_tags[unmatched[ui]] = SplitTag::Train;
  for (std::size_t k = 0; k < sm; ++k, ++mi) ds.split_tags[matched[mi]] = SplitTag::Test;
  for (std::size_t k = 0; k < su; ++k, ++ui) ds.split_tags[unmatched[ui]] = SplitTag::Test;
  for (; mi < matched.size(); ++mi) ds.split_tags[matched[mi]] = SplitTag::Val;
  for (; ui < unmatched.size(); ++ui) ds.split_tags[unmatched[ui]] = SplitTag::Val;
  return ds;
}

}  // namespace openx
