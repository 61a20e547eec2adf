#pragma once

#include "openx/graph.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace openx {

enum class BaseFamily { Path, Cycle, Tree, BarabasiAlbert, Wheel };
enum class Motif { House, Pentagon, Candy };

std::string to_string(BaseFamily f);
std::string to_string(Motif m);
BaseFamily base_family_from_string(const std::string& s);
Motif motif_from_string(const std::string& s);
int motif_node_count(Motif m);

inline constexpr int kSizeBuckets = 5;

// Synthetic motif-on-base graphs. Feature layout: dims [0, 1 + |motif_set|)
// one-hot the node role (base, then one per motif) plus N(0, 0.1) noise;
// env_dims carry (env_id + 0.3 N(0, 1)); any remaining dims are N(0, 0.1).
struct GenConfig {
  int num_graphs = 2000;
  std::vector<BaseFamily> base_families = {BaseFamily::Wheel, BaseFamily::Tree,
                                           BaseFamily::BarabasiAlbert, BaseFamily::Path,
                                           BaseFamily::Cycle};
  std::pair<int, int> base_size_range = {10, 20};
  std::vector<Motif> motif_set = {Motif::House, Motif::Pentagon, Motif::Candy};
  int feature_dim = 6;
  std::vector<int> env_dims = {4, 5};
  int num_feature_envs = 3;
  // Probability that the spurious variable (family or size bucket) follows the label.
  double concept_corr = 0.0;
  ShiftDomain concept_domain = ShiftDomain::Basis;
  std::uint64_t seed = 0;

  int role_dims() const { return 1 + static_cast<int>(motif_set.size()); }
  // Throws ConfigError naming the offending field.
  void validate() const;
};

Dataset generate(const GenConfig& cfg);

int size_bucket(int size, std::pair<int, int> range);

struct SplitConfig {
  // Fraction of train graphs whose spurious variable follows the label under
  // concept shift; test receives 1 - this.
  double concept_train_corr = 0.9;
  std::uint64_t seed = 0;
};

// Assigns train/val/test tags. Covariate shift holds out environments
// (families or size buckets) in a 3:1:1 arrangement; concept shift flips the
// label/environment correlation between train and test; iid is a random 3:1:1.
Dataset split(Dataset ds, ShiftType shift, ShiftDomain domain, const SplitConfig& cfg = {});

// True when the graph's spurious variable follows its label.
bool concept_matched(const Graph& g, ShiftDomain domain, int num_families);

}  // namespace openx
