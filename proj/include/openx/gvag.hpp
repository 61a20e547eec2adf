#pragma once

#include "openx/blackbox.hpp"
#include "openx/nodevae.hpp"
#include "openx/npaf.hpp"
#include "openx/recon.hpp"

#include <nlohmann/json_fwd.hpp>

#include <limits>
#include <string>
#include <vector>

namespace openx {

struct LossWeights {
  double nodevae = 1.0;
  double recon = 2.0;
  double con = 0.5;
  double lar = 1.0;
  // Switches inside the reconstruction term, used by ablations.
  double mi = 1.0;
  double rr = 1.0;
  double mse = 1.0;
  double kl = 0.1;

  void validate() const;
};

struct LossBreakdown {
  double nodevae = 0.0;
  double mi = 0.0;
  double rr = 0.0;
  double con = 0.0;
  double lar = 0.0;
  double causal = 0.0;
  double hinge = 0.0;
  double subg_node = 0.0;
  double final = 0.0;
  LossWeights weights;
};

// Weighted sum of the parts; throws NumericError naming the first non-finite part.
double final_loss(const LossBreakdown& parts, const LossWeights& w);

// Sum of ln p over the selected entries of column vectors of node and edge
// probabilities.
Var log_prob(const Var& node_prob, const Var& edge_prob, const Explanation& e);
// Mean of ln p over selected entries (0 when nothing is selected).
Var mean_log_prob(const Var& node_prob, const Var& edge_prob, const Explanation& e);

// mean over samples of (-logp if the explanation keeps the label, +logp otherwise)
Var mi_loss(const std::vector<Var>& log_probs, const std::vector<bool>& matched);
// mean over instances of l_diff * exp(mean log-prob)
Var rr_loss(const std::vector<double>& l_diff, const std::vector<Var>& mean_log_probs);
// -sum w * (y ln s(x) + (1 - y) ln s(-x))
Var weighted_bce(const Var& logits, const Matrix& y, const Matrix& w);
// Mean node BCE plus mean edge BCE for one graph.
Var causal_bce(const Var& node_logits, const Mask& y_v, const Var& edge_logits, const Mask& y_e);
double hinge_reg(const std::vector<double>& loss_s, const std::vector<double>& loss_c);
int prior_nodes(int n, double rho, int min_nodes, int max_nodes);
double subg_node_reg(const std::vector<double>& l_diff, const std::vector<int>& n_sub,
                     const std::vector<int>& n_prior);
Var contrastive_loss(const Var& z, const std::vector<int>& labels, double temperature = 0.5);
Var lar(double mean_l_diff, double previous_mean_l_diff, const Var& mean_prob);

struct ExplainerConfig {
  int e_dim = 16;
  int latent = 16;
  int hidden = 32;
  LossWeights weights;
  ReconConfig recon;
  double rho_prior = 0.3;
  double temperature = 0.5;
  int samples = 4;
  int epochs = 10;
  int batch_size = 64;
  double lr = 0.0005;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExplainerConfig& c);
void from_json(const nlohmann::json& j, ExplainerConfig& c);

// Outcome of one sampled explanation under the black box.
struct SampleOutcome {
  Explanation e;
  double loss_c = 0.0;  // L(G_c) against the reference label
  double loss_s = 0.0;  // L(G_s)
  int label_c = 0;
};

// Everything the loss needs about one graph, fixed before the tape is built.
struct InstanceData {
  const Graph* g = nullptr;
  Matrix h;  // node embeddings from the black box
  Vector h_graph;
  int label = 0;       // predicted label of G
  double loss_g = 0.0; // L(G)
  int env_s = 0;
  int env_f = 0;
  Matrix node_noise;   // n x latent
  Matrix graph_noise;  // 1 x latent
  std::vector<SampleOutcome> samples;
  bool has_causal = false;
  Mask y_v;
  Mask y_e;
  Vector h_graph_perturbed;
  int env_s_perturbed = 0;
  int env_f_perturbed = 0;
};

struct BatchForward {
  Var h_hat, h, mu, logvar;         // stacked over all nodes of the batch
  Var mu_g, logvar_g, z_g;          // one row per graph
  Var node_logit, edge_logit;       // stacked columns
  Var node_prob, edge_prob;
  Var node_logit2, edge_logit2;
  std::vector<int> node_offset, edge_offset;
};

struct BatchTerms {
  Var nodevae, mi, rr, con, lar, causal, hinge, subg_node, total;
  double mean_l_diff = 0.0;
};

class Explainer {
 public:
  Explainer() = default;
  Explainer(const ExplainerConfig& cfg, EnvModel env, int h_dim);

  const ExplainerConfig& config() const { return cfg_; }
  const VaeDims& dims() const { return dims_; }
  const EnvModel& env() const { return env_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Forward pass over a batch. Null noise means the posterior mean is used.
  BatchForward forward(Tape& tape, ParamStore& params, const std::vector<InstanceData>& batch,
                       bool use_noise) const;
  BatchTerms batch_loss(Tape& tape, ParamStore& params, const std::vector<InstanceData>& batch,
                        double previous_mean_l_diff) const;

  // Prepares the black-box side of one graph (embeddings, environment).
  InstanceData prepare(const BlackBox& model, const Graph& g) const;
  ProbMap prob_map(const BlackBox& model, const Graph& g) const;
  Explanation explain(const BlackBox& model, const Graph& g) const;

  // Directory with manifest.json, params.json and envmodel.json.
  void save(const std::string& dir, const nlohmann::json& meta) const;
  static Explainer load(const std::string& dir, nlohmann::json* meta = nullptr);

 private:
  ExplainerConfig cfg_;
  VaeDims dims_;
  EnvModel env_;
  ParamStore params_;
};

struct TrainResult {
  Explainer explainer;
  std::vector<LossBreakdown> log;  // one row per epoch
  bool diverged = false;
  std::string message;
};

// `train` must be the list NPAF was fitted on, in the same order.
TrainResult train_explainer(const std::vector<const Graph*>& train, const BlackBox& model,
                            const EnvModel& env, const ExplainerConfig& cfg);

// Fills samples and perturbation fields of `inst`.
void sample_instance(const Explainer& ex, const BlackBox& model, InstanceData& inst,
                     const std::vector<std::vector<const Graph*>>& pool_by_env, Rng& rng);

void write_loss_log(const std::vector<LossBreakdown>& log, const std::string& path);

}  // namespace openx
