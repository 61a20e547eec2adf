#include "openx/gvag.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace openx {

using json = nlohmann::json;

namespace {

constexpr double kLossEps = 1e-8;

void check_weight(double v, const char* key) {
  if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(key, "must be finite and >= 0");
}

Var zero_like(Tape& tape) { return tape.constant(Matrix::Zero(1, 1)); }

// Affine squash of a sigmoid into [kProbEps, 1 - kProbEps].
Var squashed_sigmoid(const Var& logits) {
  return add_scalar((1.0 - 2.0 * kProbEps) * sigmoid(logits), kProbEps);
}

Var sum_of(const std::vector<Var>& parts) {
  Var acc = parts.front();
  for (std::size_t k = 1; k < parts.size(); ++k) acc = acc + parts[k];
  return acc;
}

// Weights selecting one explanation's entries inside stacked node/edge columns.
std::pair<Matrix, Matrix> selection(const Explanation& e, Eigen::Index n_total,
                                    Eigen::Index m_total, int node_offset, int edge_offset,
                                    double scale) {
  Matrix wn = Matrix::Zero(n_total, 1), we = Matrix::Zero(m_total, 1);
  for (std::size_t v = 0; v < e.node_mask.size(); ++v)
    if (e.node_mask[v]) wn(node_offset + static_cast<Eigen::Index>(v), 0) = scale;
  for (std::size_t k = 0; k < e.edge_mask.size(); ++k)
    if (e.edge_mask[k]) we(edge_offset + static_cast<Eigen::Index>(k), 0) = scale;
  return {std::move(wn), std::move(we)};
}

int selected_count(const Explanation& e) { return e.node_count() + e.edge_count(); }

Var log_prob_at(const Var& ln_nodes, const Var& ln_edges, const Explanation& e, int node_offset,
                int edge_offset, bool average) {
  const int count = selected_count(e);
  const double scale = average ? (count > 0 ? 1.0 / count : 0.0) : 1.0;
  auto [wn, we] = selection(e, ln_nodes.rows(), ln_edges.rows(), node_offset, edge_offset, scale);
  return masked_sum(ln_nodes, wn) + masked_sum(ln_edges, we);
}

}  // namespace

void LossWeights::validate() const {
  check_weight(nodevae, "weights.nodevae");
  check_weight(recon, "weights.recon");
  check_weight(con, "weights.con");
  check_weight(lar, "weights.lar");
  check_weight(mi, "weights.mi");
  check_weight(rr, "weights.rr");
  check_weight(mse, "weights.mse");
  check_weight(kl, "weights.kl");
}

double final_loss(const LossBreakdown& p, const LossWeights& w) {
  const std::pair<const char*, double> parts[] = {
      {"L_NodeVAE", p.nodevae}, {"L_MI", p.mi},         {"L_RR", p.rr},
      {"L_CON", p.con},         {"LAR", p.lar},         {"R_causal", p.causal},
      {"R_hinge", p.hinge},     {"R_subg_node", p.subg_node}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss part ") + name);
  return w.nodevae * p.nodevae + w.recon * (w.mi * p.mi + w.rr * p.rr) + w.con * p.con +
         w.lar * p.lar + p.causal + p.hinge + p.subg_node;
}

Var log_prob(const Var& node_prob, const Var& edge_prob, const Explanation& e) {
  if (e.node_mask.size() != static_cast<std::size_t>(node_prob.rows()) ||
      e.edge_mask.size() != static_cast<std::size_t>(edge_prob.rows()))
    throw StructuralError("log_prob: mask size mismatch");
  return log_prob_at(log(node_prob), log(edge_prob), e, 0, 0, false);
}

Var mean_log_prob(const Var& node_prob, const Var& edge_prob, const Explanation& e) {
  if (e.node_mask.size() != static_cast<std::size_t>(node_prob.rows()) ||
      e.edge_mask.size() != static_cast<std::size_t>(edge_prob.rows()))
    throw StructuralError("mean_log_prob: mask size mismatch");
  return log_prob_at(log(node_prob), log(edge_prob), e, 0, 0, true);
}

Var mi_loss(const std::vector<Var>& log_probs, const std::vector<bool>& matched) {
  if (log_probs.empty() || log_probs.size() != matched.size())
    throw StructuralError("mi_loss: need one match flag per nonempty sample list");
  std::vector<Var> terms;
  for (std::size_t k = 0; k < log_probs.size(); ++k)
    terms.push_back((matched[k] ? -1.0 : 1.0) * log_probs[k]);
  return (1.0 / static_cast<double>(terms.size())) * sum_of(terms);
}

Var rr_loss(const std::vector<double>& l_diff, const std::vector<Var>& mean_log_probs) {
  if (l_diff.empty() || l_diff.size() != mean_log_probs.size())
    throw StructuralError("rr_loss: need one loss gap per nonempty instance list");
  std::vector<Var> terms;
  for (std::size_t k = 0; k < l_diff.size(); ++k)
    terms.push_back(l_diff[k] * exp(mean_log_probs[k]));
  return (1.0 / static_cast<double>(terms.size())) * sum_of(terms);
}

Var weighted_bce(const Var& logits, const Matrix& y, const Matrix& w) {
  if (y.rows() != logits.rows() || y.cols() != logits.cols() || w.rows() != y.rows() ||
      w.cols() != y.cols())
    throw StructuralError("weighted_bce: shape mismatch");
  const Matrix pos = w.cwiseProduct(y);
  const Matrix neg = w.cwiseProduct((1.0 - y.array()).matrix());
  return -1.0 * (masked_sum(log_sigmoid(logits), pos) +
                 masked_sum(log_sigmoid(-1.0 * logits), neg));
}

Var causal_bce(const Var& node_logits, const Mask& y_v, const Var& edge_logits, const Mask& y_e) {
  auto labels = [](const Mask& m) {
    Matrix y(static_cast<Eigen::Index>(m.size()), 1);
    for (std::size_t k = 0; k < m.size(); ++k) y(static_cast<Eigen::Index>(k), 0) = m[k];
    return y;
  };
  const Matrix yv = labels(y_v), ye = labels(y_e);
  Var out = weighted_bce(node_logits, yv,
                         Matrix::Constant(yv.rows(), 1, yv.rows() ? 1.0 / yv.rows() : 0.0));
  if (ye.rows() > 0)
    out = out + weighted_bce(edge_logits, ye, Matrix::Constant(ye.rows(), 1, 1.0 / ye.rows()));
  return out;
}

double hinge_reg(const std::vector<double>& loss_s, const std::vector<double>& loss_c) {
  if (loss_s.size() != loss_c.size()) throw StructuralError("hinge_reg: length mismatch");
  double sum = 0.0;
  int violating = 0;
  for (std::size_t k = 0; k < loss_s.size(); ++k) {
    if (loss_s[k] > loss_c[k]) {
      sum += loss_s[k];
      ++violating;
    }
  }
  return violating ? sum / violating : 0.0;
}

int prior_nodes(int n, double rho, int min_nodes, int max_nodes) {
  const int r = static_cast<int>(std::lround(rho * n));
  return std::clamp(r, min_nodes, max_nodes);
}

double subg_node_reg(const std::vector<double>& l_diff, const std::vector<int>& n_sub,
                     const std::vector<int>& n_prior) {
  if (l_diff.size() != n_sub.size() || l_diff.size() != n_prior.size())
    throw StructuralError("subg_node_reg: length mismatch");
  if (l_diff.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t k = 0; k < l_diff.size(); ++k) {
    const double lead = 1.0 / (l_diff[k] + kLossEps);
    if (l_diff[k] > 0.0) {
      sum += lead * (static_cast<double>(n_sub[k] - n_prior[k]) / n_prior[k]);
    } else {
      const double ns = n_sub[k] > 0 ? static_cast<double>(n_sub[k]) : kLossEps;
      sum += lead * (1.0 / ns);
    }
  }
  return sum / static_cast<double>(l_diff.size());
}

Var contrastive_loss(const Var& z, const std::vector<int>& labels, double temperature) {
  if (static_cast<std::size_t>(z.rows()) != labels.size())
    throw StructuralError("contrastive_loss: one label per row required");
  if (!(temperature > 0.0)) throw ConfigError("temperature", "must be > 0");
  const Eigen::Index n = z.rows();
  Matrix intra = Matrix::Zero(n, n), inter = Matrix::Zero(n, n);
  bool any_intra = false;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      if (labels[i] == labels[j]) {
        intra(i, j) = 1.0;
        any_intra = true;
      } else {
        inter(i, j) = 1.0;
      }
    }
  if (!any_intra) return zero_like(*z.tape());
  const Var zn = row_normalize(z);
  const Var e = exp((1.0 / temperature) * matmul_transposed(zn, zn));
  const Var a = masked_sum(e, intra), b = masked_sum(e, inter);
  return log(add_scalar(a + b, kLossEps)) - log(a);
}

Var lar(double mean_l_diff, double previous_mean_l_diff, const Var& mean_prob) {
  const double old = std::isfinite(previous_mean_l_diff) ? previous_mean_l_diff : mean_l_diff;
  return (mean_l_diff - old) * mean_prob;
}

void ExplainerConfig::validate() const {
  if (e_dim < 1) throw ConfigError("explainer.e_dim", "must be >= 1");
  if (latent < 1) throw ConfigError("explainer.latent", "must be >= 1");
  if (hidden < 1) throw ConfigError("explainer.hidden", "must be >= 1");
  weights.validate();
  recon.validate();
  if (!(rho_prior > 0.0 && rho_prior <= 1.0))
    throw ConfigError("explainer.rho_prior", "must be in (0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("explainer.temperature", "must be > 0");
  if (samples < 1) throw ConfigError("explainer.samples", "must be >= 1");
  if (epochs < 0) throw ConfigError("explainer.epochs", "must be >= 0");
  if (batch_size < 1) throw ConfigError("explainer.batch_size", "must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("explainer.lr", "must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("explainer.weight_decay", "must be >= 0");
}

void to_json(json& j, const ExplainerConfig& c) {
  const auto& w = c.weights;
  const auto& r = c.recon;
  j = json{{"e_dim", c.e_dim},
           {"latent", c.latent},
           {"hidden", c.hidden},
           {"weights",
            {{"nodevae", w.nodevae},
             {"recon", w.recon},
             {"con", w.con},
             {"lar", w.lar},
             {"mi", w.mi},
             {"rr", w.rr},
             {"mse", w.mse},
             {"kl", w.kl}}},
           {"recon",
            {{"max_nodes", r.max_nodes},
             {"min_nodes", r.min_nodes},
             {"start_nid", r.start_nid ? json(*r.start_nid) : json(nullptr)},
             {"density", r.density},
             {"max_iter", r.max_iter},
             {"min_edges", r.min_edges}}},
           {"rho_prior", c.rho_prior},
           {"temperature", c.temperature},
           {"samples", c.samples},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"lr", c.lr},
           {"weight_decay", c.weight_decay},
           {"seed", c.seed}};
}

void from_json(const json& j, ExplainerConfig& c) {
  c.e_dim = j.at("e_dim").get<int>();
  c.latent = j.at("latent").get<int>();
  c.hidden = j.at("hidden").get<int>();
  const auto& w = j.at("weights");
  c.weights = {w.at("nodevae").get<double>(), w.at("recon").get<double>(),
               w.at("con").get<double>(),     w.at("lar").get<double>(),
               w.at("mi").get<double>(),      w.at("rr").get<double>(),
               w.at("mse").get<double>(),     w.at("kl").get<double>()};
  const auto& r = j.at("recon");
  c.recon.max_nodes = r.at("max_nodes").get<int>();
  c.recon.min_nodes = r.at("min_nodes").get<int>();
  c.recon.start_nid = r.at("start_nid").is_null() ? std::nullopt
                                                  : std::optional<int>(r.at("start_nid").get<int>());
  c.recon.density = r.at("density").get<double>();
  c.recon.max_iter = r.at("max_iter").get<int>();
  c.recon.min_edges = r.at("min_edges").get<int>();
  c.rho_prior = j.at("rho_prior").get<double>();
  c.temperature = j.at("temperature").get<double>();
  c.samples = j.at("samples").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

Explainer::Explainer(const ExplainerConfig& cfg, EnvModel env, int h_dim)
    : cfg_(cfg), env_(std::move(env)) {
  cfg_.validate();
  if (!env_.fitted()) throw StateError("explainer needs a fitted environment model");
  if (h_dim < 1) throw ConfigError("h_dim", "must be >= 1");
  dims_ = {h_dim,
           cfg.e_dim,
           cfg.latent,
           cfg.hidden,
           static_cast<int>(env_.structure_centers.rows()),
           static_cast<int>(env_.feature_centers.rows())};
  Rng rng(cfg.seed);
  env_tables_init(params_, dims_, rng);
  nodevae_init(params_, dims_, rng);
  const int l = cfg.latent, e = cfg.e_dim;
  mlp2_init(params_, "gvag.enc", h_dim + e, cfg.hidden, 2 * l, rng);
  mlp2_init(params_, "gvag.node", 2 * l + e, cfg.hidden, 1, rng);
  mlp2_init(params_, "gvag.edge", 3 * l + e, cfg.hidden, 1, rng);
  mlp2_init(params_, "gvag.node2", 2 * l + e, cfg.hidden, 1, rng);
  mlp2_init(params_, "gvag.edge2", 3 * l + e, cfg.hidden, 1, rng);
}

BatchForward Explainer::forward(Tape& tape, ParamStore& params,
                                const std::vector<InstanceData>& batch, bool use_noise) const {
  const int nb = static_cast<int>(batch.size());
  BatchForward f;
  int n_total = 0, m_total = 0;
  for (const auto& inst : batch) {
    f.node_offset.push_back(n_total);
    f.edge_offset.push_back(m_total);
    n_total += inst.g->num_nodes();
    m_total += inst.g->num_edges();
  }
  Matrix h(n_total, dims_.h_dim), node_noise = Matrix::Zero(n_total, dims_.latent);
  Matrix hg(2 * nb, dims_.h_dim), graph_noise = Matrix::Zero(2 * nb, dims_.latent);
  std::vector<int> node_env, node_graph, edge_graph, src, dst, env_s(2 * nb), env_f(2 * nb);
  for (int b = 0; b < nb; ++b) {
    const auto& inst = batch[b];
    const int n = inst.g->num_nodes();
    if (inst.h.rows() != n || inst.h.cols() != dims_.h_dim)
      throw StructuralError("explainer: node embedding shape mismatch");
    h.middleRows(f.node_offset[b], n) = inst.h;
    if (use_noise) {
      node_noise.middleRows(f.node_offset[b], n) = inst.node_noise;
      graph_noise.row(b) = inst.graph_noise.row(0);
    }
    hg.row(b) = inst.h_graph.transpose();
    hg.row(nb + b) = inst.h_graph_perturbed.transpose();
    env_s[b] = inst.env_s;
    env_f[b] = inst.env_f;
    env_s[nb + b] = inst.env_s_perturbed;
    env_f[nb + b] = inst.env_f_perturbed;
    for (int v = 0; v < n; ++v) {
      node_env.push_back(inst.env_f);
      node_graph.push_back(b);
    }
    for (const Edge& e : inst.g->edges()) {
      edge_graph.push_back(b);
      src.push_back(f.node_offset[b] + e.src);
      dst.push_back(f.node_offset[b] + e.dst);
    }
  }

  Var str = tape.param(params.at("env.str"));
  Var feat = tape.param(params.at("env.feat"));
  f.h = tape.constant(std::move(h));
  Var e_nodes = gather_rows(feat, node_env);
  NodeCode code = encode_node(tape, params, f.h, e_nodes);
  f.mu = code.mu;
  f.logvar = code.logvar;
  Var z = use_noise ? reparameterize(code.mu, code.logvar, node_noise) : code.mu;
  f.h_hat = decode_node(tape, params, z, e_nodes);

  Var e_g = 0.5 * (gather_rows(str, env_s) + gather_rows(feat, env_f));
  Var gout = mlp2(tape, params, "gvag.enc", concat_cols({tape.constant(std::move(hg)), e_g}));
  f.mu_g = slice_cols(gout, 0, dims_.latent);
  f.logvar_g = clamp(slice_cols(gout, dims_.latent, dims_.latent), -kLogvarBound, kLogvarBound);
  f.z_g = use_noise ? reparameterize(f.mu_g, f.logvar_g, graph_noise) : f.mu_g;

  Var node_in = concat_cols({gather_rows(f.z_g, node_graph), z, gather_rows(e_g, node_graph)});
  Var edge_in = concat_cols({gather_rows(f.z_g, edge_graph), gather_rows(z, src),
                             gather_rows(z, dst), gather_rows(e_g, edge_graph)});
  f.node_logit = mlp2(tape, params, "gvag.node", node_in);
  f.edge_logit = mlp2(tape, params, "gvag.edge", edge_in);
  f.node_prob = squashed_sigmoid(f.node_logit);
  f.edge_prob = squashed_sigmoid(f.edge_logit);
  f.node_logit2 = mlp2(tape, params, "gvag.node2", node_in);
  f.edge_logit2 = mlp2(tape, params, "gvag.edge2", edge_in);
  return f;
}

BatchTerms Explainer::batch_loss(Tape& tape, ParamStore& params,
                                 const std::vector<InstanceData>& batch,
                                 double previous_mean_l_diff) const {
  if (batch.empty()) throw StructuralError("batch_loss: empty batch");
  const LossWeights& w = cfg_.weights;
  BatchForward f = forward(tape, params, batch, true);
  BatchTerms t;
  t.nodevae = nodevae_loss(f.h_hat, f.h, f.mu, f.logvar, w.mse, w.kl);

  const Var ln_nodes = log(f.node_prob), ln_edges = log(f.edge_prob);
  std::vector<Var> logps, mean_logps;
  std::vector<bool> matched;
  std::vector<double> l_diff, loss_s, loss_c;
  std::vector<int> n_sub, n_prior;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& inst = batch[b];
    for (const auto& s : inst.samples) {
      logps.push_back(log_prob_at(ln_nodes, ln_edges, s.e, f.node_offset[b], f.edge_offset[b],
                                  false));
      mean_logps.push_back(log_prob_at(ln_nodes, ln_edges, s.e, f.node_offset[b],
                                       f.edge_offset[b], true));
      matched.push_back(s.label_c == inst.label);
      l_diff.push_back(s.loss_c - inst.loss_g);
      loss_s.push_back(s.loss_s);
      loss_c.push_back(s.loss_c);
      n_sub.push_back(s.e.node_count());
      n_prior.push_back(prior_nodes(inst.g->num_nodes(), cfg_.rho_prior, cfg_.recon.min_nodes,
                                    cfg_.recon.max_nodes));
    }
  }
  if (logps.empty()) throw StructuralError("batch_loss: no sampled explanations");
  t.mi = mi_loss(logps, matched);
  t.rr = rr_loss(l_diff, mean_logps);
  t.mean_l_diff = std::accumulate(l_diff.begin(), l_diff.end(), 0.0) / l_diff.size();
  std::vector<Var> probs;
  for (const auto& m : mean_logps) probs.push_back(exp(m));
  Var mean_prob = (1.0 / static_cast<double>(probs.size())) * sum_of(probs);
  t.lar = lar(t.mean_l_diff, previous_mean_l_diff, mean_prob);

  int causal_graphs = 0;
  for (const auto& inst : batch) causal_graphs += inst.has_causal;
  if (causal_graphs > 0) {
    Matrix yv = Matrix::Zero(f.node_prob.rows(), 1), wv = yv;
    Matrix ye = Matrix::Zero(f.edge_prob.rows(), 1), we = ye;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& inst = batch[b];
      if (!inst.has_causal) continue;
      const int n = inst.g->num_nodes(), m = inst.g->num_edges();
      if (inst.y_v.size() != static_cast<std::size_t>(n) ||
          inst.y_e.size() != static_cast<std::size_t>(m))
        throw StructuralError("batch_loss: causal label size mismatch");
      for (int v = 0; v < n; ++v) {
        yv(f.node_offset[b] + v, 0) = inst.y_v[v];
        wv(f.node_offset[b] + v, 0) = 1.0 / (n * static_cast<double>(causal_graphs));
      }
      for (int k = 0; k < m; ++k) {
        ye(f.edge_offset[b] + k, 0) = inst.y_e[k];
        we(f.edge_offset[b] + k, 0) = 1.0 / (m * static_cast<double>(causal_graphs));
      }
    }
    t.causal = weighted_bce(f.node_logit2, yv, wv) + weighted_bce(f.edge_logit2, ye, we);
  } else {
    t.causal = zero_like(tape);
  }

  t.hinge = tape.constant(Matrix::Constant(1, 1, hinge_reg(loss_s, loss_c)));
  t.subg_node = tape.constant(Matrix::Constant(1, 1, subg_node_reg(l_diff, n_sub, n_prior)));

  std::vector<int> labels;
  for (const auto& inst : batch) labels.push_back(inst.label);
  for (const auto& inst : batch) labels.push_back(inst.label);
  t.con = contrastive_loss(f.mu_g, labels, cfg_.temperature);

  t.total = w.nodevae * t.nodevae + w.recon * (w.mi * t.mi + w.rr * t.rr) + w.con * t.con +
            w.lar * t.lar + t.causal + t.hinge + t.subg_node;
  return t;
}

InstanceData Explainer::prepare(const BlackBox& model, const Graph& g) const {
  InstanceData inst;
  inst.g = &g;
  Prediction p = model.predict(g, 0);
  inst.label = p.label;
  inst.loss_g = p.label == 0 ? p.loss : model.predict(g, p.label).loss;
  inst.h = std::move(p.node_embeddings);
  inst.h_graph = std::move(p.graph_embedding);
  std::tie(inst.env_s, inst.env_f) = env_.infer_env(g);
  inst.h_graph_perturbed = inst.h_graph;
  inst.env_s_perturbed = inst.env_s;
  inst.env_f_perturbed = inst.env_f;
  inst.node_noise = Matrix::Zero(g.num_nodes(), dims_.latent);
  inst.graph_noise = Matrix::Zero(1, dims_.latent);
  return inst;
}

ProbMap Explainer::prob_map(const BlackBox& model, const Graph& g) const {
  if (g.num_nodes() == 0) return {Vector(0), Vector(0)};
  std::vector<InstanceData> one{prepare(model, g)};
  Tape tape;
  ParamStore& p = const_cast<ParamStore&>(params_);
  BatchForward f = forward(tape, p, one, false);
  return {f.node_prob.value().col(0), f.edge_prob.value().col(0)};
}

Explanation Explainer::explain(const BlackBox& model, const Graph& g) const {
  if (g.num_nodes() == 0) return Explanation::empty(g);
  return reconstruct_edge_first(prob_map(model, g), g, cfg_.recon);
}

void sample_instance(const Explainer& ex, const BlackBox& model, InstanceData& inst,
                     const std::vector<std::vector<const Graph*>>& pool_by_env, Rng& rng) {
  const Graph& g = *inst.g;
  const int n = g.num_nodes();
  const int latent = ex.dims().latent;
  inst.node_noise = standard_normal(n, latent, rng);
  inst.graph_noise = standard_normal(1, latent, rng);

  const auto& dims = ex.env().dim_env;
  std::vector<int> other;
  for (int k = 0; k < static_cast<int>(pool_by_env.size()); ++k)
    if (k != inst.env_f && !pool_by_env[k].empty()) other.push_back(k);
  if (!dims.empty() && !other.empty() && n > 0) {
    Matrix x = g.features();
    for (int v = 0; v < n; ++v) {
      const auto& pool = pool_by_env[other[std::uniform_int_distribution<std::size_t>(
          0, other.size() - 1)(rng)]];
      const Graph* donor = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      if (donor->num_nodes() == 0) continue;
      const int u = std::uniform_int_distribution<int>(0, donor->num_nodes() - 1)(rng);
      for (int d : dims) x(v, d) = donor->features()(u, d);
    }
    const Graph perturbed = g.with_features(std::move(x));
    inst.h_graph_perturbed = model.predict(perturbed, inst.label).graph_embedding;
    std::tie(inst.env_s_perturbed, inst.env_f_perturbed) = ex.env().infer_env(perturbed);
  }

  Tape tape;
  std::vector<InstanceData> one{inst};
  BatchForward f = ex.forward(tape, const_cast<ParamStore&>(ex.params()), one, true);
  const ProbMap pm{f.node_prob.value().col(0), f.edge_prob.value().col(0)};
  inst.samples.clear();
  for (int s = 0; s < ex.config().samples; ++s) {
    SampleOutcome out;
    out.e = sample_subgraph_train(pm, g, ex.config().recon, rng);
    const Prediction pc = model.predict(induced_subgraph(g, out.e), inst.label);
    out.loss_c = pc.loss;
    out.label_c = pc.label;
    out.loss_s = model.predict(complement_graph(g, out.e), inst.label).loss;
    inst.samples.push_back(std::move(out));
  }
}

TrainResult train_explainer(const std::vector<const Graph*>& train, const BlackBox& model,
                            const EnvModel& env, const ExplainerConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw StructuralError("train_explainer: empty train split");
  if (!env.fitted()) throw StateError("train_explainer: environment model is not fitted");
  if (env.node_causal.size() != train.size() || env.feature_labels.size() != train.size())
    throw StructuralError("train_explainer: environment model was fitted on a different split");

  TrainResult res{Explainer(cfg, env, model.embedding_dim()), {}, false, {}};
  Explainer& ex = res.explainer;
  std::vector<std::vector<const Graph*>> pools(static_cast<std::size_t>(env.feature_centers.rows()));
  for (std::size_t i = 0; i < train.size(); ++i) pools[env.feature_labels[i]].push_back(train[i]);

  std::vector<InstanceData> data;
  data.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train[i]->num_nodes() == 0) continue;
    InstanceData inst = ex.prepare(model, *train[i]);
    inst.has_causal = true;
    inst.y_v = env.node_causal[i];
    inst.y_e = env.edge_causal[i];
    data.push_back(std::move(inst));
  }
  if (data.empty()) throw StructuralError("train_explainer: every training graph is empty");

  Adam adam({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(cfg.seed ^ 0xe7a1ULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  double previous = std::numeric_limits<double>::quiet_NaN();
  ParamStore& params = ex.params();

  for (int epoch = 1; epoch <= cfg.epochs && !res.diverged; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    LossBreakdown acc;
    double l_diff_sum = 0.0;
    int batches = 0, samples = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<InstanceData> batch;
      for (std::size_t k = start; k < end; ++k) {
        sample_instance(ex, model, data[order[k]], pools, rng);
        batch.push_back(data[order[k]]);
      }
      params.zero_grad();
      Tape tape;
      BatchTerms t = ex.batch_loss(tape, params, batch, previous);
      if (!std::isfinite(t.total.scalar())) {
        res.diverged = true;
        res.message = "non-finite L_final in epoch " + std::to_string(epoch);
        break;
      }
      tape.backward(t.total);
      ParamStore last_good = params;
      adam.step(params);
      bool finite = true;
      for (const auto& [name, p] : params) finite = finite && p.value.allFinite();
      if (!finite) {
        params = std::move(last_good);
        res.diverged = true;
        res.message = "non-finite parameters after a step in epoch " + std::to_string(epoch);
        break;
      }
      acc.nodevae += t.nodevae.scalar();
      acc.mi += t.mi.scalar();
      acc.rr += t.rr.scalar();
      acc.con += t.con.scalar();
      acc.lar += t.lar.scalar();
      acc.causal += t.causal.scalar();
      acc.hinge += t.hinge.scalar();
      acc.subg_node += t.subg_node.scalar();
      int batch_samples = 0;
      for (const auto& inst : batch) batch_samples += static_cast<int>(inst.samples.size());
      l_diff_sum += t.mean_l_diff * batch_samples;
      samples += batch_samples;
      ++batches;
    }
    if (batches == 0) break;
    for (double* v : {&acc.nodevae, &acc.mi, &acc.rr, &acc.con, &acc.lar, &acc.causal, &acc.hinge,
                      &acc.subg_node})
      *v /= batches;
    acc.weights = cfg.weights;
    acc.final = final_loss(acc, cfg.weights);
    res.log.push_back(acc);
    previous = l_diff_sum / samples;
  }
  return res;
}

void write_loss_log(const std::vector<LossBreakdown>& log, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << "epoch,L_NodeVAE,L_MI,L_RR,L_CON,LAR,R_causal,R_hinge,R_subg_node,L_final\n";
  char buf[512];
  int epoch = 0;
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  ++epoch, r.nodevae, r.mi, r.rr, r.con, r.lar, r.causal, r.hinge, r.subg_node,
                  r.final);
    out << buf;
  }
  if (!out) throw IoError(path, "write failed");
}

void Explainer::save(const std::string& dir, const json& meta) const {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir, "cannot create directory: " + ec.message());
  const json m = meta.is_object() ? meta : json::object();
  save_params(params_, (fs::path(dir) / "params.json").string(), m);
  env_.save((fs::path(dir) / "envmodel.json").string(), m);
  json manifest = {{"format", "openx-explainer"},
                   {"v", 1},
                   {"h_dim", dims_.h_dim},
                   {"config", cfg_},
                   {"files", {{"params", "params.json"}, {"envmodel", "envmodel.json"}}},
                   {"meta", m}};
  const std::string path = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << manifest.dump(1) << '\n';
  if (!out) throw IoError(path, "write failed");
}

Explainer Explainer::load(const std::string& dir, json* meta) {
  namespace fs = std::filesystem;
  const std::string path = (fs::path(dir) / "manifest.json").string();
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open for reading");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const std::exception& e) {
    throw ParseError(e.what(), 0);
  }
  if (manifest.value("format", "") != "openx-explainer")
    throw StructuralError(path + ": not an explainer manifest");
  const auto& files = manifest.at("files");
  EnvModel env =
      EnvModel::load((fs::path(dir) / files.at("envmodel").get<std::string>()).string());
  Explainer ex(manifest.at("config").get<ExplainerConfig>(), std::move(env),
               manifest.at("h_dim").get<int>());
  ex.params_ = load_params((fs::path(dir) / files.at("params").get<std::string>()).string(),
                           manifest_of(ex.params_));
  if (meta) *meta = manifest.at("meta");
  return ex;
}

}  // namespace openx
