#include "openx/target.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace openx {

using json = nlohmann::json;

void TargetConfig::validate() const {
  if (layers < 1) throw ConfigError("target.layers", "must be >= 1");
  if (hidden < 1) throw ConfigError("target.hidden", "must be >= 1");
  if (epochs < 0) throw ConfigError("target.epochs", "must be >= 0");
  if (batch_size < 1) throw ConfigError("target.batch_size", "must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("target.lr", "must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("target.weight_decay", "must be >= 0");
}

namespace {

std::string layer_name(int k, const char* what) {
  return "gnn.l" + std::to_string(k) + "." + what;
}

Matrix uniform_init(int fan_in, int rows, int cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = u(rng);
  return m;
}

Vector log_softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

}  // namespace

TargetModel::TargetModel(int feature_dim, int num_classes, const TargetConfig& cfg)
    : feature_dim_(feature_dim), num_classes_(num_classes), cfg_(cfg) {
  cfg_.validate();
  if (feature_dim < 1) throw ConfigError("feature_dim", "must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes", "must be >= 1");
  Rng rng(cfg.seed);
  int in = feature_dim;
  for (int k = 0; k < cfg.layers; ++k) {
    params_.add(layer_name(k, "self"), uniform_init(in, in, cfg.hidden, rng));
    params_.add(layer_name(k, "nb"), uniform_init(in, in, cfg.hidden, rng));
    params_.add(layer_name(k, "b"), Matrix::Zero(1, cfg.hidden));
    in = cfg.hidden;
  }
  params_.add("gnn.cls.w", uniform_init(cfg.hidden, cfg.hidden, num_classes, rng));
  params_.add("gnn.cls.b", Matrix::Zero(1, num_classes));
}

ParamStore& TargetModel::mutable_params() {
  if (frozen_) throw StateError("target model is frozen");
  return params_;
}

SparseMatrix mean_adjacency(const Graph& g) {
  const auto adj = g.adjacency();
  SparseMatrix a(g.num_nodes(), g.num_nodes());
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(2 * g.edges().size());
  for (int v = 0; v < g.num_nodes(); ++v) {
    const double w = adj[v].empty() ? 0.0 : 1.0 / static_cast<double>(adj[v].size());
    for (int u : adj[v]) trips.emplace_back(v, u, w);
  }
  a.setFromTriplets(trips.begin(), trips.end());
  return a;
}

Prediction TargetModel::predict(const Graph& g, int reference_label) const {
  if (g.feature_dim() != feature_dim_)
    throw StructuralError("predict: feature dim " + std::to_string(g.feature_dim()) +
                          " != model's " + std::to_string(feature_dim_));
  if (reference_label < 0 || reference_label >= num_classes_)
    throw StructuralError("predict: reference label out of range");
  Prediction p;
  if (g.num_nodes() == 0) {
    p.class_probs = Vector::Constant(num_classes_, 1.0 / num_classes_);
    p.label = 0;
    p.loss = std::log(static_cast<double>(num_classes_));
    p.node_embeddings = Matrix::Zero(0, cfg_.hidden);
    p.graph_embedding = Vector::Zero(cfg_.hidden);
    return p;
  }
  const SparseMatrix a = mean_adjacency(g);
  Matrix h = g.features();
  for (int k = 0; k < cfg_.layers; ++k) {
    const Matrix& ws = params_.at(layer_name(k, "self")).value;
    const Matrix& wn = params_.at(layer_name(k, "nb")).value;
    Matrix pre = h * ws + a * (h * wn);
    pre.rowwise() += params_.at(layer_name(k, "b")).value.row(0);
    h = pre.cwiseMax(0.0);
  }
  p.graph_embedding = h.colwise().mean().transpose();
  const Vector logits = (p.graph_embedding.transpose() * params_.at("gnn.cls.w").value +
                         params_.at("gnn.cls.b").value)
                            .transpose();
  const Vector lp = log_softmax(logits);
  p.class_probs = lp.array().exp().matrix();
  p.label = argmax(lp);
  p.loss = -lp[reference_label];
  p.node_embeddings = std::move(h);
  return p;
}

Var TargetModel::batch_logits(Tape& tape, const std::vector<const Graph*>& graphs) {
  Eigen::Index total = 0;
  for (const Graph* g : graphs) total += g->num_nodes();
  Matrix x(total, feature_dim_);
  std::vector<Eigen::Triplet<double>> adj_trips, pool_trips;
  Eigen::Index offset = 0;
  for (std::size_t b = 0; b < graphs.size(); ++b) {
    const Graph& g = *graphs[b];
    if (g.feature_dim() != feature_dim_) throw StructuralError("batch: feature dim mismatch");
    x.middleRows(offset, g.num_nodes()) = g.features();
    const SparseMatrix a = mean_adjacency(g);
    for (int r = 0; r < a.outerSize(); ++r)
      for (SparseMatrix::InnerIterator it(a, r); it; ++it)
        adj_trips.emplace_back(offset + it.row(), offset + it.col(), it.value());
    for (int v = 0; v < g.num_nodes(); ++v)
      pool_trips.emplace_back(static_cast<Eigen::Index>(b), offset + v, 1.0 / g.num_nodes());
    offset += g.num_nodes();
  }
  SparseMatrix adj(total, total), pool(static_cast<Eigen::Index>(graphs.size()), total);
  adj.setFromTriplets(adj_trips.begin(), adj_trips.end());
  pool.setFromTriplets(pool_trips.begin(), pool_trips.end());

  Var h = tape.constant(std::move(x));
  for (int k = 0; k < cfg_.layers; ++k) {
    Var ws = tape.param(params_.at(layer_name(k, "self")));
    Var wn = tape.param(params_.at(layer_name(k, "nb")));
    Var b = tape.param(params_.at(layer_name(k, "b")));
    h = relu(add_row(matmul(h, ws) + spmm(adj, matmul(h, wn)), b));
  }
  Var pooled = spmm(pool, h);
  return add_row(matmul(pooled, tape.param(params_.at("gnn.cls.w"))),
                 tape.param(params_.at("gnn.cls.b")));
}

TargetModel train_target(const std::vector<const Graph*>& train, int num_classes,
                         const TargetConfig& cfg, std::vector<TrainLogRow>* log) {
  cfg.validate();
  if (train.empty()) throw StructuralError("train_target: empty train split");
  TargetModel model(train.front()->feature_dim(), num_classes, cfg);
  Adam adam({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(cfg.seed ^ 0x5eedULL);
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  ParamStore& params = model.mutable_params();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Graph*> batch;
      Matrix onehot = Matrix::Zero(static_cast<Eigen::Index>(end - start), num_classes);
      for (std::size_t k = start; k < end; ++k) {
        const Graph* g = train[order[k]];
        if (g->label() < 0 || g->label() >= num_classes)
          throw StructuralError("train_target: label out of range");
        batch.push_back(g);
        onehot(static_cast<Eigen::Index>(k - start), g->label()) = 1.0;
      }
      params.zero_grad();
      Tape tape;
      Var logits = model.batch_logits(tape, batch);
      Var lp = log_softmax_rows(logits);
      const double inv = 1.0 / static_cast<double>(batch.size());
      Var loss = masked_sum(lp, -inv * onehot);
      if (!std::isfinite(loss.scalar())) throw NumericError("train_target: non-finite loss");
      for (Eigen::Index r = 0; r < onehot.rows(); ++r) {
        Eigen::Index best;
        lp.value().row(r).maxCoeff(&best);
        correct += onehot(r, best) == 1.0;
      }
      loss_sum += loss.scalar() * static_cast<double>(batch.size());
      tape.backward(loss);
      adam.step(params);
    }
    if (log)
      log->push_back({epoch, loss_sum / static_cast<double>(train.size()),
                      static_cast<double>(correct) / static_cast<double>(train.size())});
  }
  model.freeze();
  return model;
}

double accuracy(const BlackBox& model, const std::vector<const Graph*>& graphs) {
  if (graphs.empty()) return 0.0;
  int correct = 0;
  for (const Graph* g : graphs) correct += model.predict(*g, 0).label == g->label();
  return static_cast<double>(correct) / static_cast<double>(graphs.size());
}

void write_train_log(const std::vector<TrainLogRow>& log, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << "epoch,loss,accuracy\n";
  char buf[96];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", r.epoch, r.loss, r.accuracy);
    out << buf;
  }
  if (!out) throw IoError(path, "write failed");
}

void TargetModel::save(const std::string& path, const json& meta) const {
  json m = meta.is_object() ? meta : json::object();
  m["target"] = {{"feature_dim", feature_dim_},
                 {"num_classes", num_classes_},
                 {"layers", cfg_.layers},
                 {"hidden", cfg_.hidden}};
  save_params(params_, path, m);
}

TargetModel TargetModel::load(const std::string& path, json* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const std::exception& e) {
    throw ParseError(e.what(), 0);
  }
  const json m = doc.value("meta", json::object());
  if (!m.contains("target")) throw StructuralError(path + ": not a target-model checkpoint");
  const auto& t = m.at("target");
  TargetConfig cfg;
  cfg.layers = t.at("layers").get<int>();
  cfg.hidden = t.at("hidden").get<int>();
  TargetModel model(t.at("feature_dim").get<int>(), t.at("num_classes").get<int>(), cfg);
  model.params_ = params_from_json(doc.at("params"), manifest_of(model.params_));
  model.freeze();
  if (meta) *meta = m;
  return model;
}

}  // namespace openx
