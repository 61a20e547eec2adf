#pragma once

#include "openx/blackbox.hpp"
#include "openx/nn.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace openx {

struct TargetConfig {
  int layers = 3;
  int hidden = 32;
  int epochs = 40;
  int batch_size = 64;
  double lr = 0.01;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainLogRow {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

// Mean-aggregation message passing over both edge directions:
//   H' = relu(H W_self + mean_neighbors(H) W_nb + b)
// followed by mean pooling and a linear classifier.
class TargetModel : public BlackBox {
 public:
  TargetModel(int feature_dim, int num_classes, const TargetConfig& cfg);

  Prediction predict(const Graph& g, int reference_label) const override;
  int num_classes() const override { return num_classes_; }
  int embedding_dim() const override { return cfg_.hidden; }
  int feature_dim() const { return feature_dim_; }
  const TargetConfig& config() const { return cfg_; }

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  // Throws StateError once frozen.
  ParamStore& mutable_params();
  const ParamStore& params() const { return params_; }

  // Logits for a batch of graphs recorded on `tape` (training path).
  Var batch_logits(Tape& tape, const std::vector<const Graph*>& graphs);

  void save(const std::string& path, const nlohmann::json& meta) const;
  static TargetModel load(const std::string& path, nlohmann::json* meta = nullptr);

 private:
  int feature_dim_;
  int num_classes_;
  TargetConfig cfg_;
  ParamStore params_;
  bool frozen_ = false;
};

// Row-normalized adjacency (both directions); isolated nodes get an empty row.
SparseMatrix mean_adjacency(const Graph& g);

// Trains on the graphs given (normally the train split) and returns a frozen model.
TargetModel train_target(const std::vector<const Graph*>& train, int num_classes,
                         const TargetConfig& cfg, std::vector<TrainLogRow>* log = nullptr);

double accuracy(const BlackBox& model, const std::vector<const Graph*>& graphs);

void write_train_log(const std::vector<TrainLogRow>& log, const std::string& path);

}  // namespace openx
