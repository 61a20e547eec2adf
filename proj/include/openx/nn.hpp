#pragma once

#include "openx/error.hpp"
#include "openx/tape.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>

namespace openx {

using Rng = std::mt19937_64;

enum class Activation { Relu, Linear, Tanh };

// Two-layer perceptron stored under `prefix.w1`, `.b1`, `.w2`, `.b2`, acting on
// row vectors: y = act(x W1 + b1) W2 + b2.
void mlp2_init(ParamStore& params, const std::string& prefix, int in, int hidden, int out,
               Rng& rng);
Var mlp2(Tape& tape, ParamStore& params, const std::string& prefix, const Var& x,
         Activation act = Activation::Relu);
// Tape-free evaluation over a batch of rows.
Matrix mlp2_forward(const ParamStore& params, const std::string& prefix, const Matrix& x,
                    Activation act = Activation::Relu);
Vector mlp2_forward(const ParamStore& params, const std::string& prefix, const Vector& x,
                    Activation act = Activation::Relu);

// z = mu + exp(logvar / 2) .* noise
template <typename DerivedMu, typename DerivedLv, typename DerivedN>
auto reparameterize(const Eigen::MatrixBase<DerivedMu>& mu,
                    const Eigen::MatrixBase<DerivedLv>& logvar,
                    const Eigen::MatrixBase<DerivedN>& noise) {
  using Plain = typename DerivedMu::PlainObject;
  if (mu.rows() != logvar.rows() || mu.cols() != logvar.cols() || mu.rows() != noise.rows() ||
      mu.cols() != noise.cols())
    throw StructuralError("reparameterize: length mismatch");
  return Plain(mu + ((0.5 * logvar.array()).exp() * noise.array()).matrix());
}

// KL(N(mu, exp(logvar)) || N(0, I)) summed over entries.
template <typename DerivedMu, typename DerivedLv>
typename DerivedMu::Scalar kl_std_normal(const Eigen::MatrixBase<DerivedMu>& mu,
                                         const Eigen::MatrixBase<DerivedLv>& logvar) {
  if (mu.rows() != logvar.rows() || mu.cols() != logvar.cols())
    throw StructuralError("kl_std_normal: length mismatch");
  return 0.5 * (logvar.array().exp() + mu.array().square() - 1.0 - logvar.array()).sum();
}

Var reparameterize(const Var& mu, const Var& logvar, const Matrix& noise);
// Row-wise KL, returned as an (rows x 1) column.
Var kl_std_normal_rows(const Var& mu, const Var& logvar);

Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng);

struct AdamConfig {
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  // One step over every parameter; weight decay is added to the gradient.
  void step(ParamStore& params);

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, std::pair<Matrix, Matrix>> moments_;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped_kinks = 0;
};

// Builds the loss on a fresh tape. Must be deterministic for fixed parameters.
using LossFn = std::function<Var(Tape&, ParamStore&)>;

// Central differences against tape gradients over up to `max_entries` entries
// sampled uniformly (all entries when fewer). Entries whose perturbation moves
// any rectifier/clamp input across its kink are resampled.
GradCheckResult grad_check(const LossFn& loss_fn, ParamStore& params, double eps = 1e-4,
                           int max_entries = 200, std::uint64_t seed = 7);

double relative_error(double analytic, double numeric);

// Checkpoint: {"format":"openx-params","v":1,"params":{name:{rows,cols,data}}}
using Manifest = std::map<std::string, std::pair<Eigen::Index, Eigen::Index>>;
Manifest manifest_of(const ParamStore& params);
void params_to_json(const ParamStore& params, nlohmann::json& out);
ParamStore params_from_json(const nlohmann::json& in, const Manifest& expected);
void save_params(const ParamStore& params, const std::string& path, const nlohmann::json& meta);
ParamStore load_params(const std::string& path, const Manifest& expected,
                       nlohmann::json* meta = nullptr);

}  // namespace openx
