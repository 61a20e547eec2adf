#pragma once

#include "openx/nn.hpp"

#include <string>
#include <utility>
#include <vector>

namespace openx {

inline constexpr double kLogvarBound = 10.0;

struct VaeDims {
  int h_dim = 32;
  int e_dim = 16;
  int latent = 16;
  int hidden = 32;
  int k_struct = 5;
  int k_feat = 5;
};

// Environment embedding tables `env.str` (k_struct x e_dim) and `env.feat`
// (k_feat x e_dim).
void env_tables_init(ParamStore& params, const VaeDims& d, Rng& rng);

// Encoder `nodevae.enc`: [h || e] -> [mu || logvar]; decoder `nodevae.dec`:
// [z || e] -> h_hat.
void nodevae_init(ParamStore& params, const VaeDims& d, Rng& rng);

struct NodeCode {
  Var mu;
  Var logvar;
};

// Rows of `h` are nodes, rows of `e` their environment embeddings.
NodeCode encode_node(Tape& tape, ParamStore& params, const Var& h, const Var& e);
Var decode_node(Tape& tape, ParamStore& params, const Var& z, const Var& e);

// Tape-free forms for inference.
std::pair<Matrix, Matrix> encode_node(const ParamStore& params, const Matrix& h, const Matrix& e);
Matrix decode_node(const ParamStore& params, const Matrix& z, const Matrix& e);

// w_mse * mean_{i,j} (h_hat - h)^2 + w_kl * mean_i KL_i
Var nodevae_loss(const Var& h_hat, const Var& h, const Var& mu, const Var& logvar, double w_mse,
                 double w_kl);

}  // namespace openx
