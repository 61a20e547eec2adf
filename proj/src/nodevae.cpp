#include "openx/nodevae.hpp"

namespace openx {

void env_tables_init(ParamStore& params, const VaeDims& d, Rng& rng) {
  params.add("env.str", 0.1 * standard_normal(d.k_struct, d.e_dim, rng));
  params.add("env.feat", 0.1 * standard_normal(d.k_feat, d.e_dim, rng));
}

void nodevae_init(ParamStore& params, const VaeDims& d, Rng& rng) {
  mlp2_init(params, "nodevae.enc", d.h_dim + d.e_dim, d.hidden, 2 * d.latent, rng);
  mlp2_init(params, "nodevae.dec", d.latent + d.e_dim, d.hidden, d.h_dim, rng);
}

namespace {

void check_rows(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b) throw StructuralError(std::string(what) + ": row count mismatch");
}

}  // namespace

NodeCode encode_node(Tape& tape, ParamStore& params, const Var& h, const Var& e) {
  check_rows(h.rows(), e.rows(), "encode_node");
  Var out = mlp2(tape, params, "nodevae.enc", concat_cols({h, e}));
  const Eigen::Index half = out.cols() / 2;
  return {slice_cols(out, 0, half),
          clamp(slice_cols(out, half, half), -kLogvarBound, kLogvarBound)};
}

Var decode_node(Tape& tape, ParamStore& params, const Var& z, const Var& e) {
  check_rows(z.rows(), e.rows(), "decode_node");
  return mlp2(tape, params, "nodevae.dec", concat_cols({z, e}));
}

std::pair<Matrix, Matrix> encode_node(const ParamStore& params, const Matrix& h,
                                      const Matrix& e) {
  check_rows(h.rows(), e.rows(), "encode_node");
  Matrix x(h.rows(), h.cols() + e.cols());
  x << h, e;
  const Matrix out = mlp2_forward(params, "nodevae.enc", x);
  const Eigen::Index half = out.cols() / 2;
  return {out.leftCols(half),
          out.rightCols(half).cwiseMax(-kLogvarBound).cwiseMin(kLogvarBound)};
}

Matrix decode_node(const ParamStore& params, const Matrix& z, const Matrix& e) {
  check_rows(z.rows(), e.rows(), "decode_node");
  Matrix x(z.rows(), z.cols() + e.cols());
  x << z, e;
  return mlp2_forward(params, "nodevae.dec", x);
}

Var nodevae_loss(const Var& h_hat, const Var& h, const Var& mu, const Var& logvar, double w_mse,
                 double w_kl) {
  if (h_hat.rows() != h.rows() || h_hat.cols() != h.cols())
    throw StructuralError("nodevae_loss: reconstruction shape mismatch");
  if (h.rows() == 0) return h.tape()->constant(Matrix::Zero(1, 1));
  Var loss = w_mse * mean(square(h_hat - h)) + w_kl * mean(kl_std_normal_rows(mu, logvar));
  if (!std::isfinite(loss.scalar())) throw NumericError("nodevae_loss: non-finite value");
  return loss;
}

}  // namespace openx
