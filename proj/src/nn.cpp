#include "openx/nn.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>

namespace openx {

using json = nlohmann::json;

void mlp2_init(ParamStore& params, const std::string& prefix, int in, int hidden, int out,
               Rng& rng) {
  auto uniform = [&rng](int fan_in, int rows, int cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    return m;
  };
  params.add(prefix + ".w1", uniform(in, in, hidden));
  params.add(prefix + ".b1", Matrix::Zero(1, hidden));
  params.add(prefix + ".w2", uniform(hidden, hidden, out));
  params.add(prefix + ".b2", Matrix::Zero(1, out));
}

namespace {

Var activate(const Var& x, Activation act) {
  switch (act) {
    case Activation::Relu: return relu(x);
    case Activation::Tanh: {
      // tanh(x) = 2 sigmoid(2x) - 1
      return add_scalar(2.0 * sigmoid(2.0 * x), -1.0);
    }
    case Activation::Linear: break;
  }
  return x;
}

Matrix activate(const Matrix& x, Activation act) {
  switch (act) {
    case Activation::Relu: return x.cwiseMax(0.0);
    case Activation::Tanh: return x.array().tanh().matrix();
    case Activation::Linear: break;
  }
  return x;
}

}  // namespace

Var mlp2(Tape& tape, ParamStore& params, const std::string& prefix, const Var& x,
         Activation act) {
  Var w1 = tape.param(params.at(prefix + ".w1"));
  Var b1 = tape.param(params.at(prefix + ".b1"));
  Var w2 = tape.param(params.at(prefix + ".w2"));
  Var b2 = tape.param(params.at(prefix + ".b2"));
  Var h = activate(add_row(matmul(x, w1), b1), act);
  return add_row(matmul(h, w2), b2);
}

Matrix mlp2_forward(const ParamStore& params, const std::string& prefix, const Matrix& x,
                    Activation act) {
  const Matrix& w1 = params.at(prefix + ".w1").value;
  const Matrix& w2 = params.at(prefix + ".w2").value;
  if (x.cols() != w1.rows())
    throw StructuralError(prefix + ": input width " + std::to_string(x.cols()) + " != " +
                          std::to_string(w1.rows()));
  Matrix h = (x * w1).rowwise() + params.at(prefix + ".b1").value.row(0);
  h = activate(h, act);
  return (h * w2).rowwise() + params.at(prefix + ".b2").value.row(0);
}

Vector mlp2_forward(const ParamStore& params, const std::string& prefix, const Vector& x,
                    Activation act) {
  return mlp2_forward(params, prefix, Matrix(x.transpose()), act).row(0).transpose();
}

Var reparameterize(const Var& mu, const Var& logvar, const Matrix& noise) {
  if (noise.rows() != mu.rows() || noise.cols() != mu.cols())
    throw StructuralError("reparameterize: noise shape mismatch");
  Tape& t = *mu.tape();
  return mu + cwise_mul(exp(0.5 * logvar), t.constant(noise));
}

Var kl_std_normal_rows(const Var& mu, const Var& logvar) {
  // 0.5 * sum(exp(lv) + mu^2 - 1 - lv)
  return 0.5 * row_sum(add_scalar(exp(logvar) + square(mu) - logvar, -1.0));
}

Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

void Adam::step(ParamStore& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    if (p.grad.size() != p.value.size()) continue;
    auto [it, inserted] = moments_.try_emplace(name);
    auto& [m, v] = it->second;
    if (inserted) {
      m = Matrix::Zero(p.value.rows(), p.value.cols());
      v = Matrix::Zero(p.value.rows(), p.value.cols());
    }
    const Matrix g = p.grad + cfg_.weight_decay * p.value;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    p.value.array() -=
        cfg_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
  }
}

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / scale;
}

GradCheckResult grad_check(const LossFn& loss_fn, ParamStore& params, double eps,
                           int max_entries, std::uint64_t seed) {
  params.zero_grad();
  Tape base;
  Var loss = loss_fn(base, params);
  if (!std::isfinite(loss.scalar())) throw NumericError("grad_check: non-finite loss");
  base.backward(loss);
  const auto base_kinks = base.kinks();

  std::vector<std::pair<Param*, Eigen::Index>> entries;
  std::map<Param*, Matrix> analytic;
  for (auto& [name, p] : params) {
    analytic[&p] = p.grad.size() == p.value.size() ? p.grad : Matrix::Zero(p.value.rows(), p.value.cols());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) entries.emplace_back(&p, i);
  }
  Rng rng(seed);
  std::shuffle(entries.begin(), entries.end(), rng);

  auto eval = [&](std::vector<std::uint8_t>& kinks) {
    Tape t;
    const double v = loss_fn(t, params).scalar();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    kinks = t.kinks();
    return v;
  };

  GradCheckResult res;
  std::vector<std::uint8_t> kp, km;
  for (const auto& [p, idx] : entries) {
    if (res.checked >= max_entries) break;
    double& slot = p->value.data()[idx];
    const double orig = slot;
    slot = orig + eps;
    const double lp = eval(kp);
    slot = orig - eps;
    const double lm = eval(km);
    slot = orig;
    if (kp != km || kp != base_kinks) {
      ++res.skipped_kinks;
      continue;
    }
    const double numeric = (lp - lm) / (2.0 * eps);
    res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[p].data()[idx], numeric));
    ++res.checked;
  }
  return res;
}

Manifest manifest_of(const ParamStore& params) {
  Manifest m;
  for (const auto& [name, p] : params) m[name] = {p.value.rows(), p.value.cols()};
  return m;
}

void params_to_json(const ParamStore& params, json& out) {
  json ps = json::object();
  for (const auto& [name, p] : params) {
    json data = json::array();
    for (Eigen::Index i = 0; i < p.value.rows(); ++i)
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) data.push_back(p.value(i, j));
    ps[name] = {{"rows", p.value.rows()}, {"cols", p.value.cols()}, {"data", std::move(data)}};
  }
  out = std::move(ps);
}

ParamStore params_from_json(const json& in, const Manifest& expected) {
  ParamStore params;
  for (const auto& [name, shape] : expected) {
    if (!in.contains(name)) throw StructuralError("checkpoint lacks parameter '" + name + "'");
    const auto& pj = in.at(name);
    const auto rows = pj.at("rows").get<Eigen::Index>();
    const auto cols = pj.at("cols").get<Eigen::Index>();
    if (rows != shape.first || cols != shape.second)
      throw StructuralError("parameter '" + name + "' has shape " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", expected " + std::to_string(shape.first) +
                            "x" + std::to_string(shape.second));
    const auto& data = pj.at("data");
    if (static_cast<Eigen::Index>(data.size()) != rows * cols)
      throw StructuralError("parameter '" + name + "' data length mismatch");
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = data[static_cast<std::size_t>(i * cols + j)].get<double>();
    params.add(name, std::move(m));
  }
  for (const auto& [name, _] : in.items())
    if (!expected.count(name)) throw StructuralError("unexpected parameter '" + name + "'");
  return params;
}

void save_params(const ParamStore& params, const std::string& path, const json& meta) {
  json doc;
  doc["format"] = "openx-params";
  doc["v"] = 1;
  doc["meta"] = meta;
  params_to_json(params, doc["params"]);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << doc.dump(1) << '\n';
  if (!out) throw IoError(path, "write failed");
}

ParamStore load_params(const std::string& path, const Manifest& expected, json* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const std::exception& e) {
    throw ParseError(e.what(), 0);
  }
  if (doc.value("format", "") != "openx-params" || doc.value("v", 0) != 1)
    throw StructuralError(path + ": not a version-1 parameter checkpoint");
  if (meta) *meta = doc.value("meta", json::object());
  return params_from_json(doc.at("params"), expected);
}

}  // namespace openx
