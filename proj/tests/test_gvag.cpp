#include "openx/datagen.hpp"
#include "openx/error.hpp"
#include "openx/gvag.hpp"
#include "fake_model.hpp"

#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

using namespace openx;

namespace {

struct Fixture {
  Dataset ds;
  std::vector<const Graph*> train;
  EnvModel env;
  FakeModel model{6};

  explicit Fixture(int n = 24) {
    GenConfig gc;
    gc.num_graphs = n;
    gc.seed = 4;
    gc.base_families = {BaseFamily::Wheel, BaseFamily::Tree, BaseFamily::BarabasiAlbert};
    ds = generate(gc);
    for (const auto& g : ds.graphs) train.push_back(&g);
    NpafConfig nc;
    nc.k = 3;
    env = fit_npaf(train, nc);
  }
};

ExplainerConfig small_config() {
  ExplainerConfig c;
  c.e_dim = 3;
  c.latent = 3;
  c.hidden = 5;
  c.samples = 2;
  c.epochs = 1;
  c.batch_size = 8;
  return c;
}

std::vector<InstanceData> sampled_batch(const Explainer& ex, const Fixture& f, int count) {
  std::vector<std::vector<const Graph*>> pools(f.env.feature_centers.rows());
  for (std::size_t i = 0; i < f.train.size(); ++i) pools[f.env.feature_labels[i]].push_back(f.train[i]);
  Rng rng(12);
  std::vector<InstanceData> batch;
  for (int i = 0; i < count; ++i) {
    InstanceData inst = ex.prepare(f.model, *f.train[i]);
    inst.has_causal = true;
    inst.y_v = f.env.node_causal[i];
    inst.y_e = f.env.edge_causal[i];
    sample_instance(ex, f.model, inst, pools, rng);
    batch.push_back(std::move(inst));
  }
  return batch;
}

Var col(Tape& t, std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return t.constant(m);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("nodevae") {
  TEST_CASE("zero parameters give zero code and zero reconstruction") {
    VaeDims d{4, 2, 3, 5, 2, 2};
    ParamStore p;
    Rng rng(1);
    nodevae_init(p, d, rng);
    for (auto& [name, param] : p) param.value.setZero();
    Matrix h = Matrix::Random(3, 4), e = Matrix::Random(3, 2);
    auto [mu, logvar] = encode_node(p, h, e);
    CHECK(mu.isZero());
    CHECK(logvar.isZero());
    CHECK(decode_node(p, mu, e).isZero());
  }

  TEST_CASE("tape and plain forms agree") {
    VaeDims d{4, 2, 3, 5, 2, 2};
    ParamStore p;
    Rng rng(2);
    nodevae_init(p, d, rng);
    Matrix h = standard_normal(5, 4, rng), e = standard_normal(5, 2, rng);
    Tape t;
    NodeCode c = encode_node(t, p, t.constant(h), t.constant(e));
    auto [mu, logvar] = encode_node(p, h, e);
    CHECK((c.mu.value() - mu).norm() < 1e-12);
    CHECK((c.logvar.value() - logvar).norm() < 1e-12);
    CHECK((decode_node(t, p, c.mu, t.constant(e)).value() - decode_node(p, mu, e)).norm() < 1e-12);
    CHECK(logvar.maxCoeff() <= kLogvarBound);
    CHECK_THROWS_AS(encode_node(p, h, Matrix::Zero(4, 2)), StructuralError);
  }

  TEST_CASE("loss values") {
    Tape t;
    Matrix h(2, 2);
    h << 1, 2, 3, 4;
    Var z0 = t.constant(Matrix::Zero(2, 1));
    CHECK(nodevae_loss(t.constant(h), t.constant(h), z0, z0, 1.0, 0.1).scalar() == 0.0);
    CHECK(nodevae_loss(t.constant(h), t.constant(Matrix::Zero(2, 2)), z0, z0, 1.0, 0.0).scalar() ==
          doctest::Approx(7.5).epsilon(1e-12));
    Var mu = col(t, {1.0, 0.0});
    CHECK(nodevae_loss(t.constant(h), t.constant(h), mu, z0, 1.0, 1.0).scalar() ==
          doctest::Approx(0.25).epsilon(1e-12));
    Var lv = col(t, {std::log(2.0), 0.0});
    const double kl = 0.5 * (2.0 - 1.0 - std::log(2.0)) / 2.0;
    CHECK(nodevae_loss(t.constant(h), t.constant(h), z0, lv, 1.0, 0.1).scalar() ==
          doctest::Approx(0.1 * kl).epsilon(1e-12));
    Var empty = t.constant(Matrix::Zero(0, 2));
    CHECK(nodevae_loss(empty, empty, t.constant(Matrix::Zero(0, 1)), t.constant(Matrix::Zero(0, 1)),
                       1.0, 1.0).scalar() == 0.0);
    CHECK_THROWS_AS(nodevae_loss(t.constant(h), empty, z0, z0, 1.0, 1.0), StructuralError);
    Matrix bad = h;
    bad(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(nodevae_loss(t.constant(bad), t.constant(h), z0, z0, 1.0, 1.0), NumericError);
  }

  TEST_CASE("gradients") {
    VaeDims d{3, 2, 2, 4, 2, 2};
    ParamStore p;
    Rng rng(5);
    nodevae_init(p, d, rng);
    const Matrix h = standard_normal(4, 3, rng), e = standard_normal(4, 2, rng),
                 noise = standard_normal(4, 2, rng);
    auto res = grad_check(
        [&](Tape& t, ParamStore& ps) {
          Var hv = t.constant(h), ev = t.constant(e);
          NodeCode c = encode_node(t, ps, hv, ev);
          Var hh = decode_node(t, ps, reparameterize(c.mu, c.logvar, noise), ev);
          return nodevae_loss(hh, hv, c.mu, c.logvar, 1.0, 0.1);
        },
        p);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_error <= 1e-4);
  }
}

TEST_SUITE("gvag") {
  TEST_CASE("log probability on the tape matches the plain form") {
    Graph g(3, {{0, 1}, {1, 2}}, Matrix::Zero(3, 1), {0, 0, 0}, 0);
    ProbMap pm{(Vector(3) << 0.5, 0.4, 0.9).finished(), (Vector(2) << 0.8, 0.3).finished()};
    Explanation e = Explanation::empty(g);
    e.node_mask = {true, true, false};
    e.edge_mask = {true, false};
    Tape t;
    Var np = t.constant(pm.node_prob), ep = t.constant(pm.edge_prob);
    CHECK(log_prob(np, ep, e).scalar() == doctest::Approx(graph_log_prob(pm, e)).epsilon(1e-12));
    CHECK(mean_log_prob(np, ep, e).scalar() ==
          doctest::Approx(std::log(0.16) / 3.0).epsilon(1e-12));
    CHECK(mean_log_prob(np, ep, Explanation::empty(g)).scalar() == 0.0);
  }

  TEST_CASE("mutual information term") {
    Tape t;
    std::vector<Var> lp{col(t, {std::log(1 / std::exp(1.0))}), col(t, {-1.0}), col(t, {-1.0})};
    CHECK(mi_loss(lp, {true, true, true}).scalar() == doctest::Approx(1.0));
    CHECK(mi_loss(lp, {false, false, false}).scalar() == doctest::Approx(-1.0));
    CHECK(mi_loss(lp, {true, true, false}).scalar() == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(mi_loss(lp, {true}), StructuralError);
  }

  TEST_CASE("reward term") {
    Tape t;
    Var half = col(t, {0.5, 0.5});
    Graph g(2, {{0, 1}}, Matrix::Zero(2, 1), {0, 0}, 0);
    Var m = mean_log_prob(half, col(t, {0.5}), Explanation::full(g));
    CHECK(rr_loss({1.0}, {m}).scalar() == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(rr_loss({1.0, -3.0}, {m, col(t, {0.0})}).scalar() == doctest::Approx(-1.25));
  }

  TEST_CASE("causal cross entropy") {
    Tape t;
    Var z = t.constant(Matrix::Zero(3, 1));
    CHECK(causal_bce(z, {true, false, true}, t.constant(Matrix::Zero(0, 1)), {}).scalar() ==
          doctest::Approx(std::log(2.0)));
    Var logits = col(t, {0.0, 2.0});
    Matrix y(2, 1), w(2, 1);
    y << 1, 0;
    w << 0.5, 0.5;
    CHECK(weighted_bce(logits, y, w).scalar() ==
          doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(1.0 + std::exp(2.0))).epsilon(1e-12));
    CHECK(causal_bce(col(t, {0.0, 0.0}), {true, true}, col(t, {0.0}), {false}).scalar() ==
          doctest::Approx(2 * std::log(2.0)));
  }

  TEST_CASE("hinge regulariser") {
    CHECK(hinge_reg({0.1, 0.2}, {0.5, 0.5}) == 0.0);
    CHECK(hinge_reg({2.0}, {1.0}) == 2.0);
    CHECK(hinge_reg({2.0, 0.1, 4.0}, {1.0, 1.0, 1.0}) == 3.0);
    CHECK(hinge_reg({}, {}) == 0.0);
    CHECK_THROWS_AS(hinge_reg({1.0}, {}), StructuralError);
  }

  TEST_CASE("subgraph size regulariser") {
    CHECK(prior_nodes(20, 0.3, 5, 7) == 6);
    CHECK(prior_nodes(4, 0.3, 5, 7) == 5);
    CHECK(prior_nodes(40, 0.3, 5, 7) == 7);
    CHECK(subg_node_reg({1.0}, {5}, {5}) == 0.0);
    CHECK(subg_node_reg({1.0}, {6}, {3}) == doctest::Approx(1.0).epsilon(1e-7));
    CHECK(subg_node_reg({2.0}, {2}, {4}) == doctest::Approx(-0.25).epsilon(1e-7));
    CHECK(subg_node_reg({0.0}, {4}, {5}) == doctest::Approx(0.25 / 1e-8));
    CHECK(subg_node_reg({-1.0}, {2}, {5}) == doctest::Approx(0.5 / (-1.0 + 1e-8)));
    CHECK(std::isfinite(subg_node_reg({-0.5}, {0}, {5})));
    CHECK(subg_node_reg({}, {}, {}) == 0.0);
  }

  TEST_CASE("contrastive term") {
    Tape t;
    Matrix same = Matrix::Ones(3, 2);
    CHECK(contrastive_loss(t.constant(same), {0, 0, 1}, 0.5).scalar() ==
          doctest::Approx(std::log(3.0)).epsilon(1e-9));
    CHECK(std::abs(contrastive_loss(t.constant(same), {1, 1, 1}, 0.5).scalar()) < 1e-8);
    CHECK(contrastive_loss(t.constant(same), {0, 1, 2}, 0.5).scalar() == 0.0);
    Matrix orth(3, 2);
    orth << 1, 0, 1, 0, 0, 1;
    const double v = contrastive_loss(t.constant(orth), {0, 0, 1}, 0.5).scalar();
    CHECK(v == doctest::Approx(std::log(std::exp(2.0) + 2.0) - 2.0).epsilon(1e-9));
    CHECK(v < std::log(3.0));

    Rng rng(8);
    Matrix z = standard_normal(5, 3, rng);
    std::vector<int> labels{0, 1, 0, 2, 1};
    double a = 0.0, b = 0.0;
    for (int i = 0; i < 5; ++i)
      for (int j = i + 1; j < 5; ++j) {
        const double c = z.row(i).dot(z.row(j)) / (z.row(i).norm() * z.row(j).norm());
        (labels[i] == labels[j] ? a : b) += std::exp(c / 0.5);
      }
    CHECK(contrastive_loss(t.constant(z), labels, 0.5).scalar() ==
          doctest::Approx(std::log(a + b + 1e-8) - std::log(a)).epsilon(1e-12));
    CHECK_THROWS_AS(contrastive_loss(t.constant(z), {0, 1}, 0.5), StructuralError);
  }

  TEST_CASE("loss-aware regulariser") {
    Tape t;
    Var p = col(t, {0.2});
    CHECK(lar(0.5, 0.1, p).scalar() == doctest::Approx(0.08));
    CHECK(lar(0.1, 0.5, p).scalar() < 0.0);
    CHECK(lar(0.3, std::numeric_limits<double>::quiet_NaN(), p).scalar() == 0.0);
  }

  TEST_CASE("final objective") {
    LossBreakdown parts;
    for (double* v : {&parts.nodevae, &parts.mi, &parts.rr, &parts.con, &parts.lar, &parts.causal,
                      &parts.hinge, &parts.subg_node})
      *v = 1.0;
    LossWeights w;
    CHECK(final_loss(parts, w) == doctest::Approx(9.5));
    LossBreakdown doubled = parts;
    for (double* v : {&doubled.nodevae, &doubled.mi, &doubled.rr, &doubled.con, &doubled.lar,
                      &doubled.causal, &doubled.hinge, &doubled.subg_node})
      *v = 2.0;
    CHECK(final_loss(doubled, w) == doctest::Approx(19.0));
    LossWeights no_con = w;
    no_con.con = 0.0;
    CHECK(final_loss(parts, w) - final_loss(parts, no_con) == doctest::Approx(0.5));
    LossWeights no_mi = w;
    no_mi.mi = 0.0;
    CHECK(final_loss(parts, w) - final_loss(parts, no_mi) == doctest::Approx(2.0));
    parts.rr = std::nan("");
    CHECK_THROWS_WITH_AS(final_loss(parts, w), doctest::Contains("L_RR"), NumericError);
    w.con = -1.0;
    CHECK_THROWS_AS(w.validate(), ConfigError);
  }

  TEST_CASE("config validation and round trip") {
    ExplainerConfig c = small_config();
    c.recon.start_nid = 2;
    nlohmann::json j = c;
    ExplainerConfig back = j.get<ExplainerConfig>();
    CHECK(nlohmann::json(back) == j);
    c.samples = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.rho_prior = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("forward pass") {
    Fixture f;
    Explainer ex(small_config(), f.env, f.model.embedding_dim());
    Explainer again(small_config(), f.env, f.model.embedding_dim());
    const Graph& g = *f.train[0];
    ProbMap a = ex.prob_map(f.model, g), b = again.prob_map(f.model, g);
    CHECK(a.node_prob == b.node_prob);
    CHECK(a.edge_prob == b.edge_prob);
    CHECK(a.node_prob.size() == g.num_nodes());
    CHECK(a.edge_prob.minCoeff() >= kProbEps);
    CHECK(a.edge_prob.maxCoeff() <= 1.0 - kProbEps);

    for (auto& [name, p] : ex.params()) p.value.setZero();
    ProbMap z = ex.prob_map(f.model, g);
    CHECK((z.node_prob.array() == 0.5).all());
    CHECK((z.edge_prob.array() == 0.5).all());

    // matrix oracle for the node head of the first node
    Explainer o(small_config(), f.env, f.model.embedding_dim());
    InstanceData inst = o.prepare(f.model, g);
    const ParamStore& p = o.params();
    auto relu = [](Matrix m) { return Matrix(m.cwiseMax(0.0)); };
    auto mlp = [&](const std::string& pre, const Matrix& x) {
      Matrix h = relu((x * p.at(pre + ".w1").value).rowwise() +
                      p.at(pre + ".b1").value.row(0));
      return Matrix((h * p.at(pre + ".w2").value).rowwise() + p.at(pre + ".b2").value.row(0));
    };
    const Matrix str = p.at("env.str").value, feat = p.at("env.feat").value;
    const int L = 3;
    Matrix eg = 0.5 * (str.row(inst.env_s) + feat.row(inst.env_f));
    Matrix gin(1, 4 + 3);
    gin << inst.h_graph.transpose(), eg;
    Matrix mug = mlp("gvag.enc", gin).leftCols(L);
    Matrix nin(1, 4 + 3);
    nin << inst.h.row(0), feat.row(inst.env_f);
    Matrix zv = mlp("nodevae.enc", nin).leftCols(L);
    Matrix head(1, 2 * L + 3);
    head << mug, zv, eg;
    const double logit = mlp("gvag.node", head)(0, 0);
    const double expect = kProbEps + (1 - 2 * kProbEps) / (1 + std::exp(-logit));
    CHECK(o.prob_map(f.model, g).node_prob[0] == doctest::Approx(expect).epsilon(1e-12));
  }

  TEST_CASE("explanations are edge-first reconstructions") {
    Fixture f;
    Explainer ex(small_config(), f.env, f.model.embedding_dim());
    for (int i = 0; i < 5; ++i) {
      const Graph& g = *f.train[i];
      Explanation e = ex.explain(f.model, g);
      validate(g, e);
      CHECK(e.edge_count() == edge_budget(g.num_edges(), 0.1, 1));
      Explanation direct = reconstruct_edge_first(ex.prob_map(f.model, g), g, ex.config().recon);
      CHECK(direct.edge_mask == e.edge_mask);
    }
  }

  TEST_CASE("batch loss parts are consistent") {
    Fixture f;
    Explainer ex(small_config(), f.env, f.model.embedding_dim());
    auto batch = sampled_batch(ex, f, 3);
    for (const auto& inst : batch) {
      CHECK(inst.samples.size() == 2);
      for (const auto& s : inst.samples) validate(*inst.g, s.e);
    }
    Tape t;
    BatchTerms bt = ex.batch_loss(t, ex.params(), batch, 0.1);
    LossBreakdown parts{bt.nodevae.scalar(), bt.mi.scalar(), bt.rr.scalar(), bt.con.scalar(),
                        bt.lar.scalar(), bt.causal.scalar(), bt.hinge.scalar(),
                        bt.subg_node.scalar(), 0.0, {}};
    CHECK(bt.total.scalar() == doctest::Approx(final_loss(parts, ex.config().weights)).epsilon(1e-12));
    std::vector<double> ls, lc;
    for (const auto& inst : batch)
      for (const auto& s : inst.samples) {
        ls.push_back(s.loss_s);
        lc.push_back(s.loss_c);
      }
    CHECK(bt.hinge.scalar() == hinge_reg(ls, lc));
    CHECK_THROWS_AS(ex.batch_loss(t, ex.params(), {}, 0.0), StructuralError);
  }

  TEST_CASE("gradients of every term") {
    Fixture f;
    Explainer ex(small_config(), f.env, f.model.embedding_dim());
    auto batch = sampled_batch(ex, f, 3);
    using Pick = Var (*)(const BatchTerms&);
    const std::pair<const char*, Pick> terms[] = {
        {"nodevae", [](const BatchTerms& t) { return t.nodevae; }},
        {"mi", [](const BatchTerms& t) { return t.mi; }},
        {"rr", [](const BatchTerms& t) { return t.rr; }},
        {"con", [](const BatchTerms& t) { return t.con; }},
        {"lar", [](const BatchTerms& t) { return t.lar; }},
        {"causal", [](const BatchTerms& t) { return t.causal; }},
        {"hinge", [](const BatchTerms& t) { return t.hinge; }},
        {"subg_node", [](const BatchTerms& t) { return t.subg_node; }},
        {"total", [](const BatchTerms& t) { return t.total; }}};
    for (const auto& [name, pick] : terms) {
      CAPTURE(name);
      ParamStore p = ex.params();
      auto res = grad_check(
          [&](Tape& t, ParamStore& ps) { return pick(ex.batch_loss(t, ps, batch, 0.05)); }, p, 1e-5,
          150);
      CHECK(res.checked > 0);
      CHECK(res.max_rel_error <= 1e-4);
    }
  }

  TEST_CASE("training, checkpoints and determinism") {
    Fixture f;
    ExplainerConfig c = small_config();
    c.epochs = 2;
    TrainResult a = train_explainer(f.train, f.model, f.env, c);
    TrainResult b = train_explainer(f.train, f.model, f.env, c);
    CHECK_FALSE(a.diverged);
    REQUIRE(a.log.size() == 2);
    for (const auto& row : a.log) CHECK(std::isfinite(row.final));
    CHECK(a.log[0].lar == 0.0);
    for (const auto& [name, p] : a.explainer.params())
      CHECK(p.value == b.explainer.params().at(name).value);

    const auto dir = std::filesystem::temp_directory_path() / "openx_gvag_ckpt";
    std::filesystem::remove_all(dir);
    a.explainer.save(dir.string(), {{"run", "t"}});
    nlohmann::json meta;
    Explainer loaded = Explainer::load(dir.string(), &meta);
    CHECK(meta["run"] == "t");
    for (int i = 0; i < 4; ++i)
      CHECK(loaded.explain(f.model, *f.train[i]).edge_mask ==
            a.explainer.explain(f.model, *f.train[i]).edge_mask);
    CHECK(loaded.prob_map(f.model, *f.train[0]).edge_prob ==
          a.explainer.prob_map(f.model, *f.train[0]).edge_prob);

    write_loss_log(a.log, (dir / "log.csv").string());
    const std::string log = slurp(dir / "log.csv");
    CHECK(log.rfind("epoch,L_NodeVAE,L_MI,L_RR,L_CON,LAR,R_causal,R_hinge,R_subg_node,L_final\n", 0) == 0);
    CHECK(std::count(log.begin(), log.end(), '\n') == 3);
    std::filesystem::remove_all(dir);

    std::vector<const Graph*> fewer(f.train.begin(), f.train.end() - 1);
    CHECK_THROWS_AS(train_explainer(fewer, f.model, f.env, c), StructuralError);
  }

  TEST_CASE("explainer sources never see the target model") {
    const std::filesystem::path root = OPENX_SOURCE_DIR;
    const std::regex inc("#include\\s+\"openx/target\\.hpp\"");
    for (const char* rel : {"src/gvag.cpp", "src/nodevae.cpp", "src/recon.cpp",
                            "include/openx/gvag.hpp", "include/openx/nodevae.hpp",
                            "include/openx/recon.hpp", "include/openx/npaf.hpp", "src/npaf.cpp"}) {
      CAPTURE(rel);
      const std::string text = slurp(root / rel);
      REQUIRE_FALSE(text.empty());
      CHECK_FALSE(std::regex_search(text, inc));
    }
  }
}
