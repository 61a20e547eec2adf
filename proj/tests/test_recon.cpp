#include "openx/error.hpp"
#include "openx/recon.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

using namespace openx;

namespace {

Graph plain(int n, std::vector<Edge> edges) {
  return Graph(n, std::move(edges), Matrix::Zero(n, 1), std::vector<int>(n, 0), 0);
}

Graph path4() { return plain(5, {{0, 1}, {1, 2}, {2, 3}, {3, 4}}); }

ProbMap constant(const Graph& g, double p) {
  return {Vector::Constant(g.num_nodes(), p), Vector::Constant(g.num_edges(), p)};
}

bool closed(const Graph& g, const Explanation& e) {
  for (int k = 0; k < g.num_edges(); ++k)
    if (e.edge_mask[k] && !(e.node_mask[g.edges()[k].src] && e.node_mask[g.edges()[k].dst]))
      return false;
  return true;
}

}  // namespace

TEST_SUITE("recon") {
  TEST_CASE("graph log probability") {
    Graph g = plain(3, {{0, 1}, {1, 2}});
    ProbMap pm{(Vector(3) << 0.5, 0.5, 0.9).finished(), (Vector(2) << 0.8, 0.3).finished()};
    CHECK(graph_log_prob(pm, Explanation::empty(g)) == 0.0);
    Explanation e = Explanation::empty(g);
    e.node_mask = {true, true, false};
    e.edge_mask = {true, false};
    CHECK(std::abs(graph_log_prob(pm, e) - std::log(0.2)) < 1e-12);

    Rng rng(3);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::bernoulli_distribution coin(0.5);
    for (int t = 0; t < 50; ++t) {
      for (int v = 0; v < 3; ++v) pm.node_prob[v] = u(rng);
      for (int k = 0; k < 2; ++k) pm.edge_prob[k] = u(rng);
      Explanation a = Explanation::empty(g), b = Explanation::empty(g), both = Explanation::empty(g);
      double product = 1.0;
      for (int v = 0; v < 3; ++v) {
        const bool pick = coin(rng), side = coin(rng);
        (side ? a : b).node_mask[v] = pick;
        both.node_mask[v] = pick;
        if (pick) product *= pm.node_prob[v];
      }
      for (int k = 0; k < 2; ++k) {
        const bool pick = coin(rng), side = coin(rng);
        (side ? a : b).edge_mask[k] = pick;
        both.edge_mask[k] = pick;
        if (pick) product *= pm.edge_prob[k];
      }
      CHECK(std::abs(std::exp(graph_log_prob(pm, both)) - product) < 1e-12);
      CHECK(std::abs(graph_log_prob(pm, both) - graph_log_prob(pm, a) - graph_log_prob(pm, b)) <
            1e-12);
    }
    CHECK_THROWS_AS(graph_log_prob(pm, Explanation::empty(plain(2, {}))), StructuralError);
  }

  TEST_CASE("edge-first selects the top edges") {
    Graph g = path4();
    ProbMap pm{Vector::Ones(5), (Vector(4) << 0.9, 0.1, 0.8, 0.2).finished()};
    ReconConfig cfg;
    cfg.density = 0.5;
    Explanation e = reconstruct_edge_first(pm, g, cfg);
    // node probabilities are shifted to 1 - 1e-6 before the product
    const double s = 1.0 - kProbEps;
    CHECK(e.edge_mask == Mask{true, false, true, false});
    CHECK(e.node_mask == Mask{true, true, true, true, false});
    CHECK(std::abs(e.log_prob - (std::log(0.72) + 4.0 * std::log(s))) < 1e-9);
    CHECK(std::abs(e.log_prob - std::log(0.72)) < 1e-5);

    cfg.density = 1.0;
    Explanation all = reconstruct_edge_first(pm, g, cfg);
    CHECK(all.edge_count() == 4);
    CHECK(all.node_count() == 5);

    cfg.density = 0.5;
    Explanation tie = reconstruct_edge_first(constant(g, 0.5), g, cfg);
    CHECK(tie.edge_mask == Mask{true, true, false, false});

    Explanation none = reconstruct_edge_first({Vector::Ones(3), Vector(0)}, plain(3, {}), cfg);
    CHECK(none.node_count() == 0);
    CHECK(none.log_prob == 0.0);
  }

  TEST_CASE("edge budget") {
    CHECK(edge_budget(4, 0.5, 1) == 2);
    CHECK(edge_budget(30, 0.1, 1) == 3);
    CHECK(edge_budget(30, 0.1, 5) == 5);
    CHECK(edge_budget(3, 0.1, 5) == 3);
    CHECK(edge_budget(7, 0.3, 1) == 3);
  }

  TEST_CASE("sampling saturates at full probability") {
    Graph g = plain(6, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 5}});
    ReconConfig cfg;
    cfg.max_nodes = 4;
    cfg.min_nodes = 1;
    cfg.density = 1.0;
    Rng rng(1);
    Explanation e = sample_subgraph_train(constant(g, 1.0), g, cfg, rng);
    // nodes 0..3 are kept after pruning; only edges among them have Prob_e' near 1,
    // but every edge has nonzero probability so the whole cycle is eventually drawn
    CHECK(e.edge_count() == 6);
    CHECK(e.node_count() == 6);
    CHECK(closed(g, e));
  }

  TEST_CASE("sampling with vanishing probabilities follows the fill trace") {
    Graph g = plain(8, {{0, 1}, {0, 7}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 6}, {6, 7}});
    ReconConfig cfg;
    cfg.max_nodes = 3;
    cfg.min_nodes = 1;
    cfg.min_edges = 2;
    cfg.density = 0.1;
    ProbMap pm = constant(g, 0.0);
    pm.node_prob[5] = 1e-3;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      Explanation e = sample_subgraph_train(pm, g, cfg, rng);
      // fill takes node 5 then the two lowest indices {0, 1}; Prob_e' is eps for
      // edge (0,1) and below eps^2 elsewhere, so the top-up takes (0,1) then the
      // edges touching node 5 or one selected endpoint ranked by Prob_n products
      CHECK(e.edge_mask[0]);
      CHECK(e.edge_count() == 2);
      CHECK(closed(g, e));
    }
  }

  TEST_CASE("sampled explanations respect closure and caps") {
    Rng rng(11);
    ReconConfig cfg;
    for (int t = 0; t < 1000; ++t) {
      std::uniform_int_distribution<int> size(0, 30);
      auto [g, pm] = random_probe_instance(size(rng), rng);
      cfg.max_nodes = 1 + t % 9;
      cfg.min_nodes = 1;
      cfg.density = 0.05 + 0.9 * (t % 10) / 10.0;
      cfg.max_iter = 1 + t % 25;
      Explanation e = sample_subgraph_train(pm, g, cfg, rng);
      REQUIRE(closed(g, e));
      for (int v = 0; v < g.num_nodes(); ++v) {
        if (!e.node_mask[v]) continue;
        bool touched = false;
        for (int k = 0; k < g.num_edges(); ++k)
          touched |= e.edge_mask[k] && (g.edges()[k].src == v || g.edges()[k].dst == v);
        REQUIRE(touched);
      }
      CHECK(std::abs(e.log_prob - graph_log_prob(shifted(pm), e)) < 1e-12);
      if (g.num_edges() > 0) CHECK(e.edge_count() >= std::min(cfg.min_edges, g.num_edges()));
    }
  }

  TEST_CASE("edge-first is pure and closed") {
    Rng rng(5);
    ReconConfig cfg;
    for (int t = 0; t < 500; ++t) {
      std::uniform_int_distribution<int> size(0, 25);
      auto [g, pm] = random_probe_instance(size(rng), rng);
      cfg.density = 0.05 + 0.95 * (t % 20) / 20.0;
      cfg.min_edges = 1 + t % 4;
      Explanation a = reconstruct_edge_first(pm, g, cfg), b = reconstruct_edge_first(pm, g, cfg);
      CHECK(a.edge_mask == b.edge_mask);
      CHECK(a.node_mask == b.node_mask);
      CHECK(a.log_prob == b.log_prob);
      CHECK(a.edge_count() == edge_budget(g.num_edges(), cfg.density, cfg.min_edges));
      CHECK(closed(g, a));
    }
  }

  TEST_CASE("start node is kept") {
    Graph g = path4();
    ReconConfig cfg;
    cfg.max_nodes = 2;
    cfg.min_nodes = 1;
    cfg.start_nid = 4;
    ProbMap pm = constant(g, 1.0);
    pm.node_prob[4] = 0.0;
    Rng rng(2);
    Explanation e = sample_subgraph_train(pm, g, cfg, rng);
    CHECK(closed(g, e));
    cfg.start_nid = 9;
    CHECK_THROWS_AS(sample_subgraph_train(pm, g, cfg, rng), StructuralError);
  }

  TEST_CASE("configuration and size errors") {
    ReconConfig cfg;
    cfg.density = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.max_iter = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.min_edges = 0;
    try {
      cfg.validate();
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.key() == "recon.min_edges");
    }
    Rng rng(0);
    Graph g = path4();
    CHECK_THROWS_AS(sample_subgraph_train(constant(plain(2, {{0, 1}}), 0.5), g, {}, rng),
                    StructuralError);
    CHECK_THROWS_AS(reconstruct_edge_first(constant(plain(2, {{0, 1}}), 0.5), g, {}),
                    StructuralError);
    Explanation empty = sample_subgraph_train({Vector(0), Vector(0)}, plain(0, {}), {}, rng);
    CHECK(empty.node_count() == 0);
  }

  TEST_CASE("runtime probe writes a table") {
    auto rows = runtime_probe({0, 50, 100}, {}, 2, 1);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].n == 0);
    CHECK(rows[0].seconds < 0.01);
    const std::string path = (std::filesystem::temp_directory_path() / "openx_probe.csv").string();
    write_runtime_csv(rows, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "n,max_iter,seconds");
    std::filesystem::remove(path);
  }
}
