#include "openx/error.hpp"
#include "openx/pipeline.hpp"
#include "openx/recon.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

using namespace openx;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::string run = "run";
  std::string split;
  int graph = -1;
};

struct Context {
  RunConfig cfg;
  std::string hash;
  RunDir dir;
};

Context context(const Options& o) {
  Context c;
  if (o.config.empty()) {
    c.cfg.finalize();
    c.cfg.validate();
  } else {
    c.cfg = load_run_config(o.config);
  }
  c.hash = config_hash(c.cfg);
  if (!o.split.empty()) {
    try {
      c.cfg.eval_split = split_tag_from_string(o.split);
    } catch (const ConfigError&) {
      throw ConfigError("--split", "must be train, val or test");
    }
    if (c.cfg.eval_split == SplitTag::Unassigned)
      throw ConfigError("--split", "must be train, val or test");
  }
  c.dir.root = o.run;
  return c;
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw IoError(path, "not found");
}

void make_dirs(const std::string& path) {
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec) throw IoError(path, "cannot create directory: " + ec.message());
}

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << j.dump(1) << '\n';
  if (!out) throw IoError(path, "write failed");
}

json read_json(const std::string& path) {
  require_file(path);
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what(), 0);
  }
}

std::string dataset_meta(const RunDir& d) { return d.dataset() + ".meta.json"; }

Dataset load_checked_dataset(const Context& c) {
  require_file(c.dir.dataset());
  require_same_config(read_json(dataset_meta(c.dir)), c.hash, "dataset");
  return load_dataset(c.dir.dataset());
}

TargetModel load_checked_model(const Context& c) {
  require_file(c.dir.model());
  json meta;
  TargetModel m = TargetModel::load(c.dir.model(), &meta);
  require_same_config(meta, c.hash, "model");
  return m;
}

EnvModel load_checked_env(const Context& c) {
  require_file(c.dir.envmodel());
  json meta;
  EnvModel env = EnvModel::load(c.dir.envmodel(), &meta);
  require_same_config(meta, c.hash, "envmodel");
  return env;
}

Explainer load_checked_explainer(const Context& c) {
  require_file((fs::path(c.dir.explainer()) / "manifest.json").string());
  json meta;
  Explainer ex = Explainer::load(c.dir.explainer(), &meta);
  require_same_config(meta, c.hash, "explainer");
  return ex;
}

void print_report(const MetricsReport& r, const std::string& name) {
  std::printf("%-10s fid+ %.4f  fid- %.4f  gef %.4f  rho_v %.4f  rho_e %.4f  recall %.4f  T_100 %.3fs\n",
              name.c_str(), r.fid_plus, r.fid_minus, r.gef, r.rho_v, r.rho_e, r.gt_recall, r.t_100);
}

int cmd_gen(const Options& o) {
  Context c = context(o);
  make_dirs(c.dir.root);
  Dataset ds = make_dataset(c.cfg);
  save_dataset(ds, c.dir.dataset());
  write_json(provenance(c.cfg), dataset_meta(c.dir));
  json resolved = to_json(c.cfg);
  write_json({{"config", resolved}, {"config_hash", c.hash}}, (fs::path(c.dir.root) / "config.json").string());
  std::printf("wrote %zu graphs (train %zu, val %zu, test %zu) to %s\n", ds.graphs.size(),
              ds.select(SplitTag::Train).size(), ds.select(SplitTag::Val).size(),
              ds.select(SplitTag::Test).size(), c.dir.dataset().c_str());
  return 0;
}

int cmd_train_gnn(const Options& o) {
  Context c = context(o);
  Dataset ds = load_checked_dataset(c);
  std::vector<TrainLogRow> log;
  TargetModel m = fit_target(c.cfg, ds, &log);
  make_dirs(c.dir.model_dir());
  m.save(c.dir.model(), provenance(c.cfg));
  write_train_log(log, c.dir.model_log());
  for (SplitTag t : {SplitTag::Train, SplitTag::Val, SplitTag::Test}) {
    auto g = ds.select(t);
    if (!g.empty()) std::printf("%s accuracy %.4f\n", to_string(t).c_str(), accuracy(m, g));
  }
  return 0;
}

int cmd_fit_npaf(const Options& o) {
  Context c = context(o);
  Dataset ds = load_checked_dataset(c);
  EnvModel env = fit_env(c.cfg, ds);
  env.save(c.dir.envmodel(), provenance(c.cfg));
  std::printf("K=%d, Dim_env = [", env.k);
  for (std::size_t i = 0; i < env.dim_env.size(); ++i) std::printf(i ? ", %d" : "%d", env.dim_env[i]);
  std::printf("]%s\n", env.dim_env_fallback ? " (fallback)" : "");
  return 0;
}

int cmd_train_explainer(const Options& o) {
  Context c = context(o);
  Dataset ds = load_checked_dataset(c);
  TargetModel m = load_checked_model(c);
  EnvModel env = load_checked_env(c);
  TrainResult r = fit_explainer(c.cfg, ds, m, env);
  r.explainer.save(c.dir.explainer(), provenance(c.cfg));
  write_loss_log(r.log, c.dir.log());
  if (!r.log.empty()) std::printf("epochs %zu, final L_final %.6g\n", r.log.size(), r.log.back().final);
  if (r.diverged) {
    std::fprintf(stderr, "error: training diverged (%s); last finite parameters saved\n", r.message.c_str());
    return 1;
  }
  return 0;
}

int cmd_explain(const Options& o) {
  Context c = context(o);
  Dataset ds = load_checked_dataset(c);
  TargetModel m = load_checked_model(c);
  Explainer ex = load_checked_explainer(c);
  if (o.graph < 0 || o.graph >= static_cast<int>(ds.graphs.size()))
    throw ConfigError("--graph", "index out of range [0, " + std::to_string(ds.graphs.size()) + ")");
  const Graph& g = ds.graphs[o.graph];
  Explanation e = ex.explain(m, g);
  make_dirs(c.dir.explanations());
  const std::string stem = (fs::path(c.dir.explanations()) / ("graph_" + std::to_string(o.graph))).string();
  std::ofstream dot(stem + ".dot", std::ios::trunc);
  if (!dot) throw IoError(stem + ".dot", "cannot open for writing");
  dot << explanation_dot(g, e, "graph_" + std::to_string(o.graph));
  json j = explanation_json(g, e, o.graph);
  j["config_hash"] = c.hash;
  write_json(j, stem + ".json");
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_evaluate(const Options& o) {
  Context c = context(o);
  Dataset ds = load_checked_dataset(c);
  TargetModel m = load_checked_model(c);
  Explainer ex = load_checked_explainer(c);
  auto reports = evaluate_explainer(c.cfg, ds, m, ex);
  write_metrics_csv(reports, c.dir.metrics());
  write_metrics_json(reports, c.dir.metrics_json());
  write_rows_csv(reports, c.dir.metrics_rows());
  make_dirs(c.dir.explanations());
  const auto idx = ds.indices(c.cfg.eval_split);
  for (int k = 0; k < std::min<int>(c.cfg.dot_limit, static_cast<int>(idx.size())); ++k) {
    const Graph& g = ds.graphs[idx[k]];
    const std::string name = "graph_" + std::to_string(idx[k]);
    std::ofstream dot((fs::path(c.dir.explanations()) / (name + ".dot")).string(), std::ios::trunc);
    dot << explanation_dot(g, ex.explain(m, g), name);
  }
  for (const auto& r : reports) print_report(r, r.method);
  return 0;
}

int cmd_ablate(const Options& o) {
  Context c = context(o);
  Dataset ds = load_checked_dataset(c);
  TargetModel m = load_checked_model(c);
  auto rows = run_ablation(c.cfg, ds, m);
  write_ablation_csv(rows, (fs::path(c.dir.root) / "ablation.csv").string());
  for (const auto& r : rows) print_report(r.report, r.variant);
  return 0;
}

int cmd_sweep(const Options& o) {
  Context c = context(o);
  Dataset ds = load_checked_dataset(c);
  TargetModel m = load_checked_model(c);
  EnvModel env = load_checked_env(c);
  auto rows = run_sweep(c.cfg, ds, m, env);
  write_sweep_csv(rows, (fs::path(c.dir.root) / "sweep.csv").string());
  for (const auto& r : rows) {
    char name[64];
    std::snprintf(name, sizeof name, "%s=%g", r.param.c_str(), r.value);
    print_report(r.report, name);
  }
  return 0;
}

int cmd_bench(const Options& o) {
  Context c = context(o);
  make_dirs(c.dir.root);
  auto rows = runtime_probe(c.cfg.bench_sizes, c.cfg.explainer.recon, c.cfg.bench_repeats, c.cfg.seed);
  write_runtime_csv(rows, (fs::path(c.dir.root) / "runtime.csv").string());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::printf("n=%d  %.3e s", rows[i].n, rows[i].seconds);
    if (i > 0 && rows[i - 1].seconds > 0) std::printf("  ratio %.2f", rows[i].seconds / rows[i - 1].seconds);
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OPEN-style out-of-distribution GNN explainer"};
  app.require_subcommand(1);
  Options o;
  auto add = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("-c,--config", o.config, "JSON run configuration (defaults when omitted)");
    s->add_option("-r,--run", o.run, "run directory")->capture_default_str();
    return s;
  };
  std::vector<std::pair<CLI::App*, int (*)(const Options&)>> commands = {
      {add("gen", "generate and split the synthetic dataset"), cmd_gen},
      {add("train-gnn", "train the target classifier"), cmd_train_gnn},
      {add("fit-npaf", "infer environments and causal parts"), cmd_fit_npaf},
      {add("train-explainer", "train the explainer"), cmd_train_explainer},
      {add("explain", "explain one graph (DOT + JSON masks)"), cmd_explain},
      {add("evaluate", "fidelity, unfaithfulness, density and timing"), cmd_evaluate},
      {add("ablate", "retrain with one module disabled per variant"), cmd_ablate},
      {add("sweep", "density, LAR weight and reconstruction weight sweeps"), cmd_sweep},
      {add("bench", "reconstruction runtime probe"), cmd_bench}};
  commands[4].first->add_option("-g,--graph", o.graph, "dataset index of the graph")->required();
  commands[5].first->add_option("-s,--split", o.split, "train, val or test (overrides eval.split)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code != 0 && app.get_subcommands().empty()) std::cerr << app.help();
    return code;
  }
  try {
    for (auto& [sub, fn] : commands)
      if (sub->parsed()) return fn(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << "missing or unreadable: " << e.what() << '\n';
    return 2;
  } catch (const StateError& e) {
    std::cerr << "mismatch: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
