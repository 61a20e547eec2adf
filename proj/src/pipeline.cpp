#include "openx/pipeline.hpp"

#include "openx/error.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace openx {

using json = nlohmann::json;

namespace {

json explainer_json(const ExplainerConfig& e) {
  json j = e;
  j.erase("seed");
  return j;
}

json split_name(SplitTag t) { return to_string(t); }

void check_keys(const json& user, const json& defaults, const std::string& path) {
  if (!user.is_object()) throw ConfigError(path.empty() ? "config" : path, "must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string name = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw ConfigError(name, "unknown key");
    if (defaults.at(key).is_object()) check_keys(value, defaults.at(key), name);
  }
}

ConfigError rekey(const std::string& pre, const ConfigError& e) {
  const std::string& k = e.key();
  const std::string msg = std::string(e.what()).substr(k.size() + 2);
  if (k.rfind(pre + ".", 0) == 0) return ConfigError(k, msg);
  if (pre == "explainer") return ConfigError(pre + "." + k, msg);
  return ConfigError(pre + "." + k.substr(k.find('.') == std::string::npos ? 0 : k.rfind('.') + 1), msg);
}

template <class F>
void section(const std::string& name, F&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    throw rekey(name, e);
  } catch (const json::exception& e) {
    throw ConfigError(name, e.what());
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  return out;
}

}  // namespace

void RunConfig::finalize() {
  gen.seed = seed;
  target.seed = seed;
  npaf.seed = seed;
  explainer.seed = seed;
}

void RunConfig::validate() const {
  section("gen", [&] { gen.validate(); });
  if (!(concept_train_corr >= 0.0 && concept_train_corr <= 1.0))
    throw ConfigError("split.concept_train_corr", "must be in [0, 1]");
  if (shift == ShiftType::None) throw ConfigError("split.shift", "must be covariate, concept or iid");
  if (domain == ShiftDomain::None) throw ConfigError("split.domain", "must be basis or size");
  section("target", [&] { target.validate(); });
  section("npaf", [&] { npaf.validate(); });
  section("explainer", [&] { explainer.validate(); });
  if (eval_split == SplitTag::Unassigned) throw ConfigError("eval.split", "must be train, val or test");
  if (dot_limit < 0) throw ConfigError("eval.dot_limit", "must be >= 0");
  for (double d : sweep_density)
    if (!(d > 0.0 && d <= 1.0)) throw ConfigError("sweep.density", "values must be in (0, 1]");
  for (double w : sweep_lar)
    if (!(w >= 0.0)) throw ConfigError("sweep.lar", "values must be >= 0");
  for (double w : sweep_recon)
    if (!(w >= 0.0)) throw ConfigError("sweep.recon", "values must be >= 0");
  for (int n : bench_sizes)
    if (n < 1) throw ConfigError("bench.sizes", "values must be >= 1");
  if (bench_repeats < 1) throw ConfigError("bench.repeats", "must be >= 1");
}

json to_json(const RunConfig& c) {
  json families = json::array(), motifs = json::array();
  for (auto f : c.gen.base_families) families.push_back(to_string(f));
  for (auto m : c.gen.motif_set) motifs.push_back(to_string(m));
  return {{"seed", c.seed},
          {"gen",
           {{"num_graphs", c.gen.num_graphs},
            {"base_families", families},
            {"base_size_range", {c.gen.base_size_range.first, c.gen.base_size_range.second}},
            {"motif_set", motifs},
            {"feature_dim", c.gen.feature_dim},
            {"env_dims", c.gen.env_dims},
            {"num_feature_envs", c.gen.num_feature_envs},
            {"concept_corr", c.gen.concept_corr},
            {"concept_domain", to_string(c.gen.concept_domain)}}},
          {"split",
           {{"shift", to_string(c.shift)},
            {"domain", to_string(c.domain)},
            {"concept_train_corr", c.concept_train_corr}}},
          {"target",
           {{"layers", c.target.layers},
            {"hidden", c.target.hidden},
            {"epochs", c.target.epochs},
            {"batch_size", c.target.batch_size},
            {"lr", c.target.lr},
            {"weight_decay", c.target.weight_decay}}},
          {"npaf",
           {{"k", c.npaf.k},
            {"wl_iters", c.npaf.wl_iters},
            {"num_types", c.npaf.num_types},
            {"theta", c.npaf.theta},
            {"bins", c.npaf.bins},
            {"refine_rounds", c.npaf.refine_rounds}}},
          {"explainer", explainer_json(c.explainer)},
          {"eval", {{"split", split_name(c.eval_split)}, {"dot_limit", c.dot_limit}}},
          {"sweep", {{"density", c.sweep_density}, {"lar", c.sweep_lar}, {"recon", c.sweep_recon}}},
          {"bench", {{"sizes", c.bench_sizes}, {"repeats", c.bench_repeats}}}};
}

RunConfig run_config_from_json(const json& user) {
  RunConfig c;
  const json defaults = to_json(c);
  check_keys(user, defaults, "");
  json j = defaults;
  j.merge_patch(user);
  // merge_patch drops explicit nulls; start_nid may legitimately be null
  if (!j["explainer"]["recon"].contains("start_nid")) j["explainer"]["recon"]["start_nid"] = nullptr;

  section("seed", [&] { c.seed = j.at("seed").get<std::uint64_t>(); });
  section("gen", [&] {
    const auto& g = j.at("gen");
    c.gen.num_graphs = g.at("num_graphs").get<int>();
    c.gen.base_families.clear();
    for (const auto& f : g.at("base_families")) c.gen.base_families.push_back(base_family_from_string(f.get<std::string>()));
    c.gen.base_size_range = {g.at("base_size_range").at(0).get<int>(), g.at("base_size_range").at(1).get<int>()};
    if (g.at("base_size_range").size() != 2) throw ConfigError("gen.base_size_range", "needs [min, max]");
    c.gen.motif_set.clear();
    for (const auto& m : g.at("motif_set")) c.gen.motif_set.push_back(motif_from_string(m.get<std::string>()));
    c.gen.feature_dim = g.at("feature_dim").get<int>();
    c.gen.env_dims = g.at("env_dims").get<std::vector<int>>();
    c.gen.num_feature_envs = g.at("num_feature_envs").get<int>();
    c.gen.concept_corr = g.at("concept_corr").get<double>();
    c.gen.concept_domain = shift_domain_from_string(g.at("concept_domain").get<std::string>());
  });
  section("split", [&] {
    const auto& s = j.at("split");
    c.shift = shift_type_from_string(s.at("shift").get<std::string>());
    c.domain = shift_domain_from_string(s.at("domain").get<std::string>());
    c.concept_train_corr = s.at("concept_train_corr").get<double>();
  });
  section("target", [&] {
    const auto& t = j.at("target");
    c.target.layers = t.at("layers").get<int>();
    c.target.hidden = t.at("hidden").get<int>();
    c.target.epochs = t.at("epochs").get<int>();
    c.target.batch_size = t.at("batch_size").get<int>();
    c.target.lr = t.at("lr").get<double>();
    c.target.weight_decay = t.at("weight_decay").get<double>();
  });
  section("npaf", [&] {
    const auto& n = j.at("npaf");
    c.npaf.k = n.at("k").get<int>();
    c.npaf.wl_iters = n.at("wl_iters").get<int>();
    c.npaf.num_types = n.at("num_types").get<int>();
    c.npaf.theta = n.at("theta").get<double>();
    c.npaf.bins = n.at("bins").get<int>();
    c.npaf.refine_rounds = n.at("refine_rounds").get<int>();
  });
  section("explainer", [&] {
    json e = j.at("explainer");
    e["seed"] = 0;
    c.explainer = e.get<ExplainerConfig>();
  });
  section("eval", [&] {
    c.eval_split = split_tag_from_string(j.at("eval").at("split").get<std::string>());
    c.dot_limit = j.at("eval").at("dot_limit").get<int>();
  });
  section("sweep", [&] {
    c.sweep_density = j.at("sweep").at("density").get<std::vector<double>>();
    c.sweep_lar = j.at("sweep").at("lar").get<std::vector<double>>();
    c.sweep_recon = j.at("sweep").at("recon").get<std::vector<double>>();
  });
  section("bench", [&] {
    c.bench_sizes = j.at("bench").at("sizes").get<std::vector<int>>();
    c.bench_repeats = j.at("bench").at("repeats").get<int>();
  });
  c.finalize();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open config");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

std::string config_hash(const RunConfig& c) {
  const std::string text = to_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace fs = std::filesystem;

std::string RunDir::dataset() const { return (fs::path(root) / "dataset.jsonl").string(); }
std::string RunDir::model_dir() const { return (fs::path(root) / "model").string(); }
std::string RunDir::model() const { return (fs::path(root) / "model" / "model.json").string(); }
std::string RunDir::model_log() const { return (fs::path(root) / "model" / "train_log.csv").string(); }
std::string RunDir::envmodel() const { return (fs::path(root) / "envmodel.json").string(); }
std::string RunDir::explainer() const { return (fs::path(root) / "explainer").string(); }
std::string RunDir::log() const { return (fs::path(root) / "log.csv").string(); }
std::string RunDir::metrics() const { return (fs::path(root) / "metrics.csv").string(); }
std::string RunDir::metrics_json() const { return (fs::path(root) / "metrics.json").string(); }
std::string RunDir::metrics_rows() const { return (fs::path(root) / "metrics_rows.csv").string(); }
std::string RunDir::explanations() const { return (fs::path(root) / "explanations").string(); }

json provenance(const RunConfig& c) { return {{"config_hash", config_hash(c)}}; }

void require_same_config(const json& meta, const std::string& hash, const std::string& what) {
  const std::string found = meta.is_object() ? meta.value("config_hash", "") : "";
  if (found != hash)
    throw StateError(what + " was produced under config " + (found.empty() ? "<none>" : found) +
                     ", current config is " + hash);
}

Dataset make_dataset(const RunConfig& c) {
  return split(generate(c.gen), c.shift, c.domain, {c.concept_train_corr, c.seed});
}

TargetModel fit_target(const RunConfig& c, const Dataset& ds, std::vector<TrainLogRow>* log) {
  auto train = ds.select(SplitTag::Train);
  if (train.empty()) throw StructuralError("train split is empty");
  return train_target(train, c.num_classes(), c.target, log);
}

EnvModel fit_env(const RunConfig& c, const Dataset& ds) {
  auto train = ds.select(SplitTag::Train);
  if (train.empty()) throw StructuralError("train split is empty");
  return fit_npaf(train, c.npaf);
}

TrainResult fit_explainer(const RunConfig& c, const Dataset& ds, const BlackBox& model,
                          const EnvModel& env) {
  return train_explainer(ds.select(SplitTag::Train), model, env, c.explainer);
}

std::vector<MetricsReport> evaluate_explainer(const RunConfig& c, const Dataset& ds,
                                              const BlackBox& model, const Explainer& ex) {
  auto graphs = ds.select(c.eval_split);
  if (graphs.empty()) throw StructuralError(to_string(c.eval_split) + " split is empty");
  return evaluate([&](const Graph& g) { return ex.explain(model, g); }, graphs, model,
                  c.seed ^ 0x5eedULL);
}

std::vector<AblationRow> run_ablation(const RunConfig& c, const Dataset& ds,
                                      const BlackBox& model) {
  const EnvModel env = fit_env(c, ds);
  std::vector<AblationRow> rows;
  auto run = [&](const std::string& name, const RunConfig& v, const EnvModel& e) {
    TrainResult r = fit_explainer(v, ds, model, e);
    MetricsReport rep = evaluate_explainer(v, ds, model, r.explainer).front();
    rep.method = name;
    rows.push_back({name, std::move(rep)});
  };
  run("full", c, env);
  RunConfig v = c;
  v.explainer.weights.lar = 0.0;
  run("no_lar", v, env);
  v = c;
  v.explainer.weights.con = 0.0;
  run("no_con", v, env);
  v = c;
  v.explainer.weights.mi = 0.0;
  run("no_mi", v, env);
  v = c;
  v.explainer.weights.rr = 0.0;
  run("no_rr", v, env);
  v = c;
  v.npaf.k = 1;
  run("npaf_k1", v, fit_env(v, ds));
  return rows;
}

std::vector<SweepRow> run_sweep(const RunConfig& c, const Dataset& ds, const BlackBox& model,
                                const EnvModel& env) {
  std::vector<SweepRow> rows;
  auto run = [&](const std::string& param, double value, const RunConfig& v) {
    TrainResult r = fit_explainer(v, ds, model, env);
    rows.push_back({param, value, evaluate_explainer(v, ds, model, r.explainer).front()});
  };
  for (double d : c.sweep_density) {
    RunConfig v = c;
    v.explainer.recon.density = d;
    run("density", d, v);
  }
  for (double w : c.sweep_lar) {
    RunConfig v = c;
    v.explainer.weights.lar = w;
    run("lar", w, v);
  }
  for (double w : c.sweep_recon) {
    RunConfig v = c;
    v.explainer.weights.recon = w;
    run("recon", w, v);
  }
  return rows;
}

namespace {

void report_fields(std::ostream& out, const MetricsReport& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.9g",
                r.rows.size(), r.fid_plus, r.fid_minus, r.gef, r.rho_v, r.rho_e, r.gt_precision,
                r.gt_recall, r.t_100);
  out << buf;
}

constexpr const char* kReportHeader = "graphs,fid_plus,fid_minus,gef,rho_v,rho_e,gt_precision,gt_recall,T_100";

}  // namespace

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
  auto out = open_out(path);
  out << "variant," << kReportHeader << '\n';
  for (const auto& r : rows) {
    out << r.variant << ',';
    report_fields(out, r.report);
    out << '\n';
  }
  if (!out) throw IoError(path, "write failed");
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  auto out = open_out(path);
  out << "param,value," << kReportHeader << '\n';
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,", r.param.c_str(), r.value);
    out << buf;
    report_fields(out, r.report);
    out << '\n';
  }
  if (!out) throw IoError(path, "write failed");
}

std::string explanation_dot(const Graph& g, const Explanation& e, const std::string& name) {
  validate(g, e);
  std::ostringstream out;
  out << "graph \"" << name << "\" {\n  node [shape=circle, style=filled];\n";
  for (int v = 0; v < g.num_nodes(); ++v) {
    const bool gt = g.gt_motif() && g.gt_motif()->nodes[v];
    out << "  " << v << " [fillcolor=\"" << (e.node_mask[v] ? "lightblue" : "white") << '"';
    if (gt) out << ", penwidth=2";
    out << "];\n";
  }
  for (int k = 0; k < g.num_edges(); ++k) {
    const Edge& ed = g.edges()[k];
    out << "  " << ed.src << " -- " << ed.dst;
    if (e.edge_mask[k]) out << " [color=red, penwidth=2]";
    out << ";\n";
  }
  out << "}\n";
  return out.str();
}

json explanation_json(const Graph& g, const Explanation& e, int index) {
  validate(g, e);
  std::vector<int> nodes, edges;
  for (int v = 0; v < g.num_nodes(); ++v) nodes.push_back(e.node_mask[v]);
  for (int k = 0; k < g.num_edges(); ++k) edges.push_back(e.edge_mask[k]);
  return {{"graph", index}, {"node_mask", nodes}, {"edge_mask", edges}, {"log_prob", e.log_prob}};
}

}  // namespace openx
