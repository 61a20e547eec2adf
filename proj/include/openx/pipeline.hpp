#pragma once

#include "openx/datagen.hpp"
#include "openx/gvag.hpp"
#include "openx/metrics.hpp"
#include "openx/npaf.hpp"
#include "openx/target.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace openx {

struct RunConfig {
  std::uint64_t seed = 0;
  GenConfig gen;
  ShiftType shift = ShiftType::Covariate;
  ShiftDomain domain = ShiftDomain::Basis;
  double concept_train_corr = 0.9;
  TargetConfig target;
  NpafConfig npaf;
  ExplainerConfig explainer;
  SplitTag eval_split = SplitTag::Test;
  int dot_limit = 10;
  std::vector<double> sweep_density = {0.1, 0.3, 0.5, 0.7, 1.0};
  std::vector<double> sweep_lar = {0.0, 0.5, 1.0, 1.5, 2.0};
  std::vector<double> sweep_recon = {0.0, 0.5, 1.0, 1.5, 2.0};
  std::vector<int> bench_sizes = {250, 500, 1000, 2000};
  int bench_repeats = 5;

  int num_classes() const { return static_cast<int>(gen.motif_set.size()); }
  // Pushes the top-level seed into every component, then range-checks.
  void finalize();
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
// Starts from the defaults; unknown keys and ill-typed values are ConfigErrors.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
// 16 hex digits of FNV-1a over the canonical JSON of the finalized config.
std::string config_hash(const RunConfig& c);

// Run directory layout.
struct RunDir {
  std::string root;
  std::string dataset() const;     // dataset.jsonl
  std::string model_dir() const;   // model/
  std::string model() const;       // model/model.json
  std::string model_log() const;   // model/train_log.csv
  std::string envmodel() const;    // envmodel.json
  std::string explainer() const;   // explainer/
  std::string log() const;         // log.csv
  std::string metrics() const;     // metrics.csv
  std::string metrics_json() const;
  std::string metrics_rows() const;
  std::string explanations() const;  // explanations/
};

// Artifact provenance stamped into every checkpoint.
nlohmann::json provenance(const RunConfig& c);
// Throws StateError when an artifact was produced under a different config.
void require_same_config(const nlohmann::json& meta, const std::string& hash,
                         const std::string& what);

Dataset make_dataset(const RunConfig& c);
TargetModel fit_target(const RunConfig& c, const Dataset& ds, std::vector<TrainLogRow>* log);
EnvModel fit_env(const RunConfig& c, const Dataset& ds);
TrainResult fit_explainer(const RunConfig& c, const Dataset& ds, const BlackBox& model,
                          const EnvModel& env);
std::vector<MetricsReport> evaluate_explainer(const RunConfig& c, const Dataset& ds,
                                              const BlackBox& model, const Explainer& ex);

struct AblationRow {
  std::string variant;
  MetricsReport report;
};

// Full configuration plus one variant per disabled module: LAR, L_CON, L_MI,
// L_RR (their weights set to zero) and NPAF (K = 1).
std::vector<AblationRow> run_ablation(const RunConfig& c, const Dataset& ds,
                                      const BlackBox& model);

struct SweepRow {
  std::string param;
  double value = 0.0;
  MetricsReport report;
};

std::vector<SweepRow> run_sweep(const RunConfig& c, const Dataset& ds, const BlackBox& model,
                                const EnvModel& env);

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path);

// Graphviz rendering with the explanation highlighted.
std::string explanation_dot(const Graph& g, const Explanation& e, const std::string& name);
nlohmann::json explanation_json(const Graph& g, const Explanation& e, int index);

}  // namespace openx
