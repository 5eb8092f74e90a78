#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdpo/composition.hpp"
#include "tsdpo/data.hpp"
#include "tsdpo/evaluation.hpp"
#include "tsdpo/model.hpp"
#include "tsdpo/train.hpp"

namespace tsdpo {

enum class Precision { F64, F32 };
enum class Method { TsDpo, Dpo, DpoMixed };

const char* precision_name(Precision p);
Precision parse_precision(const std::string& name);
const char* method_name(Method m);  // ts-dpo | dpo | dpo-mixed
Method parse_method(const std::string& name);

/// Group label used in result tables, e.g. "TS-DPO Affine-2" or "DPO Mixed".
std::string group_label(Method m, std::optional<Strategy> strategy = std::nullopt);

struct MixedRunConfig {
  TrainConfig train;
  /// One scalarized run (and one result row) per rate.
  std::vector<double> learning_rates{1e-4, 2e-4, 4e-4};
};

struct LrSweepConfig {
  std::vector<double> grid{5e-5, 1e-4, 2e-4, 4e-4, 8e-4};
  /// Tail of each training split held out for selection.
  int holdout = 200;
};

struct AnalysisConfig {
  int n_prompts = 100;
  int k = 0;  // 0: default component count
  double ridge = 1e-8;
};

struct SweepRequest {
  Method method = Method::TsDpo;
  Strategy strategy = Strategy::Convex;
  friend bool operator==(const SweepRequest&, const SweepRequest&) = default;
};

/// Everything one experiment needs. Sub-configs without an explicit "seed"
/// inherit global_seed.
struct RunConfig {
  std::string output_dir = "run";
  std::uint64_t global_seed = 0;
  Precision precision = Precision::F64;
  ModelConfig model;
  PretrainConfig base;
  BenchSpec bench;
  TrainConfig ts_help, ts_verb, dpo_help, dpo_verb;
  MixedRunConfig mixed;
  LrSweepConfig lr_sweep;
  std::vector<SweepRequest> sweeps;
  EvalConfig eval;
  AnalysisConfig analysis;

  RunConfig();
  void validate() const;
  /// The training config for one (method, objective), with the mode set from
  /// the method.
  TrainConfig train_config(Method method, Axis objective) const;
  /// Hex FNV-1a of the canonical JSON without output_dir.
  std::string hash() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Throws ConfigError on unknown top-level keys or invalid values.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

/// Artifact locations under output_dir.
struct RunPaths {
  std::string root;

  std::string split(Axis axis, bool eval) const;
  std::string facts() const;
  std::string base_snapshot() const;
  std::string task_vector(Method method, Axis objective) const;
  std::string mixed_vector(std::size_t index) const;
  std::string loss_csv(Method method, const std::string& tag) const;
  std::string sweep_csv(Method method, std::optional<Strategy> strategy) const;
  std::string analysis(const std::string& file) const;
  std::string report(const std::string& file) const;
};

void cmd_gen_data(const RunConfig& config);
void cmd_init_base(const RunConfig& config);
/// objective: nullopt trains both axes (dpo-mixed ignores it).
void cmd_train(const RunConfig& config, Method method, std::optional<Axis> objective);
/// Trains every grid rate on the split minus its held-out tail and returns the
/// rate with the best held-out pairwise accuracy (smaller rate on ties).
double cmd_lr_sweep(const RunConfig& config, Method method, Axis objective);
/// dpo-mixed ignores the strategy.
void cmd_sweep(const RunConfig& config, Method method, Strategy strategy);
void cmd_analyze(const RunConfig& config);
/// Merges the configured sweep tables (or `inputs` when given) and writes the
/// marked table plus accuracy- and reward-space plots into `out_dir`
/// (default: the report directory).
void cmd_report(const RunConfig& config, const std::vector<std::string>& inputs = {},
                const std::string& out_dir = {});
/// gen-data, init-base, every training run, every configured sweep, analyze, report.
void run_all(const RunConfig& config);

/// Writes `<artifact>.meta.json` describing how it was produced.
void write_sidecar(const std::string& artifact, const RunConfig& config, const std::string& command,
                   const nlohmann::json& extra = nlohmann::json::object());

}  // namespace tsdpo
