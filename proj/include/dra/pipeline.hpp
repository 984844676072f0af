#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dra/attacks.hpp"
#include "dra/data.hpp"
#include "dra/diffusion.hpp"
#include "dra/fixtures.hpp"
#include "dra/robust_train.hpp"

namespace dra::pipeline {

// The four training arms of the experiment grid.
inline const std::vector<std::string>& arm_names() {
  static const std::vector<std::string> arms{"AT", "AT+DRA", "DM-AT", "DM-AT+DRA"};
  return arms;
}
bool arm_uses_dra(const std::string& arm);
bool arm_uses_synth(const std::string& arm);

struct EvalSettings {
  std::string preset = attacks::kStrongPgdPreset;  // or "pgd"
  double epsilon = 8.0 / 255.0;
  int n_test = 400;
  std::uint64_t seed = 0;
  std::string weights = "ema";  // "ema" or "live"
  attacks::AttackConfig pgd;     // used when preset == "pgd"

  nlohmann::json to_json() const;
  static EvalSettings from_json(const nlohmann::json& j);
};

struct AnalysisSettings {
  bool enabled = true;
  int n = 200;
  int cknna_k = 10;
  std::vector<int> sae_k{8, 16, 32};
  int sae_latent_multiplier = 8;
  int sae_epochs = 50;
  bool pair_with_strong_pgd = true;

  nlohmann::json to_json() const;
  static AnalysisSettings from_json(const nlohmann::json& j);
};

struct SweepSettings {
  bool enabled = false;
  std::string arm = "AT+DRA";
  std::vector<double> lambdas{0.0, 0.3, 0.6, 1.2, 2.4, 4.8};

  nlohmann::json to_json() const;
  static SweepSettings from_json(const nlohmann::json& j);
};

struct SyntheticSettings {
  int count = 2000;
  bool class_balanced = true;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SyntheticSettings from_json(const nlohmann::json& j);
};

struct RunConfig {
  std::string run_id = "run";
  std::string dataset = "toy-2class";
  data::ToyConfig toy;
  std::string benchmark_root;
  std::uint64_t data_seed = 0;
  std::vector<std::string> arms{"AT"};
  std::vector<std::uint64_t> seeds{0};
  robust::TrainRecipe recipe;
  diffusion::DiffusionTrainConfig diffusion;
  SyntheticSettings synthetic;
  std::string dra_target = "diffusion";  // or "noisy-discriminative"
  robust::PretrainConfig pretrain;
  EvalSettings eval;
  AnalysisSettings analysis;
  SweepSettings sweep;
  std::filesystem::path output_dir;  // empty: <run root>/<run_id>

  // Throws ConfigError on unknown arms, duplicate seeds, or missing pieces.
  void validate() const;
  bool needs_diffusion() const;
  bool needs_synthetic() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

// Applies dotted-path overrides ("recipe.lambda=0.6") to a JSON config.
// Values parse as JSON when possible, otherwise as strings.
void apply_overrides(nlohmann::json& config, const std::vector<std::string>& overrides);

// Dotted paths whose values differ, with "old -> new".
std::vector<std::string> json_diff(const nlohmann::json& before, const nlohmann::json& after, const std::string& prefix = "");

// $DRA_RUN_ROOT, or "runs" when unset.
std::filesystem::path run_root();
std::filesystem::path resolve_output_dir(const RunConfig& config);

// Append-only JSON-lines ledger with a CSV sidecar regenerated on append.
class Ledger {
 public:
  explicit Ledger(std::filesystem::path jsonl_path);
  void append(const nlohmann::json& row);
  std::vector<nlohmann::json> rows() const;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path csv_path() const;

 private:
  void write_csv(const std::vector<nlohmann::json>& rows) const;
  std::filesystem::path path_;
};

// Flattens rows to CSV with the union of their (dotted) keys as header.
std::string to_csv(const std::vector<nlohmann::json>& rows);

struct PipelineEvent {
  std::string stage;
  bool executed = false;
  std::string hash;
  bool pending = false;  // outside the requested stage kinds and not yet run
};

struct PipelineResult {
  std::filesystem::path run_dir;
  std::vector<PipelineEvent> events;
  int executed() const;
  int skipped() const;
};

struct PipelineOptions {
  // Proceed over a partial run whose config differs, invalidating stages.
  bool force = false;
  // Stage kinds to execute ("diffusion", "synthetic", "pretrain", "train",
  // "eval", "analysis", "sweep"); empty means all.
  std::set<std::string> stage_kinds;
  std::function<void(const std::string&)> log;
};

// Trains, evaluates and analyzes every (arm, seed) cell. Each stage is keyed
// by a hash of exactly the config fields it depends on; stages whose hash is
// already recorded as complete are skipped. Refuses (ConfigError with a field
// diff) to continue a partial run whose config differs unless forced.
PipelineResult run_pipeline(const RunConfig& config, const PipelineOptions& options = {});

// Individual stage entry points used by the CLI verbs.
diffusion::DiffusionModel train_diffusion_stage(const RunConfig& config, const std::filesystem::path& out);
data::SyntheticPool gen_synth_stage(const RunConfig& config, const std::filesystem::path& diffusion_path,
                                    const std::filesystem::path& out);

struct ComparisonRow {
  std::string table_id;
  std::map<std::string, std::string> keys;  // dataset, model, method
  std::map<std::string, double> reference;
  std::map<std::string, double> desk;       // median over seeds; empty if no desk arm
  std::optional<bool> reference_dra_improves;
  std::optional<bool> desk_dra_improves;
  std::string note;
};

struct ComparisonTable {
  std::string table_id;
  std::vector<ComparisonRow> rows;
  std::vector<std::string> warnings;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// Joins desk-scale results (median over seeds per arm) onto fixture rows by
// method name: accuracy tables use result rows, the dimension table uses
// analysis rows. Desk numbers are labeled not comparable in magnitude.
ComparisonTable compare_to_reference(const std::vector<nlohmann::json>& results,
                                     const std::vector<nlohmann::json>& analyses, const report::ReferenceFixture& fixture);

struct ReportSummary {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> notices;
};

// Writes CSV/JSON tables, PGM frequency maps with raw arrays, scatter data and
// lambda-sweep curves under <run_dir>/report. Output depends only on the run
// directory contents.
ReportSummary emit_report(const std::filesystem::path& run_dir);

// Binary PGM (P5) of a 2D map scaled to [0, 255]; signed maps are centered at 128.
void write_pgm(const std::filesystem::path& path, const Tensor& map, bool signed_map);

}  // namespace dra::pipeline
