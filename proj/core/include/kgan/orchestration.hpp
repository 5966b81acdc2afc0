#pragma once

// Experiment configs, grid enumeration, run directories and best-checkpoint
// selection.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kgan/models.hpp"
#include "kgan/training.hpp"

namespace kgan {

inline constexpr int kConfigVersion = 1;

struct EvalSettings {
  /// "builtin", "builtin:PATH", "script:PATH" or "none" (no FID).
  std::string embedder = "builtin";
  std::int64_t embedder_train_steps = 600;
  bool operator==(const EvalSettings&) const = default;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::string name = "experiment";
  std::filesystem::path data_dir;
  std::filesystem::path output_root = "runs";
  ModelConfig model;
  TrainConfig train;
  EvalSettings eval;

  nlohmann::json to_json() const;
  /// Unknown keys and a missing or different version are errors.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Every violated constraint, empty when valid.
  std::vector<std::string> violations() const;
  /// Throws ValidationError listing all violations.
  void validate() const;

  std::filesystem::path run_dir() const { return output_root / name; }
};

/// One axis: the JSON value at `path` (a JSON pointer into the config) takes
/// each of `values` in turn. Object values are merged into the target.
struct GridAxis {
  std::string path;
  std::vector<nlohmann::json> values;
};

struct GridSpec {
  ExperimentConfig base;
  std::vector<GridAxis> axes;
  std::vector<std::uint64_t> seeds;  // empty keeps base.train.seed

  std::int64_t size() const;
  nlohmann::json to_json() const;
  static GridSpec from_json(const nlohmann::json& j);

  /// loss x penalty x lambda x spectral norm x (beta1, beta2): 48 cells.
  static GridSpec baseline(const ExperimentConfig& base = {});
  /// spectral norm x K in {3,4,5} x 7 relational layouts: 42 cells.
  static GridSpec structured(const ExperimentConfig& base = {});
  static GridSpec preset(const std::string& name, const ExperimentConfig& base = {});
};

/// Cartesian product, first axis slowest, seeds fastest. Cell names are
/// "<base name>-cNNN[-sSEED]". Every produced config is validated.
std::vector<ExperimentConfig> enumerate_grid(const GridSpec& spec);

struct BestCheckpoint {
  std::int64_t step = 0;
  double fid = 0;
};

/// Minimal FID, ties to the earliest step. Throws when no row has an FID.
BestCheckpoint select_best(const std::vector<MetricsRow>& rows);

struct SeedSummary {
  std::int64_t seeds = 0;
  double mean = 0;
  double stddev = 0;  // sample standard deviation, 0 for a single seed
};

SeedSummary summarize_seeds(const std::vector<double>& best_fids);

struct RunOptions {
  int data_threads = 1;
  std::function<void(const MetricsRow&)> on_row;
};

struct RunResult {
  std::filesystem::path dir;
  std::optional<BestCheckpoint> best;
};

/// data check -> train (resuming if the run dir has checkpoints) -> best.json.
RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

struct ReportRow {
  std::string cell;  // first run name of the group
  std::string tag;
  std::vector<std::string> runs;
  SeedSummary summary;
};

/// Groups finished runs under `root` by config (ignoring name and seed) and
/// summarizes their best FIDs.
std::vector<ReportRow> collect_report(const std::filesystem::path& root);

}  // namespace kgan
