#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hybspec/graph.hpp"
#include "hybspec/models.hpp"
#include "hybspec/trainer.hpp"
#include "json.hpp"

namespace hybspec {

/// One dataset entry of an experiment config. Synthetic entries are
/// regenerated per seed index; file entries are loaded once.
struct DatasetSpec {
  enum class Kind { sbm, files };

  std::string name;
  Kind kind = Kind::sbm;
  SbmConfig sbm;
  std::filesystem::path edges;
  std::filesystem::path features;
  std::optional<std::filesystem::path> masks;
  std::optional<int> num_classes;
  /// Random stratified splits per seed; 0 means use the file's own masks.
  int folds = 10;
  std::optional<int> epochs;  // overrides train.epochs for this dataset
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::vector<DatasetSpec> datasets;
  std::vector<Variant> models{Variant::cheby, Variant::krawtchouk, Variant::hyb_v3, Variant::hyb_v4};
  ModelConfig model;
  TrainConfig train;
  std::vector<int> k_list{2, 3, 5, 7, 10, 15, 20, 25, 30};
  int seeds = 1;
  std::filesystem::path out_dir = "results";
};

/// Relative dataset paths are resolved against base_dir.
ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json experiment_config_json(const ExperimentConfig& cfg);

/// One training run of a grid cell.
struct RunRecord {
  int seed_index = 0;
  int fold = 0;
  RunResult result;
};

struct CellResult {
  std::string dataset;
  Variant model = Variant::cheby;
  int order = 0;
  std::vector<RunRecord> runs;
  CvResult summary;
  std::optional<std::string> error;

  int collapsed_runs() const;
  /// "mean ± std", with a COLLAPSED note when every run collapsed.
  std::string cell_text() const;
};

struct UnifiedReport {
  std::uint64_t seed = 0;
  std::vector<std::string> datasets;
  std::vector<Variant> models;
  std::vector<CellResult> cells;  // dataset-major, then model

  const CellResult& cell(const std::string& dataset, Variant model) const;
};

UnifiedReport run_unified(const ExperimentConfig& cfg, int jobs = 1);

struct AblationReport {
  std::uint64_t seed = 0;
  std::string dataset;
  std::vector<int> k_list;
  std::vector<Variant> models;
  /// Smallest listed K at which an untrained Krawtchouk model overflows.
  std::optional<int> overflow_order;
  std::vector<CellResult> cells;  // model-major, then K
  std::optional<std::string> error;

  const CellResult& cell(Variant model, int order) const;
};

/// Uses the first dataset of the config.
AblationReport run_k_ablation(const ExperimentConfig& cfg, int jobs = 1);

struct PoisonReport {
  std::uint64_t seed = 0;
  int order = 0;
  std::string dataset;
  std::optional<int> overflow_order;
  RunResult v3;
  RunResult v4;
  /// First epoch where a v3 stable-branch parameter had a non-finite gradient.
  std::optional<int> v3_stab_nonfinite_epoch;
  bool v4_stab_grads_finite = true;
};

/// Runs v3 and v4 side by side on one seed of the first dataset.
PoisonReport run_poison_demo(const ExperimentConfig& cfg, int order);
std::string poison_narrative(const PoisonReport& report);

/// Files written by each command, relative to the output directory.
struct WrittenFiles {
  std::vector<std::filesystem::path> paths;
  std::string console;  // what the command prints
};

WrittenFiles write_unified(const UnifiedReport& report, const ExperimentConfig& cfg,
                           const std::filesystem::path& out_dir);
WrittenFiles write_k_ablation(const AblationReport& report, const ExperimentConfig& cfg,
                              const std::filesystem::path& out_dir);
WrittenFiles write_poison(const PoisonReport& report, const ExperimentConfig& cfg,
                          const std::filesystem::path& out_dir);

/// Learned response of every conv layer of a checkpoint on a grid of
/// normalised-Laplacian eigenvalues in [0, 2]. Throws outside that range.
struct ResponseTable {
  std::vector<double> lambda;
  std::vector<std::string> columns;         // "<branch>_l<layer>_mean" / "_gain"
  std::vector<std::vector<double>> values;  // one vector per column
};

ResponseTable checkpoint_response(Model& model, std::span<const double> lambda);
std::vector<double> uniform_grid(double lo, double hi, int points);
WrittenFiles write_response(const ResponseTable& table, const std::filesystem::path& out_dir);

/// Synthetic graph plus one stratified 60/20/20 split, in load_graph format.
WrittenFiles write_sbm(const SbmConfig& cfg, const std::filesystem::path& out_dir);

struct TrainArtifacts {
  Model model;
  RunResult result;
};

/// Trains one model on seed index 0 (fold 0) of the first dataset.
TrainArtifacts run_single(const ExperimentConfig& cfg);
WrittenFiles write_single(TrainArtifacts& artifacts, const ExperimentConfig& cfg,
                          const std::filesystem::path& out_dir);

}  // namespace hybspec
