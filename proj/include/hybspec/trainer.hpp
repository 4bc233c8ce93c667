#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hybspec/graph.hpp"
#include "hybspec/models.hpp"
#include "json.hpp"

namespace hybspec {

enum class Selection { best_val, final_epoch };

struct TrainConfig {
  double lr = 0.01;
  double weight_decay = 5e-4;
  int epochs = 200;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Selection selection = Selection::best_val;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

struct AdamReport {
  std::vector<std::string> skipped;  // parameters with a non-finite gradient
};

/// One Adam step with classic L2 decay (wd * theta added to the gradient) and
/// bias-corrected moments. Parameters whose gradient contains a non-finite
/// entry are left untouched and listed; parameters the last backward did not
/// reach are skipped silently.
AdamReport adam_step(std::span<ad::Param* const> params, const TrainConfig& cfg);

struct RunResult {
  std::string variant;
  int order = 0;
  std::uint64_t seed = 0;
  std::vector<double> train_loss;  // NaN where the loss was non-finite
  std::vector<double> val_acc;
  std::vector<double> test_acc;
  /// Per-epoch L2 norm of each branch's gradient (NaN when non-finite).
  std::vector<double> grad_norm_het;
  std::vector<double> grad_norm_stab;
  std::vector<double> grad_norm_fused;
  int best_epoch = -1;
  double best_val_test_acc = 0.0;
  double final_test_acc = 0.0;
  double majority_acc = 0.0;
  /// Reported accuracy after the selection and collapse rules.
  double test_acc_reported = 0.0;
  bool collapsed = false;
  std::vector<StabilityEvent> stability_events;
  double wall_seconds = 0.0;  // not serialised, so outputs stay byte-stable
};

void to_json(nlohmann::json& j, const RunResult& r);

/// Accuracy of always predicting the most frequent class among train-mask
/// nodes (ties go to the smallest class id), measured on eval_mask.
double majority_baseline(std::span<const int> labels, const Mask& train_mask, const Mask& eval_mask);

/// Fraction of masked nodes with prediction == label.
double accuracy(std::span<const int> predictions, std::span<const int> labels, const Mask& mask);

/// Full-batch training with per-epoch evaluation. Deterministic per seed.
RunResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Graph& g, const Split& split);
/// Same, with precomputed operators (they depend only on the graph).
RunResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Graph& g,
                const SpectralOperators& ops, const Split& split);
/// Trains an already initialised model in place (init_model with train_cfg.seed
/// gives the same run as the overloads above).
RunResult train(Model& model, const TrainConfig& train_cfg, const Graph& g, const SpectralOperators& ops,
                const Split& split);

struct CvResult {
  std::vector<RunResult> folds;
  double mean = 0.0;  // percent
  double std = 0.0;   // population, percent
};

/// "82.16 ± 6.64" style rendering of a percent mean and std.
std::string format_mean_std(double mean, double std);

/// Mean and population std of the reported accuracies, in percent.
CvResult summarize(std::vector<RunResult> runs);

/// Trains one run per split; splits usually come from make_folds.
CvResult cross_validate(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Graph& g,
                        std::span<const Split> splits, int jobs = 1);

}  // namespace hybspec
