#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "hybspec/experiments.hpp"
#include "hybspec/report.hpp"

namespace fs = std::filesystem;
using namespace hybspec;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  int jobs = 1;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required) {
  auto* opt = cmd->add_option("--config", f.config, "experiment config (JSON)");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "root seed (overrides the config)");
  cmd->add_option("--out-dir", f.out_dir, "output directory (overrides the config)");
  cmd->add_option("--jobs", f.jobs, "worker threads")->check(CLI::PositiveNumber);
}

/// Stress setting used when poison-demo runs without a config: an extreme
/// initial Krawtchouk shape so the basis overflows at the upper K values.
ExperimentConfig default_poison_config() {
  ExperimentConfig cfg;
  DatasetSpec d;
  d.name = "sbm-stress";
  d.sbm.homophily = 0.5;
  d.folds = 2;
  cfg.datasets.push_back(d);
  cfg.model.raw_p_init = -16.0;
  return cfg;
}

ExperimentConfig resolve(const CommonFlags& f, std::optional<ExperimentConfig> fallback = std::nullopt) {
  ExperimentConfig cfg = f.config.empty() && fallback ? *fallback : load_experiment_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
  return cfg;
}

void report(const WrittenFiles& files, const fs::path& out_dir) {
  std::cout << files.console;
  for (const auto& p : files.paths) std::cout << "wrote " << (out_dir / p).string() << "\n";
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (used != item.size()) throw std::invalid_argument("bad grid value '" + item + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid-domain spectral GNN experiments"};
  app.require_subcommand(1);

  CommonFlags unified_flags;
  auto* unified = app.add_subcommand("unified", "accuracy table: datasets x models");
  add_common(unified, unified_flags, true);

  CommonFlags ablation_flags;
  auto* ablation = app.add_subcommand("k-ablation", "accuracy vs polynomial degree, CSV and SVG");
  add_common(ablation, ablation_flags, true);

  CommonFlags poison_flags;
  int poison_k = 25;
  auto* poison = app.add_subcommand("poison-demo", "early vs late fusion under basis overflow");
  add_common(poison, poison_flags, false);
  poison->add_option("--K", poison_k, "polynomial degree")->check(CLI::PositiveNumber);

  std::string checkpoint, grid_text, response_out = ".";
  int points = 101;
  auto* response = app.add_subcommand("response", "learned filter response of a checkpoint");
  response->add_option("--checkpoint", checkpoint, "checkpoint written by 'train'")->required();
  response->add_option("--points", points, "uniform grid size on [0, 2]");
  response->add_option("--grid", grid_text, "explicit comma-separated eigenvalues in [0, 2]");
  response->add_option("--out-dir", response_out, "output directory");

  SbmConfig sbm;
  std::string sbm_out = ".";
  auto* gen = app.add_subcommand("gen-sbm", "write a synthetic SBM graph with a split");
  gen->add_option("--n", sbm.n, "nodes");
  gen->add_option("--classes", sbm.classes, "classes");
  gen->add_option("--homophily", sbm.homophily, "expected edge homophily");
  gen->add_option("--degree", sbm.avg_degree, "expected average degree");
  gen->add_option("--features", sbm.features, "feature dimension");
  gen->add_option("--noise", sbm.feature_noise, "feature noise std");
  gen->add_option("--seed", sbm.seed, "root seed");
  gen->add_option("--out-dir", sbm_out, "output directory");

  CommonFlags train_flags;
  std::string train_variant;
  std::optional<int> train_k;
  auto* train_cmd = app.add_subcommand("train", "train one model and save a checkpoint");
  add_common(train_cmd, train_flags, true);
  train_cmd->add_option("--variant", train_variant, "cheby, krawtchouk, hyb_v3 or hyb_v4");
  train_cmd->add_option("--K", train_k, "polynomial degree")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (unified->parsed()) {
      const auto cfg = resolve(unified_flags);
      report(write_unified(run_unified(cfg, unified_flags.jobs), cfg, cfg.out_dir), cfg.out_dir);
    } else if (ablation->parsed()) {
      const auto cfg = resolve(ablation_flags);
      report(write_k_ablation(run_k_ablation(cfg, ablation_flags.jobs), cfg, cfg.out_dir), cfg.out_dir);
    } else if (poison->parsed()) {
      const auto cfg = resolve(poison_flags, default_poison_config());
      report(write_poison(run_poison_demo(cfg, poison_k), cfg, cfg.out_dir), cfg.out_dir);
    } else if (response->parsed()) {
      Model model = load_checkpoint(checkpoint);
      const auto grid = grid_text.empty() ? uniform_grid(0.0, 2.0, points) : parse_grid(grid_text);
      report(write_response(checkpoint_response(model, grid), response_out), response_out);
    } else if (gen->parsed()) {
      report(write_sbm(sbm, sbm_out), sbm_out);
    } else if (train_cmd->parsed()) {
      auto cfg = resolve(train_flags);
      if (!train_variant.empty()) cfg.model.variant = parse_variant(train_variant);
      if (train_k) cfg.model.order = *train_k;
      cfg.model.validate();
      auto artifacts = run_single(cfg);
      report(write_single(artifacts, cfg, cfg.out_dir), cfg.out_dir);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
