#include "hybspec/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hybspec/parallel.hpp"
#include "hybspec/random.hpp"
#include "hybspec/report.hpp"

namespace hybspec {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct PreparedRun {
  std::size_t graph = 0;
  Split split;
  int seed_index = 0;
  int fold = 0;
  std::uint64_t train_seed = 0;
};

struct PreparedDataset {
  std::string name;
  std::vector<Graph> graphs;
  std::vector<SpectralOperators> ops;
  std::vector<PreparedRun> runs;
  TrainConfig train;
  std::optional<std::string> error;
};

std::string seed_label(const std::string& kind, const std::string& dataset, int seed_index) {
  return kind + "/" + dataset + "/" + std::to_string(seed_index);
}

PreparedDataset prepare(const DatasetSpec& spec, const ExperimentConfig& cfg, int seeds) {
  PreparedDataset out;
  out.name = spec.name;
  out.train = cfg.train;
  if (spec.epochs) out.train.epochs = *spec.epochs;
  try {
    for (int s = 0; s < seeds; ++s) {
      if (spec.kind == DatasetSpec::Kind::sbm) {
        SbmConfig sbm = spec.sbm;
        sbm.seed = derive_seed(cfg.seed, seed_label("graph", spec.name, s));
        out.graphs.push_back(generate_sbm(sbm));
      } else if (out.graphs.empty()) {
        out.graphs.push_back(load_graph(spec.edges, spec.features, spec.masks, spec.num_classes));
      }
      const std::size_t gi = out.graphs.size() - 1;
      const Graph& g = out.graphs[gi];
      std::vector<Split> splits;
      if (spec.folds == 0) {
        if (!g.split) throw std::runtime_error("dataset '" + spec.name + "' has folds = 0 but no masks file");
        splits.push_back(*g.split);
      } else {
        splits = make_folds(g, spec.folds, {}, derive_seed(cfg.seed, seed_label("folds", spec.name, s)));
      }
      for (std::size_t f = 0; f < splits.size(); ++f) {
        PreparedRun run;
        run.graph = gi;
        run.split = std::move(splits[f]);
        run.seed_index = s;
        run.fold = static_cast<int>(f);
        run.train_seed = derive_seed(derive_seed(cfg.seed, seed_label("train", spec.name, s)), f);
        out.runs.push_back(std::move(run));
      }
    }
    for (const auto& g : out.graphs) out.ops.push_back(build_operators(g.adjacency));
  } catch (const std::exception& e) {
    out.error = e.what();
    out.graphs.clear();
    out.ops.clear();
    out.runs.clear();
  }
  return out;
}

struct CellPlan {
  std::size_t dataset = 0;
  ModelConfig model;
};

/// Trains every (cell, run) pair on the worker pool. Results land in fixed
/// slots, so the merge order never depends on scheduling.
std::vector<CellResult> run_cells(const std::vector<PreparedDataset>& data, const std::vector<CellPlan>& plans,
                                  int jobs) {
  struct Task {
    std::size_t cell;
    std::size_t run;
  };
  std::vector<CellResult> cells(plans.size());
  std::vector<Task> tasks;
  for (std::size_t c = 0; c < plans.size(); ++c) {
    const auto& ds = data[plans[c].dataset];
    cells[c].dataset = ds.name;
    cells[c].model = plans[c].model.variant;
    cells[c].order = plans[c].model.order;
    cells[c].error = ds.error;
    cells[c].runs.resize(ds.runs.size());
    for (std::size_t r = 0; r < ds.runs.size(); ++r) tasks.push_back({c, r});
  }
  parallel_for(tasks.size(), jobs, [&](std::size_t i) {
    const auto [c, r] = tasks[i];
    const auto& ds = data[plans[c].dataset];
    const auto& run = ds.runs[r];
    TrainConfig tc = ds.train;
    tc.seed = run.train_seed;
    auto& rec = cells[c].runs[r];
    rec.seed_index = run.seed_index;
    rec.fold = run.fold;
    rec.result = train(plans[c].model, tc, ds.graphs[run.graph], ds.ops[run.graph], run.split);
  });
  for (auto& cell : cells) {
    std::vector<RunResult> results;
    for (const auto& r : cell.runs) results.push_back(r.result);
    cell.summary = summarize(std::move(results));
  }
  return cells;
}

/// Mean final-epoch accuracy in percent, with the same collapse rule as the
/// reported accuracy.
double final_epoch_mean(const CellResult& cell) {
  if (cell.runs.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& r : cell.runs)
    sum += 100.0 * (r.result.collapsed ? r.result.majority_acc : r.result.final_test_acc);
  return sum / static_cast<double>(cell.runs.size());
}

json run_json(const RunRecord& r) {
  const auto& res = r.result;
  return {{"seed_index", r.seed_index},
          {"fold", r.fold},
          {"seed", res.seed},
          {"collapsed", res.collapsed},
          {"test_acc_reported", res.test_acc_reported},
          {"best_epoch", res.best_epoch},
          {"best_val_test_acc", res.best_val_test_acc},
          {"final_test_acc", res.final_test_acc},
          {"majority_acc", res.majority_acc},
          {"stability_events", res.stability_events}};
}

json cell_json(const CellResult& c) {
  json runs = json::array();
  for (const auto& r : c.runs) runs.push_back(run_json(r));
  json j{{"dataset", c.dataset},
         {"model", variant_name(c.model)},
         {"K", c.order},
         {"mean", c.summary.mean},
         {"std", c.summary.std},
         {"final_epoch_mean", final_epoch_mean(c)},
         {"collapsed_runs", c.collapsed_runs()},
         {"cell", c.cell_text()},
         {"runs", std::move(runs)}};
  j["error"] = c.error ? json(*c.error) : json(nullptr);
  return j;
}

CsvRow cell_row(std::uint64_t seed, const CellResult& c) {
  return {std::to_string(seed),
          c.dataset,
          variant_name(c.model),
          std::to_string(c.order),
          std::to_string(c.runs.size()),
          c.error ? "" : format_number(c.summary.mean),
          c.error ? "" : format_number(c.summary.std),
          c.error ? "" : format_number(final_epoch_mean(c)),
          std::to_string(c.collapsed_runs()),
          c.cell_text(),
          c.error.value_or("")};
}

const CsvRow kCellHeader{"root_seed", "dataset", "model",          "K",    "runs", "mean",
                         "std",       "final_epoch_mean", "collapsed_runs", "cell", "error"};

std::string dump(const json& j) { return j.dump(2) + "\n"; }

std::string describe(const StabilityEvent& e) {
  std::ostringstream s;
  s << "epoch " << e.epoch << ", " << branch_name(e.branch) << " branch, ";
  switch (e.site) {
    case StabilityEvent::Site::basis_order:
      s << "layer " << e.layer << " basis order " << e.order << " went non-finite";
      break;
    case StabilityEvent::Site::head:
      s << "output head went non-finite";
      break;
    case StabilityEvent::Site::gradient:
      s << "non-finite gradient on " << e.param;
      break;
  }
  s << " (max |value| before: " << format_number(e.max_abs_before) << ")";
  return s.str();
}

double to_double(const json& j, const char* key, double fallback) { return j.value(key, fallback); }

DatasetSpec parse_dataset(const json& j, const fs::path& base_dir, std::size_t index) {
  DatasetSpec d;
  d.name = j.value("name", "dataset" + std::to_string(index));
  const auto type = j.value("type", std::string("sbm"));
  if (type == "sbm") {
    d.kind = DatasetSpec::Kind::sbm;
    d.sbm.n = j.value("n", d.sbm.n);
    d.sbm.classes = j.value("classes", d.sbm.classes);
    d.sbm.homophily = to_double(j, "homophily", d.sbm.homophily);
    d.sbm.avg_degree = to_double(j, "avg_degree", d.sbm.avg_degree);
    d.sbm.features = j.value("features", d.sbm.features);
    d.sbm.feature_noise = to_double(j, "feature_noise", d.sbm.feature_noise);
  } else if (type == "files") {
    d.kind = DatasetSpec::Kind::files;
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };
    d.edges = resolve(j.at("edges").get<std::string>());
    d.features = resolve(j.at("features").get<std::string>());
    if (j.contains("masks")) d.masks = resolve(j.at("masks").get<std::string>());
    if (j.contains("num_classes")) d.num_classes = j.at("num_classes").get<int>();
  } else {
    throw std::invalid_argument("dataset '" + d.name + "': unknown type '" + type + "'");
  }
  d.folds = j.value("folds", d.kind == DatasetSpec::Kind::files && d.masks ? 0 : 10);
  if (d.folds == 1 || d.folds < 0) throw std::invalid_argument("dataset '" + d.name + "': folds must be 0 or >= 2");
  if (j.contains("epochs")) d.epochs = j.at("epochs").get<int>();
  return d;
}

json dataset_json(const DatasetSpec& d) {
  json j{{"name", d.name}, {"folds", d.folds}};
  if (d.kind == DatasetSpec::Kind::sbm) {
    j["type"] = "sbm";
    j["n"] = d.sbm.n;
    j["classes"] = d.sbm.classes;
    j["homophily"] = d.sbm.homophily;
    j["avg_degree"] = d.sbm.avg_degree;
    j["features"] = d.sbm.features;
    j["feature_noise"] = d.sbm.feature_noise;
  } else {
    j["type"] = "files";
    j["edges"] = d.edges.string();
    j["features"] = d.features.string();
    if (d.masks) j["masks"] = d.masks->string();
    if (d.num_classes) j["num_classes"] = *d.num_classes;
  }
  if (d.epochs) j["epochs"] = *d.epochs;
  return j;
}

const DatasetSpec& first_dataset(const ExperimentConfig& cfg) {
  if (cfg.datasets.empty()) throw std::invalid_argument("config lists no datasets");
  return cfg.datasets.front();
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
  ExperimentConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);
  cfg.seeds = j.value("seeds", cfg.seeds);
  if (cfg.seeds < 1) throw std::invalid_argument("config: seeds must be >= 1");
  if (j.contains("model")) cfg.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) cfg.train = j.at("train").get<TrainConfig>();
  if (j.contains("models")) {
    cfg.models.clear();
    for (const auto& m : j.at("models")) cfg.models.push_back(parse_variant(m.get<std::string>()));
  }
  if (j.contains("k_list")) cfg.k_list = j.at("k_list").get<std::vector<int>>();
  for (int k : cfg.k_list)
    if (k < 1) throw std::invalid_argument("config: every K in k_list must be >= 1");
  if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("datasets")) {
    std::size_t i = 0;
    for (const auto& d : j.at("datasets")) cfg.datasets.push_back(parse_dataset(d, base_dir, i++));
    if (cfg.datasets.empty()) throw std::invalid_argument("config: datasets must not be empty");
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": invalid JSON: " + e.what());
  }
  try {
    return parse_experiment_config(j, path.parent_path());
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

json experiment_config_json(const ExperimentConfig& cfg) {
  json models = json::array();
  for (auto v : cfg.models) models.push_back(variant_name(v));
  json datasets = json::array();
  for (const auto& d : cfg.datasets) datasets.push_back(dataset_json(d));
  return {{"seed", cfg.seed},     {"seeds", cfg.seeds},   {"models", models},
          {"model", cfg.model},   {"train", cfg.train},   {"k_list", cfg.k_list},
          {"datasets", datasets}, {"out_dir", cfg.out_dir.string()}};
}

int CellResult::collapsed_runs() const {
  return static_cast<int>(std::count_if(runs.begin(), runs.end(), [](const auto& r) { return r.result.collapsed; }));
}

std::string CellResult::cell_text() const {
  if (error) return "ERROR";
  std::string text = format_mean_std(summary.mean, summary.std);
  const int c = collapsed_runs();
  if (c > 0 && c == static_cast<int>(runs.size())) {
    text += " (COLLAPSED)";
  } else if (c > 0) {
    text += " (COLLAPSED " + std::to_string(c) + "/" + std::to_string(runs.size()) + ")";
  }
  return text;
}

const CellResult& UnifiedReport::cell(const std::string& dataset, Variant model) const {
  for (const auto& c : cells)
    if (c.dataset == dataset && c.model == model) return c;
  throw std::out_of_range("no cell for " + dataset + "/" + variant_name(model));
}

const CellResult& AblationReport::cell(Variant model, int order) const {
  for (const auto& c : cells)
    if (c.model == model && c.order == order) return c;
  throw std::out_of_range("no cell for " + std::string(variant_name(model)) + " K=" + std::to_string(order));
}

UnifiedReport run_unified(const ExperimentConfig& cfg, int jobs) {
  UnifiedReport report;
  report.seed = cfg.seed;
  report.models = cfg.models;
  std::vector<PreparedDataset> data;
  for (const auto& d : cfg.datasets) {
    report.datasets.push_back(d.name);
    data.push_back(prepare(d, cfg, cfg.seeds));
  }
  std::vector<CellPlan> plans;
  for (std::size_t di = 0; di < data.size(); ++di) {
    for (auto v : cfg.models) {
      CellPlan plan{di, cfg.model};
      plan.model.variant = v;
      plans.push_back(plan);
    }
  }
  report.cells = run_cells(data, plans, jobs);
  return report;
}

AblationReport run_k_ablation(const ExperimentConfig& cfg, int jobs) {
  AblationReport report;
  report.seed = cfg.seed;
  report.k_list = cfg.k_list;
  report.models = cfg.models;
  const auto& spec = first_dataset(cfg);
  report.dataset = spec.name;
  std::vector<PreparedDataset> data{prepare(spec, cfg, cfg.seeds)};
  report.error = data.front().error;
  if (!report.error) {
    report.overflow_order =
        measure_overflow_order(data.front().graphs.front(), cfg.model, cfg.k_list, derive_seed(cfg.seed, "overflow"));
  }
  std::vector<CellPlan> plans;
  for (auto v : cfg.models) {
    for (int k : cfg.k_list) {
      CellPlan plan{0, cfg.model};
      plan.model.variant = v;
      plan.model.order = k;
      if (plan.model.lattice != 0 && plan.model.lattice < k) plan.model.lattice = 0;
      plans.push_back(plan);
    }
  }
  report.cells = run_cells(data, plans, jobs);
  return report;
}

PoisonReport run_poison_demo(const ExperimentConfig& cfg, int order) {
  PoisonReport report;
  report.seed = cfg.seed;
  report.order = order;
  const auto& spec = first_dataset(cfg);
  report.dataset = spec.name;
  auto data = prepare(spec, cfg, 1);
  if (data.error) throw std::runtime_error(*data.error);
  const auto& run = data.runs.front();
  const Graph& g = data.graphs[run.graph];
  report.overflow_order = measure_overflow_order(g, cfg.model, cfg.k_list, derive_seed(cfg.seed, "overflow"));

  TrainConfig tc = data.train;
  tc.seed = run.train_seed;
  ModelConfig mc = cfg.model;
  mc.order = order;
  if (mc.lattice != 0 && mc.lattice < order) mc.lattice = 0;
  mc.variant = Variant::hyb_v3;
  report.v3 = train(mc, tc, g, data.ops[run.graph], run.split);
  mc.variant = Variant::hyb_v4;
  report.v4 = train(mc, tc, g, data.ops[run.graph], run.split);

  const auto& n3 = report.v3.grad_norm_stab;
  for (std::size_t e = 0; e < n3.size(); ++e) {
    if (!std::isfinite(n3[e])) {
      report.v3_stab_nonfinite_epoch = static_cast<int>(e);
      break;
    }
  }
  const auto& n4 = report.v4.grad_norm_stab;
  report.v4_stab_grads_finite = std::all_of(n4.begin(), n4.end(), [](double v) { return std::isfinite(v); });
  return report;
}

std::string poison_narrative(const PoisonReport& r) {
  std::ostringstream s;
  s << "poison-demo on '" << r.dataset << "', K=" << r.order << ", root seed " << r.seed << "\n";
  s << "measured Krawtchouk overflow degree: "
    << (r.overflow_order ? std::to_string(*r.overflow_order) : std::string("none in the K list")) << "\n";
  if (r.v3.stability_events.empty() && r.v4.stability_events.empty()) {
    s << "no events: both models stayed finite for all " << r.v3.train_loss.size() << " epochs\n";
  }
  auto model_lines = [&](const char* label, const RunResult& res) {
    s << label << ": ";
    if (res.stability_events.empty()) {
      s << "no stability events";
    } else {
      s << "first stability event at " << describe(res.stability_events.front()) << "; "
        << res.stability_events.size() << " distinct event locations";
    }
    s << "\n  collapsed=" << (res.collapsed ? "true" : "false")
      << ", reported test accuracy " << format_fixed(100.0 * res.test_acc_reported, 2) << "%\n";
  };
  model_lines("v3 (early fusion)", r.v3);
  if (r.v3_stab_nonfinite_epoch) {
    s << "  Chebyshev-branch gradients first non-finite at epoch " << *r.v3_stab_nonfinite_epoch << "\n";
  } else {
    s << "  Chebyshev-branch gradients finite for all epochs\n";
  }
  model_lines("v4 (late fusion)", r.v4);
  const auto& n4 = r.v4.grad_norm_stab;
  if (r.v4_stab_grads_finite && !n4.empty()) {
    const auto [lo, hi] = std::minmax_element(n4.begin(), n4.end());
    s << "  Chebyshev-branch gradient norms finite for all " << n4.size() << " epochs (range "
      << format_number(*lo) << " .. " << format_number(*hi) << ")\n";
  } else {
    s << "  Chebyshev-branch gradients went non-finite\n";
  }
  return s.str();
}

namespace {

/// Config as embedded in outputs; the output location is left out so the
/// same experiment written to two places gives identical files.
json recorded_config(const ExperimentConfig& cfg) {
  json j = experiment_config_json(cfg);
  j.erase("out_dir");
  return j;
}

}  // namespace

WrittenFiles write_unified(const UnifiedReport& report, const ExperimentConfig& cfg, const fs::path& out_dir) {
  WrittenFiles out;
  CsvRow header{"root_seed", "dataset"};
  for (auto v : report.models) header.push_back(variant_name(v));
  std::vector<CsvRow> wide;
  std::vector<CsvRow> table;
  for (const auto& d : report.datasets) {
    CsvRow row{std::to_string(report.seed), d};
    for (auto v : report.models) row.push_back(report.cell(d, v).cell_text());
    table.push_back(CsvRow(row.begin() + 1, row.end()));
    wide.push_back(std::move(row));
  }
  std::vector<CsvRow> cells;
  json cells_json = json::array();
  for (const auto& c : report.cells) {
    cells.push_back(cell_row(report.seed, c));
    cells_json.push_back(cell_json(c));
  }
  write_text(out_dir / "unified.csv", render_csv(header, wide));
  write_text(out_dir / "unified_cells.csv", render_csv(kCellHeader, cells));
  write_text(out_dir / "unified.json",
             dump({{"root_seed", report.seed}, {"config", recorded_config(cfg)}, {"cells", cells_json}}));
  out.paths = {"unified.csv", "unified_cells.csv", "unified.json"};

  CsvRow table_header(header.begin() + 1, header.end());
  std::string console = "root seed " + std::to_string(report.seed) + "\n" + render_table(table_header, table);
  for (const auto& c : report.cells)
    if (c.error) console += "error in '" + c.dataset + "': " + *c.error + "\n";
  out.console = console;
  return out;
}

WrittenFiles write_k_ablation(const AblationReport& report, const ExperimentConfig& cfg, const fs::path& out_dir) {
  WrittenFiles out;
  std::vector<CsvRow> cells;
  json cells_json = json::array();
  for (const auto& c : report.cells) {
    cells.push_back(cell_row(report.seed, c));
    cells_json.push_back(cell_json(c));
  }
  CsvRow header{"root_seed", "K"};
  for (auto v : report.models) header.push_back(variant_name(v));
  std::vector<CsvRow> wide;
  for (int k : report.k_list) {
    CsvRow row{std::to_string(report.seed), std::to_string(k)};
    for (auto v : report.models) row.push_back(report.cell(v, k).cell_text());
    wide.push_back(std::move(row));
  }

  std::vector<ChartSeries> series;
  for (auto v : report.models) {
    ChartSeries s;
    s.name = variant_name(v);
    for (int k : report.k_list) {
      const auto& c = report.cell(v, k);
      s.x.push_back(k);
      s.y.push_back(c.summary.mean);
      s.marked.push_back(!c.runs.empty() && c.collapsed_runs() == static_cast<int>(c.runs.size()));
    }
    series.push_back(std::move(s));
  }
  ChartSpec chart;
  chart.title = "Test accuracy vs polynomial degree (" + report.dataset + ", root seed " +
                std::to_string(report.seed) + ")";
  chart.x_label = "K (polynomial degree)";
  chart.y_label = "Test accuracy (%)";

  json doc{{"root_seed", report.seed},
           {"dataset", report.dataset},
           {"k_list", report.k_list},
           {"overflow_order", report.overflow_order ? json(*report.overflow_order) : json(nullptr)},
           {"config", recorded_config(cfg)},
           {"cells", cells_json}};
  doc["error"] = report.error ? json(*report.error) : json(nullptr);
  write_text(out_dir / "k_ablation.csv", render_csv(header, wide));
  write_text(out_dir / "k_ablation_cells.csv", render_csv(kCellHeader, cells));
  write_text(out_dir / "k_ablation.json", dump(doc));
  write_text(out_dir / "k_ablation.svg", render_line_chart(chart, series));
  out.paths = {"k_ablation.csv", "k_ablation_cells.csv", "k_ablation.json", "k_ablation.svg"};

  std::vector<CsvRow> table;
  for (const auto& r : wide) table.push_back(CsvRow(r.begin() + 1, r.end()));
  out.console = "root seed " + std::to_string(report.seed) + ", dataset '" + report.dataset +
                "', measured overflow degree " +
                (report.overflow_order ? std::to_string(*report.overflow_order) : std::string("none")) + "\n" +
                render_table(CsvRow(header.begin() + 1, header.end()), table);
  if (report.error) out.console += "error: " + *report.error + "\n";
  return out;
}

WrittenFiles write_poison(const PoisonReport& report, const ExperimentConfig& cfg, const fs::path& out_dir) {
  json doc{{"root_seed", report.seed},
           {"dataset", report.dataset},
           {"K", report.order},
           {"overflow_order", report.overflow_order ? json(*report.overflow_order) : json(nullptr)},
           {"config", recorded_config(cfg)},
           {"v3_first_event", report.v3.stability_events.empty() ? json(nullptr)
                                                                  : json(report.v3.stability_events.front())},
           {"v4_first_event", report.v4.stability_events.empty() ? json(nullptr)
                                                                  : json(report.v4.stability_events.front())},
           {"v3_stab_nonfinite_epoch",
            report.v3_stab_nonfinite_epoch ? json(*report.v3_stab_nonfinite_epoch) : json(nullptr)},
           {"v4_stab_grads_finite", report.v4_stab_grads_finite},
           {"no_events", report.v3.stability_events.empty() && report.v4.stability_events.empty()},
           {"v3", report.v3},
           {"v4", report.v4}};
  write_text(out_dir / "poison.json", dump(doc));
  return {{"poison.json"}, poison_narrative(report)};
}

std::vector<double> uniform_grid(double lo, double hi, int points) {
  if (points < 2) throw std::invalid_argument("grid needs at least 2 points");
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) g[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (points - 1);
  return g;
}

ResponseTable checkpoint_response(Model& model, std::span<const double> lambda) {
  for (double l : lambda) {
    if (!(l >= 0.0 && l <= 2.0))
      throw std::invalid_argument("response grid value " + format_number(l) + " lies outside [0, 2]");
  }
  ResponseTable table;
  table.lambda.assign(lambda.begin(), lambda.end());
  std::vector<double> hat, scaled;
  for (double l : lambda) {
    hat.push_back(l - 1.0);
    scaled.push_back(0.5 * l);
  }
  auto add = [&](const std::vector<ConvLayerParams>& convs) {
    for (const auto& conv : convs) {
      const auto r = layer_response(conv, model.config, conv.kind == FilterKind::chebyshev ? hat : scaled);
      const std::string prefix = std::string(branch_name(conv.branch)) + "_l" + std::to_string(conv.layer);
      table.columns.push_back(prefix + "_mean");
      table.values.push_back(r.mean);
      table.columns.push_back(prefix + "_gain");
      table.values.push_back(r.gain);
    }
  };
  add(model.het);
  add(model.stab);
  return table;
}

WrittenFiles write_response(const ResponseTable& table, const fs::path& out_dir) {
  CsvRow header{"lambda"};
  header.insert(header.end(), table.columns.begin(), table.columns.end());
  std::vector<CsvRow> rows;
  for (std::size_t i = 0; i < table.lambda.size(); ++i) {
    CsvRow row{format_number(table.lambda[i])};
    for (const auto& col : table.values) row.push_back(format_number(col[i]));
    rows.push_back(std::move(row));
  }
  write_text(out_dir / "response.csv", render_csv(header, rows));
  std::vector<CsvRow> shown;
  const std::size_t stride = std::max<std::size_t>(1, table.lambda.size() / 10);
  for (std::size_t i = 0; i < rows.size(); i += stride) {
    CsvRow row{format_fixed(table.lambda[i], 3)};
    for (const auto& col : table.values) row.push_back(format_fixed(col[i], 4));
    shown.push_back(std::move(row));
  }
  return {{"response.csv"}, render_table(header, shown)};
}

WrittenFiles write_sbm(const SbmConfig& cfg, const fs::path& out_dir) {
  Graph g = generate_sbm(cfg);
  g.split = make_folds(g, 2, {}, derive_seed(cfg.seed, "split")).front();
  fs::create_directories(out_dir);
  save_graph(g, out_dir / "edges.txt", out_dir / "features.txt", out_dir / "masks.json");
  const double h = edge_homophily(g);
  json meta{{"root_seed", cfg.seed},
            {"n", cfg.n},
            {"classes", cfg.classes},
            {"homophily_target", cfg.homophily},
            {"homophily_measured", h},
            {"avg_degree_target", cfg.avg_degree},
            {"edges", g.adjacency.nnz() / 2},
            {"features", cfg.features},
            {"feature_noise", cfg.feature_noise}};
  write_text(out_dir / "sbm.json", dump(meta));
  std::ostringstream s;
  s << "wrote SBM graph: n=" << cfg.n << ", classes=" << cfg.classes << ", edges=" << g.adjacency.nnz() / 2
    << ", edge homophily " << format_fixed(h, 4) << " (target " << format_fixed(cfg.homophily, 4) << "), root seed "
    << cfg.seed << "\n";
  return {{"edges.txt", "features.txt", "masks.json", "sbm.json"}, s.str()};
}

TrainArtifacts run_single(const ExperimentConfig& cfg) {
  const auto& spec = first_dataset(cfg);
  auto data = prepare(spec, cfg, 1);
  if (data.error) throw std::runtime_error(*data.error);
  const auto& run = data.runs.front();
  const Graph& g = data.graphs[run.graph];
  TrainConfig tc = data.train;
  tc.seed = run.train_seed;
  Model model = init_model(cfg.model, g.num_features(), static_cast<std::size_t>(g.num_classes), tc.seed);
  RunResult result = train(model, tc, g, data.ops[run.graph], run.split);
  return {std::move(model), std::move(result)};
}

WrittenFiles write_single(TrainArtifacts& artifacts, const ExperimentConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  save_checkpoint(artifacts.model, out_dir / "checkpoint.json");
  json doc{{"root_seed", cfg.seed}, {"config", recorded_config(cfg)}, {"run", artifacts.result}};
  write_text(out_dir / "run.json", dump(doc));
  const auto& r = artifacts.result;
  std::ostringstream s;
  s << variant_name(artifacts.model.config.variant) << " K=" << artifacts.model.config.order << ": reported test accuracy "
    << format_fixed(100.0 * r.test_acc_reported, 2) << "% (best epoch " << r.best_epoch << ", final "
    << format_fixed(100.0 * r.final_test_acc, 2) << "%), collapsed=" << (r.collapsed ? "true" : "false") << ", "
    << r.stability_events.size() << " stability events, root seed " << cfg.seed << "\n";
  return {{"checkpoint.json", "run.json"}, s.str()};
}

}  // namespace hybspec
