#include "hybspec/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

#include "hybspec/parallel.hpp"
#include "hybspec/random.hpp"

namespace hybspec {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double branch_grad_norm(const std::vector<std::pair<Branch, ad::Param*>>& params, Branch branch) {
  double sum = 0.0;
  for (const auto& [b, p] : params) {
    if (b != branch || !p->reached) continue;
    for (double g : p->grad.values()) sum += g * g;
  }
  return std::sqrt(sum);
}

class EventLog {
 public:
  void add(StabilityEvent e, int epoch) {
    e.epoch = epoch;
    if (seen_.insert(e.key()).second) events_.push_back(std::move(e));
  }
  std::vector<StabilityEvent> take() { return std::move(events_); }

 private:
  std::set<std::string> seen_;
  std::vector<StabilityEvent> events_;
};

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
  j = {{"lr", cfg.lr},
       {"weight_decay", cfg.weight_decay},
       {"epochs", cfg.epochs},
       {"seed", cfg.seed},
       {"beta1", cfg.beta1},
       {"beta2", cfg.beta2},
       {"eps", cfg.eps},
       {"selection", cfg.selection == Selection::best_val ? "best_val" : "final"}};
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
  TrainConfig d;
  cfg.lr = j.value("lr", d.lr);
  cfg.weight_decay = j.value("weight_decay", d.weight_decay);
  cfg.epochs = j.value("epochs", d.epochs);
  cfg.seed = j.value("seed", d.seed);
  cfg.beta1 = j.value("beta1", d.beta1);
  cfg.beta2 = j.value("beta2", d.beta2);
  cfg.eps = j.value("eps", d.eps);
  const auto sel = j.value("selection", std::string("best_val"));
  if (sel != "best_val" && sel != "final") throw std::invalid_argument("unknown selection '" + sel + "'");
  cfg.selection = sel == "final" ? Selection::final_epoch : Selection::best_val;
}

AdamReport adam_step(std::span<ad::Param* const> params, const TrainConfig& cfg) {
  AdamReport report;
  for (ad::Param* p : params) {
    if (!p->reached) continue;
    if (!finite_probe(p->grad).is_finite) {
      report.skipped.push_back(p->name);
      continue;
    }
    ++p->steps;
    const double t = static_cast<double>(p->steps);
    const double bias1 = 1.0 - std::pow(cfg.beta1, t);
    const double bias2 = 1.0 - std::pow(cfg.beta2, t);
    auto theta = p->value.values();
    const auto grad = p->grad.values();
    auto m = p->m.values();
    auto v = p->v.values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = grad[i] + cfg.weight_decay * theta[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      theta[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
  return report;
}

double majority_baseline(std::span<const int> labels, const Mask& train_mask, const Mask& eval_mask) {
  int classes = 0;
  for (int l : labels) classes = std::max(classes, l + 1);
  std::vector<std::size_t> counts(static_cast<std::size_t>(classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (train_mask[i]) ++counts[static_cast<std::size_t>(labels[i])];
  int majority = 0;
  for (int c = 1; c < classes; ++c)
    if (counts[static_cast<std::size_t>(c)] > counts[static_cast<std::size_t>(majority)]) majority = c;
  const std::vector<int> constant(labels.size(), majority);
  return accuracy(constant, labels, eval_mask);
}

double accuracy(std::span<const int> predictions, std::span<const int> labels, const Mask& mask) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!mask[i]) continue;
    ++total;
    if (predictions[i] == labels[i]) ++hit;
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

RunResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Graph& g, const Split& split) {
  return train(model_cfg, train_cfg, g, build_operators(g.adjacency), split);
}

RunResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Graph& g,
                const SpectralOperators& ops, const Split& split) {
  Model model = init_model(model_cfg, g.num_features(), static_cast<std::size_t>(g.num_classes), train_cfg.seed);
  return train(model, train_cfg, g, ops, split);
}

RunResult train(Model& model, const TrainConfig& train_cfg, const Graph& g, const SpectralOperators& ops,
                const Split& split) {
  train_cfg.validate();
  if (mask_count(split.train) == 0) throw std::invalid_argument("train: empty training mask");
  if (model.in_features != g.num_features() || model.classes != static_cast<std::size_t>(g.num_classes))
    throw std::invalid_argument("train: model shape does not match the graph");
  const auto started = std::chrono::steady_clock::now();
  const ModelConfig& model_cfg = model.config;

  auto tagged = model.tagged_parameters();
  const auto params = model.parameters();
  std::map<std::string, Branch> branch_of;
  for (const auto& [b, p] : tagged) branch_of[p->name] = b;

  RunResult result;
  result.variant = variant_name(model_cfg.variant);
  result.order = model_cfg.order;
  result.seed = train_cfg.seed;
  result.majority_acc = majority_baseline(g.labels, split.train, split.test);
  EventLog log;
  const auto dropout_root = derive_seed(train_cfg.seed, "dropout");
  double best_val = -1.0;
  bool last_collapsed = false;

  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    {
      ad::Tape tape;
      ForwardOptions opts;
      opts.training = true;
      opts.dropout_seed = derive_seed(dropout_root, static_cast<std::uint64_t>(epoch));
      auto out = forward(tape, model, ops, g.features, opts);
      const auto loss = training_loss(tape, model, out, g.labels, split.train);
      tape.backward(loss);
      const double lv = tape.value(loss)(0, 0);
      result.train_loss.push_back(std::isfinite(lv) ? lv : kNaN);
      for (auto& e : out.stability) log.add(std::move(e), epoch);
      result.grad_norm_het.push_back(branch_grad_norm(tagged, Branch::het));
      result.grad_norm_stab.push_back(branch_grad_norm(tagged, Branch::stab));
      result.grad_norm_fused.push_back(branch_grad_norm(tagged, Branch::fused));
      std::map<std::string, double> grad_peak;
      for (auto* p : params) grad_peak[p->name] = finite_probe(p->grad).max_abs;
      for (const auto& name : adam_step(params, train_cfg).skipped) {
        StabilityEvent e;
        e.branch = branch_of.at(name);
        e.site = StabilityEvent::Site::gradient;
        e.param = name;
        e.max_abs_before = grad_peak.at(name);
        log.add(std::move(e), epoch);
      }
    }
    ad::Tape tape;
    const auto out = forward(tape, model, ops, g.features, {});
    const auto pred = predict(tape.value(out.out_final));
    const double val = accuracy(pred, g.labels, split.val);
    const double test = accuracy(pred, g.labels, split.test);
    result.val_acc.push_back(val);
    result.test_acc.push_back(test);
    if (val > best_val) {
      best_val = val;
      result.best_epoch = epoch;
      result.best_val_test_acc = test;
    }
    result.final_test_acc = test;
    last_collapsed = out.collapsed;
  }

  result.collapsed = last_collapsed;
  if (result.collapsed) {
    result.test_acc_reported = result.majority_acc;
  } else {
    result.test_acc_reported =
        train_cfg.selection == Selection::best_val ? result.best_val_test_acc : result.final_test_acc;
  }
  result.stability_events = log.take();
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

void to_json(nlohmann::json& j, const RunResult& r) {
  j = {{"variant", r.variant},
       {"K", r.order},
       {"seed", r.seed},
       {"collapsed", r.collapsed},
       {"test_acc_reported", r.test_acc_reported},
       {"best_epoch", r.best_epoch},
       {"best_val_test_acc", r.best_val_test_acc},
       {"final_test_acc", r.final_test_acc},
       {"majority_acc", r.majority_acc},
       {"train_loss", r.train_loss},
       {"val_acc", r.val_acc},
       {"test_acc", r.test_acc},
       {"grad_norm_het", r.grad_norm_het},
       {"grad_norm_stab", r.grad_norm_stab},
       {"grad_norm_fused", r.grad_norm_fused},
       {"stability_events", r.stability_events}};
}

std::string format_mean_std(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", mean, std);
  return buf;
}

CvResult summarize(std::vector<RunResult> runs) {
  CvResult cv;
  cv.folds = std::move(runs);
  if (cv.folds.empty()) return cv;
  // Shifted by the first value so identical runs give a std of exactly 0.
  const double shift = 100.0 * cv.folds.front().test_acc_reported;
  const double n = static_cast<double>(cv.folds.size());
  double sum = 0.0, sq = 0.0;
  for (const auto& r : cv.folds) {
    const double d = 100.0 * r.test_acc_reported - shift;
    sum += d;
    sq += d * d;
  }
  cv.mean = shift + sum / n;
  const double var = std::max(0.0, sq / n - (sum / n) * (sum / n));
  cv.std = std::sqrt(var);
  return cv;
}

CvResult cross_validate(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Graph& g,
                        std::span<const Split> splits, int jobs) {
  const auto ops = build_operators(g.adjacency);
  std::vector<RunResult> runs(splits.size());
  parallel_for(splits.size(), jobs, [&](std::size_t i) { runs[i] = train(model_cfg, train_cfg, g, ops, splits[i]); });
  return summarize(std::move(runs));
}

}  // namespace hybspec
