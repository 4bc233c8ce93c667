#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "hybspec/trainer.hpp"

using namespace hybspec;

namespace {

Graph sbm(std::size_t n, double h, std::uint64_t seed, int classes = 3) {
  SbmConfig cfg;
  cfg.n = n;
  cfg.classes = classes;
  cfg.features = 16;
  cfg.homophily = h;
  cfg.avg_degree = 6.0;
  cfg.seed = seed;
  return generate_sbm(cfg);
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("adam leaves parameters alone under a zero gradient without decay") {
  ad::Param p("p", DenseMatrix{{1.5, -2.0}});
  p.reached = true;
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  std::vector<ad::Param*> ps{&p};
  for (int i = 0; i < 3; ++i) adam_step(ps, cfg);
  CHECK(p.value == DenseMatrix{{1.5, -2.0}});
}

TEST_CASE("first adam step on a unit gradient moves by the learning rate") {
  ad::Param p("p", DenseMatrix{{0.0}});
  p.grad = DenseMatrix{{1.0}};
  p.reached = true;
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  std::vector<ad::Param*> ps{&p};
  adam_step(ps, cfg);
  // m_hat = 1, v_hat = 1 after bias correction: step = lr / (1 + eps).
  CHECK(p.value(0, 0) == doctest::Approx(-0.01 / (1.0 + 1e-8)).epsilon(1e-14));

  // Hand-rolled second step with weight decay folded into the gradient.
  ad::Param q("q", DenseMatrix{{2.0}});
  q.reached = true;
  TrainConfig wd;
  std::vector<ad::Param*> qs{&q};
  double theta = 2.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    const double grad = 0.5 * t;
    q.grad = DenseMatrix{{grad}};
    adam_step(qs, wd);
    const double g = grad + wd.weight_decay * theta;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    theta -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  CHECK(q.value(0, 0) == doctest::Approx(theta).epsilon(1e-14));
}

TEST_CASE("a NaN gradient freezes only its own tensor") {
  ad::Param a("a", DenseMatrix{{1.0, 1.0}}), b("b", DenseMatrix{{1.0}}), c("c", DenseMatrix{{1.0}});
  a.grad = DenseMatrix{{0.3, std::numeric_limits<double>::quiet_NaN()}};
  b.grad = DenseMatrix{{0.3}};
  a.reached = b.reached = true;
  c.grad = DenseMatrix{{5.0}};
  c.reached = false;
  std::vector<ad::Param*> ps{&a, &b, &c};
  auto report = adam_step(ps, TrainConfig{});
  CHECK(report.skipped == std::vector<std::string>{"a"});
  CHECK(a.value == DenseMatrix{{1.0, 1.0}});
  CHECK(a.steps == 0);
  CHECK(b.value(0, 0) < 1.0);
  CHECK(c.value(0, 0) == 1.0);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS(cfg.validate());
  cfg.epochs = 1;
  cfg.lr = 0.0;
  CHECK_THROWS(cfg.validate());
  cfg.lr = 0.02;
  cfg.selection = Selection::final_epoch;
  nlohmann::json j = cfg;
  auto back = j.get<TrainConfig>();
  CHECK(back.lr == 0.02);
  CHECK(back.selection == Selection::final_epoch);
  CHECK_THROWS(nlohmann::json{{"selection", "median"}}.get<TrainConfig>());
}

TEST_CASE("majority baseline") {
  std::vector<int> balanced{0, 1, 2, 0, 1, 2, 0, 1, 2};
  Mask all(9, 1);
  CHECK(majority_baseline(balanced, all, all) == doctest::Approx(1.0 / 3.0));
  std::vector<int> single(7, 0);
  CHECK(majority_baseline(single, Mask(7, 1), Mask(7, 1)) == 1.0);

  auto g = sbm(2000, 0.5, 4, 4);
  const Mask every(g.n, 1);
  const double acc = majority_baseline(g.labels, every, every);
  CHECK(acc >= 0.25);
  CHECK(acc <= 0.25 + 3.0 * std::sqrt(0.25 * 0.75 / 2000.0) + 0.01);

  // The class comes from the train mask; the score from the eval mask.
  std::vector<int> labels{1, 1, 0, 0, 0};
  CHECK(majority_baseline(labels, Mask{1, 1, 0, 0, 0}, Mask{0, 0, 1, 1, 1}) == 0.0);
}

TEST_CASE("training is deterministic per seed") {
  auto g = sbm(150, 0.2, 2);
  auto split = make_folds(g, 2, {}, 5)[0];
  for (auto v : {Variant::krawtchouk, Variant::hyb_v3, Variant::hyb_v4}) {
    ModelConfig mc;
    mc.variant = v;
    TrainConfig tc;
    tc.epochs = 15;
    tc.seed = 11;
    auto a = train(mc, tc, g, split), b = train(mc, tc, g, split);
    CHECK(same_bits(a.train_loss, b.train_loss));
    CHECK(same_bits(a.test_acc, b.test_acc));
    CHECK(nlohmann::json(a).dump() == nlohmann::json(b).dump());
    tc.seed = 12;
    CHECK_FALSE(same_bits(train(mc, tc, g, split).train_loss, a.train_loss));
  }
}

TEST_CASE("chebyshev learns a homophilous graph") {
  auto g = sbm(400, 0.9, 3);
  auto split = make_folds(g, 2, {}, 1)[0];
  ModelConfig mc;
  mc.variant = Variant::cheby;
  TrainConfig tc;
  tc.seed = 3;
  auto r = train(mc, tc, g, split);
  CHECK(r.test_acc_reported >= 0.85);
  CHECK(r.stability_events.empty());
  CHECK_FALSE(r.collapsed);
  CHECK(r.train_loss.size() == 200);
  CHECK(r.train_loss.back() < r.train_loss.front());
  CHECK(r.test_acc_reported == r.test_acc[static_cast<std::size_t>(r.best_epoch)]);
}

TEST_CASE("krawtchouk past its overflow order collapses to the majority rate") {
  auto g = sbm(400, 0.5, 3);
  auto split = make_folds(g, 2, {}, 1)[0];
  ModelConfig mc;
  mc.variant = Variant::krawtchouk;
  mc.order = 30;
  mc.raw_p_init = -16.0;
  TrainConfig tc;
  tc.epochs = 10;
  auto r = train(mc, tc, g, split);
  CHECK(r.collapsed);
  CHECK_FALSE(r.stability_events.empty());
  CHECK(r.test_acc_reported == r.majority_acc);
  for (std::size_t i = 1; i < r.stability_events.size(); ++i)
    CHECK(r.stability_events[i - 1].epoch <= r.stability_events[i].epoch);

  // v4 on the same setting keeps training through the stable branch.
  mc.variant = Variant::hyb_v4;
  auto v4 = train(mc, tc, g, split);
  CHECK_FALSE(v4.collapsed);
  bool excluded = false;
  for (const auto& e : v4.stability_events) excluded = excluded || e.site == StabilityEvent::Site::head;
  CHECK(excluded);
}

TEST_CASE("v4 with the Krawtchouk head excluded trains exactly like chebyshev") {
  auto g = sbm(300, 0.3, 8);
  auto split = make_folds(g, 2, {}, 2)[0];
  ModelConfig mc;
  mc.order = 25;
  mc.raw_p_init = -16.0;
  TrainConfig tc;
  tc.epochs = 30;
  tc.seed = 21;
  mc.variant = Variant::cheby;
  auto cheby = train(mc, tc, g, split);
  mc.variant = Variant::hyb_v4;
  auto v4 = train(mc, tc, g, split);
  REQUIRE(std::all_of(v4.grad_norm_het.begin(), v4.grad_norm_het.end(), [](double x) { return x == 0.0; }));
  CHECK(same_bits(cheby.train_loss, v4.train_loss));
  CHECK(same_bits(cheby.test_acc, v4.test_acc));
}

TEST_CASE("cross validation runs one model per fold") {
  auto g = sbm(200, 0.9, 6);
  auto folds = make_folds(g, 10, {}, 3);
  ModelConfig mc;
  mc.variant = Variant::cheby;
  mc.order = 2;
  TrainConfig tc;
  tc.epochs = 20;
  auto cv = cross_validate(mc, tc, g, folds, 2);
  REQUIRE(cv.folds.size() == 10);
  for (const auto& s : folds) {
    for (std::size_t i = 0; i < g.n; ++i) CHECK(s.test[i] + s.train[i] + s.val[i] == 1);
  }
  auto seq = cross_validate(mc, tc, g, folds, 1);
  CHECK(seq.mean == cv.mean);
  CHECK(seq.std == cv.std);
}

TEST_CASE("summary statistics and rendering") {
  CHECK(format_mean_std(82.16, 6.64) == "82.16 ± 6.64");
  CHECK(format_mean_std(33.3333, 0.0) == "33.33 ± 0.00");

  std::vector<RunResult> same(10);
  for (auto& r : same) r.test_acc_reported = 1.0 / 3.0;
  auto cv = summarize(same);
  CHECK(cv.std == 0.0);
  CHECK(cv.mean == doctest::Approx(100.0 / 3.0));

  std::vector<RunResult> two(2);
  two[0].test_acc_reported = 0.5;
  two[1].test_acc_reported = 0.7;
  auto s = summarize(two);
  CHECK(s.mean == doctest::Approx(60.0));
  CHECK(s.std == doctest::Approx(10.0));  // population, not sample
}

TEST_CASE("run results serialise without wall time") {
  RunResult r;
  r.variant = "cheby";
  r.wall_seconds = 3.0;
  r.train_loss = {1.0, std::numeric_limits<double>::quiet_NaN()};
  auto j = nlohmann::json(r);
  CHECK_FALSE(j.contains("wall_seconds"));
  CHECK(j["train_loss"][1].dump() == "null");
}
