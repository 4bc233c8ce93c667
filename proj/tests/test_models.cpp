#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "hybspec/models.hpp"

using namespace hybspec;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  Graph g;
  SpectralOperators ops;
  Mask all;

  explicit Fixture(std::size_t n = 60, double h = 0.5, std::uint64_t seed = 1) {
    SbmConfig cfg;
    cfg.n = n;
    cfg.classes = 3;
    cfg.features = 5;
    cfg.homophily = h;
    cfg.avg_degree = 5.0;
    cfg.seed = seed;
    g = generate_sbm(cfg);
    ops = build_operators(g.adjacency);
    all = Mask(g.n, 1);
  }

  Model model(Variant v, int order = 3, std::uint64_t seed = 7, double raw_p = 0.0) const {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.order = order;
    cfg.hidden = 8;
    cfg.raw_p_init = raw_p;
    return init_model(cfg, g.num_features(), static_cast<std::size_t>(g.num_classes), seed);
  }
};

std::vector<DenseMatrix> grads(std::vector<ConvLayerParams>& convs) {
  std::vector<DenseMatrix> out;
  for (auto& c : convs)
    for (auto& w : c.weights) out.push_back(w.grad);
  return out;
}

bool bitwise_equal(const std::vector<DenseMatrix>& a, const std::vector<DenseMatrix>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].same_shape(b[i])) return false;
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      const double x = a[i].values()[j], y = b[i].values()[j];
      if (std::memcmp(&x, &y, sizeof x) != 0) return false;
    }
  }
  return true;
}

double max_row_mass_error(const DenseMatrix& logp) {
  double worst = 0.0;
  for (std::size_t r = 0; r < logp.rows(); ++r) {
    double s = 0.0;
    for (double v : logp.row(r)) s += std::exp(v);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

}  // namespace

TEST_CASE("conv with a single identity weight returns its input") {
  Fixture f(12);
  ConvLayerParams conv;
  conv.kind = FilterKind::chebyshev;
  conv.weights.emplace_back("w0", DenseMatrix::identity(f.g.num_features()));
  ad::Tape t;
  auto out = conv_forward(t, conv, f.ops, t.constant(f.g.features), ModelConfig{});
  CHECK(t.value(out) == f.g.features);
}

TEST_CASE("chebyshev conv on one node keeps only the order-0 term") {
  auto ops = build_operators(CsrMatrix::from_triplets(1, {}));
  ConvLayerParams conv;
  conv.weights.emplace_back("w0", DenseMatrix{{2.0, 1.0}});
  conv.weights.emplace_back("w1", DenseMatrix{{5.0, 7.0}});
  ad::Tape t;
  auto out = conv_forward(t, conv, ops, t.constant(DenseMatrix{{3.0}}), ModelConfig{});
  CHECK(t.value(out) == DenseMatrix{{6.0, 3.0}});
  ad::Tape t2;
  CHECK_THROWS_AS(conv_forward(t2, conv, ops, t2.constant(DenseMatrix{{3.0, 1.0}}), ModelConfig{}),
                  std::invalid_argument);
}

TEST_CASE("config validation and json round trip") {
  ModelConfig cfg;
  cfg.order = 0;
  CHECK_THROWS(cfg.validate());
  cfg.order = 3;
  cfg.hidden = 0;
  CHECK_THROWS(cfg.validate());
  cfg.hidden = 4;
  cfg.dropout = 1.0;
  CHECK_THROWS(cfg.validate());
  cfg.dropout = 0.3;
  cfg.variant = Variant::hyb_v4;
  cfg.fusion_guard = FusionGuard::off;
  cfg.raw_p_init = -2.5;
  nlohmann::json j = cfg;
  auto back = j.get<ModelConfig>();
  CHECK(back.variant == Variant::hyb_v4);
  CHECK(back.fusion_guard == FusionGuard::off);
  CHECK(back.raw_p_init == -2.5);
  CHECK(back.dropout == 0.3);
  CHECK_THROWS(parse_variant("gcn"));
}

TEST_CASE("parameter counts match the closed forms") {
  for (int order : {1, 3, 7}) {
    for (int hidden : {4, 16}) {
      for (auto v : {Variant::cheby, Variant::krawtchouk, Variant::hyb_v3, Variant::hyb_v4}) {
        ModelConfig cfg;
        cfg.variant = v;
        cfg.order = order;
        cfg.hidden = hidden;
        const std::size_t f = 11, c = 5;
        auto m = init_model(cfg, f, c, 3);
        const std::size_t k1 = static_cast<std::size_t>(order) + 1, h = static_cast<std::size_t>(hidden);
        std::size_t expect = 0;
        switch (v) {
          case Variant::cheby: expect = k1 * (f * h + h * c); break;
          case Variant::krawtchouk: expect = k1 * (f * h + h * c) + 2; break;
          case Variant::hyb_v3: expect = 2 * k1 * (f * h + 2 * h * c) + 2 + 2 * c * c; break;
          case Variant::hyb_v4: expect = 2 * k1 * (f * h + h * c) + 2; break;
        }
        CHECK(parameter_count(m) == expect);
        CHECK(expected_parameter_count(cfg, f, c) == expect);
      }
    }
  }
}

TEST_CASE("initialisation is seeded per branch") {
  Fixture f;
  auto a = f.model(Variant::hyb_v4), b = f.model(Variant::hyb_v4);
  auto cheby = f.model(Variant::cheby);
  auto kraw = f.model(Variant::krawtchouk);
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t k = 0; k < a.stab[l].weights.size(); ++k) {
      CHECK(a.stab[l].weights[k].value == b.stab[l].weights[k].value);
      CHECK(a.stab[l].weights[k].value == cheby.stab[l].weights[k].value);
      CHECK(a.het[l].weights[k].value == kraw.het[l].weights[k].value);
    }
    CHECK(a.het[l].raw_p->value(0, 0) == 0.0);
  }
  auto other = f.model(Variant::hyb_v4, 3, 8);
  CHECK_FALSE(other.stab[0].weights[0].value == a.stab[0].weights[0].value);
  // Centered uniform with bound 1/sqrt(fan_in).
  const double bound = 1.0 / std::sqrt(static_cast<double>(f.g.num_features()));
  for (double v : a.stab[0].weights[1].value.values()) CHECK(std::abs(v) <= bound);
}

TEST_CASE("every variant emits normalised log-probabilities") {
  Fixture f;
  for (auto v : {Variant::cheby, Variant::krawtchouk, Variant::hyb_v3, Variant::hyb_v4}) {
    auto m = f.model(v);
    ad::Tape t;
    auto out = forward(t, m, f.ops, f.g.features, {});
    CHECK_FALSE(out.collapsed);
    CHECK(out.stability.empty());
    CHECK(t.value(out.out_final).cols() == static_cast<std::size_t>(f.g.num_classes));
    if (v != Variant::hyb_v4) {
      CHECK(max_row_mass_error(t.value(out.out_final)) <= 1e-8);
      continue;
    }
    // The fused output is the plain mean of two log-prob heads, a geometric
    // mean in probability space: each head normalizes, the mean sums to <= 1.
    CHECK(max_row_mass_error(t.value(*out.out_het)) <= 1e-8);
    CHECK(max_row_mass_error(t.value(*out.out_stab)) <= 1e-8);
    const auto& fused = t.value(out.out_final);
    for (std::size_t r = 0; r < fused.rows(); ++r) {
      double s = 0.0;
      for (double e : fused.row(r)) s += std::exp(e);
      CHECK(s <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("late fusion averages the two heads when both are finite") {
  Fixture f;
  auto m = f.model(Variant::hyb_v4);
  ad::Tape t;
  auto out = forward(t, m, f.ops, f.g.features, {});
  REQUIRE(out.out_het);
  REQUIRE(out.out_stab);
  const auto& fin = t.value(out.out_final);
  const auto& het = t.value(*out.out_het);
  const auto& stab = t.value(*out.out_stab);
  for (std::size_t i = 0; i < fin.size(); ++i)
    CHECK(fin.values()[i] == 0.5 * (het.values()[i] + stab.values()[i]));
}

TEST_CASE("guard drops a non-finite Krawtchouk head and isolates gradients") {
  Fixture f;
  // Reference: ChebyNet alone with the same initial stable weights.
  auto cheby = f.model(Variant::cheby);
  ForwardOptions train_opts;
  train_opts.training = true;
  train_opts.dropout_seed = 99;
  {
    ad::Tape t;
    auto out = forward(t, cheby, f.ops, f.g.features, train_opts);
    t.backward(training_loss(t, cheby, out, f.g.labels, f.all));
  }
  const auto reference = grads(cheby.stab);

  for (int layer : {1, 2}) {
    for (int order : {0, 2, 3}) {
      auto m = f.model(Variant::hyb_v4);
      ForwardOptions opts = train_opts;
      opts.inject = NanInjection{Branch::het, layer, order, 4, 0};
      ad::Tape t;
      auto out = forward(t, m, f.ops, f.g.features, opts);
      CHECK(out.het_excluded);
      CHECK_FALSE(out.collapsed);
      CHECK(t.value(out.out_final) == t.value(*out.out_stab));
      t.backward(training_loss(t, m, out, f.g.labels, f.all));
      CHECK(bitwise_equal(grads(m.stab), reference));
      for (auto& conv : m.het) {
        for (auto& w : conv.weights) {
          CHECK_FALSE(w.reached);
          CHECK(finite_probe(w.grad).max_abs == 0.0);
        }
      }
    }
  }

  // Krawtchouk parameters that themselves produce NaN.
  auto m = f.model(Variant::hyb_v4);
  m.het[0].weights[1].value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  ad::Tape t;
  auto out = forward(t, m, f.ops, f.g.features, train_opts);
  CHECK(out.het_excluded);
  t.backward(training_loss(t, m, out, f.g.labels, f.all));
  CHECK(bitwise_equal(grads(m.stab), reference));
  bool head_event = false;
  for (const auto& e : out.stability) head_event = head_event || (e.site == StabilityEvent::Site::head && e.branch == Branch::het);
  CHECK(head_event);
}

TEST_CASE("without the guard, late fusion is poisoned too") {
  Fixture f;
  ModelConfig cfg;
  cfg.variant = Variant::hyb_v4;
  cfg.hidden = 8;
  cfg.fusion_guard = FusionGuard::off;
  auto m = init_model(cfg, f.g.num_features(), 3, 7);
  ForwardOptions opts;
  opts.inject = NanInjection{Branch::het, 1, 1, 0, 0};
  ad::Tape t;
  auto out = forward(t, m, f.ops, f.g.features, opts);
  CHECK(out.collapsed);
  CHECK_FALSE(finite_probe(t.value(out.out_final)).is_finite);
}

TEST_CASE("both heads non-finite marks the step collapsed") {
  Fixture f;
  auto m = f.model(Variant::hyb_v4);
  m.het[0].weights[0].value(0, 0) = std::numeric_limits<double>::infinity();
  m.stab[0].weights[0].value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  ad::Tape t;
  auto out = forward(t, m, f.ops, f.g.features, {});
  CHECK(out.collapsed);
  CHECK(out.het_excluded);
  CHECK(out.stab_excluded);
}

TEST_CASE("a single NaN in the early-fusion Krawtchouk basis poisons every gradient") {
  Fixture f;
  for (int order : {0, 1, 3}) {
    auto m = f.model(Variant::hyb_v3);
    ForwardOptions opts;
    opts.inject = NanInjection{Branch::het, 1, order, 2, 1};
    ad::Tape t;
    auto out = forward(t, m, f.ops, f.g.features, opts);
    CHECK(out.collapsed);
    t.backward(training_loss(t, m, out, f.g.labels, f.all));
    for (auto* p : m.parameters()) {
      INFO(p->name);
      CHECK_FALSE(finite_probe(p->grad).is_finite);
    }
  }
  // The guard setting has no effect on early fusion.
  ModelConfig cfg;
  cfg.variant = Variant::hyb_v3;
  cfg.fusion_guard = FusionGuard::mask_nonfinite;
  auto m = init_model(cfg, f.g.num_features(), 3, 1);
  ForwardOptions opts;
  opts.inject = NanInjection{Branch::het, 1, 2, 0, 0};
  ad::Tape t;
  CHECK(forward(t, m, f.ops, f.g.features, opts).collapsed);
}

TEST_CASE("basis overflow is recorded with the last finite magnitude") {
  Fixture f(400, 0.5, 3);
  auto m = f.model(Variant::krawtchouk, 30, 7, -16.0);
  ad::Tape t;
  auto out = forward(t, m, f.ops, f.g.features, {});
  CHECK(out.collapsed);
  REQUIRE_FALSE(out.stability.empty());
  bool basis = false;
  for (const auto& e : out.stability) {
    if (e.site != StabilityEvent::Site::basis_order) continue;
    basis = true;
    CHECK(e.branch == Branch::het);
    CHECK(e.max_abs_before > 1e100);
  }
  CHECK(basis);
  auto preds = predict(t.value(out.out_final));
  CHECK(std::count(preds.begin(), preds.end(), -1) > 0);
}

TEST_CASE("measured overflow order is the first collapsing candidate") {
  Fixture f(400, 0.5, 3);
  ModelConfig base;
  base.raw_p_init = -16.0;
  std::vector<int> ks{2, 5, 10, 15, 20, 25, 30};
  auto k = measure_overflow_order(f.g, base, ks, 5);
  REQUIRE(k.has_value());
  for (int cand : ks) {
    auto m = f.model(Variant::krawtchouk, cand, 5, -16.0);
    m.config.hidden = base.hidden;
    ModelConfig cfg = base;
    cfg.variant = Variant::krawtchouk;
    cfg.order = cand;
    auto fresh = init_model(cfg, f.g.num_features(), 3, 5);
    ad::Tape t;
    CHECK(forward(t, fresh, f.ops, f.g.features, {}).collapsed == (cand >= *k));
  }
  CHECK_FALSE(measure_overflow_order(f.g, ModelConfig{}, ks, 5).has_value());
}

TEST_CASE("predict marks non-finite rows") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  DenseMatrix lp{{-0.1, -2.0}, {nan, 0.0}, {-3.0, -0.01}};
  CHECK(predict(lp) == std::vector<int>{0, -1, 1});
}

TEST_CASE("untrained chebyshev K=1 has an affine mean response") {
  Fixture f;
  auto m = f.model(Variant::cheby, 1);
  std::vector<double> grid{-1.0, -0.5, 0.0, 0.5, 1.0};
  auto r = layer_response(m.stab[0], m.config, grid);
  const double d1 = r.mean[1] - r.mean[0];
  for (std::size_t i = 1; i < grid.size(); ++i) CHECK(r.mean[i] - r.mean[i - 1] == doctest::Approx(d1).epsilon(1e-12));
  for (double gval : r.gain) CHECK(gval > 0.0);
  CHECK_THROWS(layer_response(m.stab[0], m.config, std::vector<double>{1.5}));
}

TEST_CASE("checkpoints round trip and reject garbage") {
  Fixture f;
  auto dir = fs::temp_directory_path() / "hybspec_models_ckpt";
  fs::create_directories(dir);
  for (auto v : {Variant::krawtchouk, Variant::hyb_v3}) {
    auto m = f.model(v);
    m.het[0].raw_p->value(0, 0) = 0.375;
    save_checkpoint(m, dir / "m.json");
    auto back = load_checkpoint(dir / "m.json");
    CHECK(back.config.variant == v);
    auto pa = m.parameters(), pb = back.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i]->name == pb[i]->name);
      CHECK(pa[i]->value == pb[i]->value);
    }
  }
  std::ofstream(dir / "bad.json") << "{\"format\": \"something-else\"}";
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.json"), std::runtime_error);
  std::ofstream(dir / "broken.json") << "{not json";
  CHECK_THROWS_AS(load_checkpoint(dir / "broken.json"), std::runtime_error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.json"), std::runtime_error);
}
