#include "hybspec/models.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>

#include "hybspec/random.hpp"

namespace hybspec {

namespace {

constexpr int kCheckpointVersion = 1;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

ad::Param uniform_param(std::string name, std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  DenseMatrix m(rows, cols);
  for (double& v : m.values()) v = bound * (2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0);
  return ad::Param(std::move(name), std::move(m));
}

ConvLayerParams make_conv(FilterKind kind, Branch branch, int layer, std::size_t in, std::size_t out,
                          const ModelConfig& cfg, const std::string& prefix, Rng& rng) {
  ConvLayerParams conv;
  conv.kind = kind;
  conv.branch = branch;
  conv.layer = layer;
  for (int k = 0; k <= cfg.order; ++k)
    conv.weights.push_back(uniform_param(prefix + ".w" + std::to_string(k), in, out, rng));
  if (kind == FilterKind::krawtchouk) conv.raw_p = ad::Param(prefix + ".raw_p", DenseMatrix(1, 1, cfg.raw_p_init));
  return conv;
}

std::string conv_prefix(Branch b, int layer) {
  return std::string(branch_name(b)) + ".conv" + std::to_string(layer);
}

ad::NodeId activation(ad::Tape& tape, ad::NodeId x, const ModelConfig& cfg, Rng& rng, bool training) {
  if (cfg.relu_after_dropout) return tape.relu(tape.dropout(x, cfg.dropout, rng, training));
  return tape.dropout(tape.relu(x), cfg.dropout, rng, training);
}

/// Records a head event when the log-probabilities are non-finite.
bool probe_head(const ad::Tape& tape, ad::NodeId logits, ad::NodeId head, Branch branch,
                std::vector<StabilityEvent>& events) {
  if (finite_probe(tape.value(head)).is_finite) return true;
  StabilityEvent e;
  e.branch = branch;
  e.site = StabilityEvent::Site::head;
  e.max_abs_before = finite_probe(tape.value(logits)).max_abs;
  events.push_back(e);
  return false;
}

struct BranchHead {
  ad::NodeId logits;
  ad::NodeId head;
};

BranchHead two_layer(ad::Tape& tape, std::vector<ConvLayerParams>& convs, const SpectralOperators& ops,
                     ad::NodeId x, const ModelConfig& cfg, Rng& rng, const ForwardOptions& opts,
                     std::vector<StabilityEvent>& events) {
  ad::NodeId h = conv_forward(tape, convs[0], ops, x, cfg, &events, opts.inject);
  h = activation(tape, h, cfg, rng, opts.training);
  const ad::NodeId logits = conv_forward(tape, convs[1], ops, h, cfg, &events, opts.inject);
  return {logits, tape.log_softmax_rows(logits)};
}

void require_variant(const Model& m, std::initializer_list<Variant> allowed, const char* fn) {
  for (auto v : allowed)
    if (m.config.variant == v) return;
  throw std::invalid_argument(std::string(fn) + ": wrong model variant " + variant_name(m.config.variant));
}

nlohmann::json matrix_to_json(const DenseMatrix& m) {
  nlohmann::json data = nlohmann::json::array();
  for (double v : m.values()) {
    if (std::isfinite(v)) data.push_back(v);
    else data.push_back(nullptr);
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

DenseMatrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  std::vector<double> data;
  for (const auto& v : j.at("data")) data.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
  return DenseMatrix(rows, cols, std::move(data));
}

}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::cheby: return "cheby";
    case Variant::krawtchouk: return "krawtchouk";
    case Variant::hyb_v3: return "hyb_v3";
    case Variant::hyb_v4: return "hyb_v4";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  if (name == "cheby" || name == "chebynet") return Variant::cheby;
  if (name == "krawtchouk" || name == "krawtchouknet") return Variant::krawtchouk;
  if (name == "hyb_v3" || name == "v3") return Variant::hyb_v3;
  if (name == "hyb_v4" || name == "v4") return Variant::hyb_v4;
  throw std::invalid_argument("unknown model variant '" + name + "'");
}

const char* branch_name(Branch b) {
  switch (b) {
    case Branch::het: return "het";
    case Branch::stab: return "stab";
    case Branch::fused: return "fused";
  }
  return "unknown";
}

const char* site_name(StabilityEvent::Site s) {
  switch (s) {
    case StabilityEvent::Site::basis_order: return "basis_order";
    case StabilityEvent::Site::head: return "head";
    case StabilityEvent::Site::gradient: return "gradient";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  if (order < 1) throw std::invalid_argument("ModelConfig: order K must be >= 1");
  if (hidden < 1) throw std::invalid_argument("ModelConfig: hidden width must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("ModelConfig: dropout must lie in [0, 1)");
  if (lattice != 0 && lattice < order) throw std::invalid_argument("ModelConfig: lattice must be >= order");
  if (!std::isfinite(raw_p_init)) throw std::invalid_argument("ModelConfig: raw_p_init must be finite");
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = {{"variant", variant_name(cfg.variant)},
       {"K", cfg.order},
       {"hidden", cfg.hidden},
       {"dropout", cfg.dropout},
       {"relu_after_dropout", cfg.relu_after_dropout},
       {"fusion_guard", cfg.fusion_guard == FusionGuard::off ? "off" : "mask_nonfinite"},
       {"lattice", cfg.lattice},
       {"raw_p_init", cfg.raw_p_init},
       {"normalize_orders", cfg.normalize_orders},
       {"aux_branch_losses", cfg.aux_branch_losses}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  ModelConfig d;
  cfg.variant = parse_variant(j.value("variant", std::string(variant_name(d.variant))));
  cfg.order = j.value("K", d.order);
  cfg.hidden = j.value("hidden", d.hidden);
  cfg.dropout = j.value("dropout", d.dropout);
  cfg.relu_after_dropout = j.value("relu_after_dropout", d.relu_after_dropout);
  const auto guard = j.value("fusion_guard", std::string("mask_nonfinite"));
  if (guard != "off" && guard != "mask_nonfinite") throw std::invalid_argument("unknown fusion_guard '" + guard + "'");
  cfg.fusion_guard = guard == "off" ? FusionGuard::off : FusionGuard::mask_nonfinite;
  cfg.lattice = j.value("lattice", d.lattice);
  cfg.raw_p_init = j.value("raw_p_init", d.raw_p_init);
  cfg.normalize_orders = j.value("normalize_orders", d.normalize_orders);
  cfg.aux_branch_losses = j.value("aux_branch_losses", d.aux_branch_losses);
}

std::vector<ad::Param*> Model::parameters() {
  std::vector<ad::Param*> out;
  for (auto& [b, p] : tagged_parameters()) out.push_back(p);
  return out;
}

std::vector<std::pair<Branch, ad::Param*>> Model::tagged_parameters() {
  std::vector<std::pair<Branch, ad::Param*>> out;
  for (auto* group : {&het, &stab}) {
    for (auto& conv : *group) {
      for (auto& w : conv.weights) out.emplace_back(conv.branch, &w);
      if (conv.raw_p) out.emplace_back(conv.branch, &*conv.raw_p);
    }
  }
  if (projection) out.emplace_back(Branch::fused, &*projection);
  return out;
}

Model init_model(const ModelConfig& cfg, std::size_t in_features, std::size_t classes, std::uint64_t seed) {
  cfg.validate();
  if (in_features == 0 || classes == 0) throw std::invalid_argument("init_model: empty input or class dimension");
  Model m;
  m.config = cfg;
  m.in_features = in_features;
  m.classes = classes;
  const auto hidden = static_cast<std::size_t>(cfg.hidden);
  Rng het_rng(derive_seed(seed, "init/het"));
  Rng stab_rng(derive_seed(seed, "init/stab"));

  const bool uses_het = cfg.variant != Variant::cheby;
  const bool uses_stab = cfg.variant != Variant::krawtchouk;
  // v3 convs in layer 2 read the 2H concatenation.
  const std::size_t layer2_in = cfg.variant == Variant::hyb_v3 ? 2 * hidden : hidden;
  if (uses_het) {
    m.het.push_back(make_conv(FilterKind::krawtchouk, Branch::het, 1, in_features, hidden, cfg,
                              conv_prefix(Branch::het, 1), het_rng));
    m.het.push_back(make_conv(FilterKind::krawtchouk, Branch::het, 2, layer2_in, classes, cfg,
                              conv_prefix(Branch::het, 2), het_rng));
  }
  if (uses_stab) {
    m.stab.push_back(make_conv(FilterKind::chebyshev, Branch::stab, 1, in_features, hidden, cfg,
                               conv_prefix(Branch::stab, 1), stab_rng));
    m.stab.push_back(make_conv(FilterKind::chebyshev, Branch::stab, 2, layer2_in, classes, cfg,
                               conv_prefix(Branch::stab, 2), stab_rng));
  }
  if (cfg.variant == Variant::hyb_v3) {
    Rng proj_rng(derive_seed(seed, "init/fused"));
    m.projection = uniform_param("fused.proj", 2 * classes, classes, proj_rng);
  }
  return m;
}

std::size_t parameter_count(Model& model) {
  std::size_t total = 0;
  for (auto* p : model.parameters()) total += p->value.size();
  return total;
}

std::size_t expected_parameter_count(const ModelConfig& cfg, std::size_t f, std::size_t c) {
  const std::size_t k1 = static_cast<std::size_t>(cfg.order) + 1;
  const auto h = static_cast<std::size_t>(cfg.hidden);
  const std::size_t single = k1 * (f * h + h * c);
  switch (cfg.variant) {
    case Variant::cheby: return single;
    case Variant::krawtchouk: return single + 2;
    case Variant::hyb_v3: return 2 * k1 * (f * h + 2 * h * c) + 2 + 2 * c * c;
    case Variant::hyb_v4: return 2 * single + 2;
  }
  return 0;
}

std::string StabilityEvent::key() const {
  return std::string(branch_name(branch)) + "/" + site_name(site) + "/" + std::to_string(layer) + "/" +
         std::to_string(order) + "/" + param;
}

void to_json(nlohmann::json& j, const StabilityEvent& e) {
  j = {{"epoch", e.epoch},
       {"branch", branch_name(e.branch)},
       {"site", site_name(e.site)},
       {"layer", e.layer},
       {"order", e.order},
       {"param", e.param},
       {"max_abs_before", e.max_abs_before}};
}

ad::NodeId conv_forward(ad::Tape& tape, ConvLayerParams& conv, const SpectralOperators& ops, ad::NodeId x,
                        const ModelConfig& cfg, std::vector<StabilityEvent>* events,
                        const std::optional<NanInjection>& inject) {
  const int order = conv.order();
  const auto& xv = tape.value(x);
  if (xv.cols() != conv.in_features()) {
    throw std::invalid_argument("conv_forward: input has " + std::to_string(xv.cols()) + " features, layer expects " +
                                std::to_string(conv.in_features()));
  }
  const std::size_t width = xv.cols();
  std::vector<ad::NodeId> basis{x};
  if (conv.kind == FilterKind::chebyshev) {
    if (order >= 1) basis.push_back(tape.spmm(ops.l_hat, x));
    for (int k = 1; k < order; ++k) {
      const auto lt = tape.spmm(ops.l_hat, basis[static_cast<std::size_t>(k)]);
      basis.push_back(tape.add(tape.scale(lt, 2.0), tape.scale(basis[static_cast<std::size_t>(k) - 1], -1.0)));
    }
  } else {
    if (!conv.raw_p) throw std::invalid_argument("conv_forward: Krawtchouk layer without raw_p");
    const auto p = tape.sigmoid(tape.param(*conv.raw_p));
    const auto stack = tape.krawtchouk_basis(ops.l_scaled, x, p, order, cfg.lattice_size());
    basis.clear();
    for (int k = 0; k <= order; ++k) basis.push_back(tape.slice_cols(stack, static_cast<std::size_t>(k) * width, width));
    if (cfg.normalize_orders) {
      for (auto& b : basis) {
        const double m = finite_probe(tape.value(b)).max_abs;
        if (m > 0.0 && std::isfinite(m)) b = tape.scale(b, 1.0 / m);
      }
    }
  }

  if (inject && inject->branch == conv.branch && inject->layer == conv.layer && inject->order <= order) {
    auto& target = basis[static_cast<std::size_t>(inject->order)];
    DenseMatrix poison(tape.value(target).rows(), tape.value(target).cols());
    poison(inject->row, inject->col) = std::numeric_limits<double>::quiet_NaN();
    target = tape.add(target, tape.constant(std::move(poison)));
  }

  if (events) {
    double last_finite = 0.0;
    for (int k = 0; k <= order; ++k) {
      const auto probe = finite_probe(tape.value(basis[static_cast<std::size_t>(k)]));
      if (!probe.is_finite) {
        StabilityEvent e;
        e.branch = conv.branch;
        e.site = StabilityEvent::Site::basis_order;
        e.layer = conv.layer;
        e.order = k;
        e.max_abs_before = last_finite;
        events->push_back(e);
        break;
      }
      last_finite = probe.max_abs;
    }
  }

  if (conv.weights.size() != basis.size()) throw std::invalid_argument("conv_forward: order mismatch");
  ad::NodeId out = tape.matmul(basis[0], tape.param(conv.weights[0]));
  for (std::size_t k = 1; k < basis.size(); ++k) out = tape.add(out, tape.matmul(basis[k], tape.param(conv.weights[k])));
  return out;
}

BranchOutputs single_branch_forward(ad::Tape& tape, Model& model, const SpectralOperators& ops,
                                    const DenseMatrix& features, const ForwardOptions& opts) {
  require_variant(model, {Variant::cheby, Variant::krawtchouk}, "single_branch_forward");
  const bool het = model.config.variant == Variant::krawtchouk;
  const Branch branch = het ? Branch::het : Branch::stab;
  auto& convs = het ? model.het : model.stab;
  Rng rng(derive_seed(opts.dropout_seed, branch_name(branch)));
  BranchOutputs out;
  const auto x = tape.constant(features);
  const auto bh = two_layer(tape, convs, ops, x, model.config, rng, opts, out.stability);
  out.out_final = bh.head;
  (het ? out.out_het : out.out_stab) = bh.head;
  out.collapsed = !probe_head(tape, bh.logits, bh.head, branch, out.stability);
  return out;
}

BranchOutputs hyb_v3_forward(ad::Tape& tape, Model& model, const SpectralOperators& ops,
                             const DenseMatrix& features, const ForwardOptions& opts) {
  require_variant(model, {Variant::hyb_v3}, "hyb_v3_forward");
  const auto& cfg = model.config;
  Rng rng(derive_seed(opts.dropout_seed, branch_name(Branch::fused)));
  BranchOutputs out;
  const auto x = tape.constant(features);
  const auto het1 = conv_forward(tape, model.het[0], ops, x, cfg, &out.stability, opts.inject);
  const auto stab1 = conv_forward(tape, model.stab[0], ops, x, cfg, &out.stability, opts.inject);
  const auto h = activation(tape, tape.concat_cols(het1, stab1), cfg, rng, opts.training);
  const auto het2 = conv_forward(tape, model.het[1], ops, h, cfg, &out.stability, opts.inject);
  const auto stab2 = conv_forward(tape, model.stab[1], ops, h, cfg, &out.stability, opts.inject);
  const auto logits = tape.matmul(tape.concat_cols(het2, stab2), tape.param(*model.projection));
  out.out_final = tape.log_softmax_rows(logits);
  out.collapsed = !probe_head(tape, logits, out.out_final, Branch::fused, out.stability);
  return out;
}

BranchOutputs hyb_v4_forward(ad::Tape& tape, Model& model, const SpectralOperators& ops,
                             const DenseMatrix& features, const ForwardOptions& opts) {
  require_variant(model, {Variant::hyb_v4}, "hyb_v4_forward");
  const auto& cfg = model.config;
  BranchOutputs out;
  const auto x = tape.constant(features);
  Rng het_rng(derive_seed(opts.dropout_seed, branch_name(Branch::het)));
  Rng stab_rng(derive_seed(opts.dropout_seed, branch_name(Branch::stab)));
  const auto het = two_layer(tape, model.het, ops, x, cfg, het_rng, opts, out.stability);
  const auto stab = two_layer(tape, model.stab, ops, x, cfg, stab_rng, opts, out.stability);
  out.out_het = het.head;
  out.out_stab = stab.head;
  const bool het_ok = probe_head(tape, het.logits, het.head, Branch::het, out.stability);
  const bool stab_ok = probe_head(tape, stab.logits, stab.head, Branch::stab, out.stability);

  if (cfg.fusion_guard == FusionGuard::off || (het_ok && stab_ok)) {
    out.out_final = tape.mean_pair(het.head, stab.head);
    out.collapsed = !finite_probe(tape.value(out.out_final)).is_finite;
  } else if (het_ok) {
    out.out_final = het.head;
    out.stab_excluded = true;
  } else if (stab_ok) {
    out.out_final = stab.head;
    out.het_excluded = true;
  } else {
    out.out_final = tape.mean_pair(het.head, stab.head);
    out.het_excluded = out.stab_excluded = true;
    out.collapsed = true;
  }
  return out;
}

BranchOutputs forward(ad::Tape& tape, Model& model, const SpectralOperators& ops, const DenseMatrix& features,
                      const ForwardOptions& opts) {
  switch (model.config.variant) {
    case Variant::cheby:
    case Variant::krawtchouk: return single_branch_forward(tape, model, ops, features, opts);
    case Variant::hyb_v3: return hyb_v3_forward(tape, model, ops, features, opts);
    case Variant::hyb_v4: return hyb_v4_forward(tape, model, ops, features, opts);
  }
  throw std::logic_error("forward: unhandled variant");
}

ad::NodeId training_loss(ad::Tape& tape, const Model& model, const BranchOutputs& out, std::span<const int> labels,
                         const Mask& mask) {
  ad::NodeId loss = tape.nll_loss(out.out_final, labels, mask);
  if (model.config.variant == Variant::hyb_v4 && model.config.aux_branch_losses) {
    if (out.out_het && !out.het_excluded) loss = tape.add(loss, tape.nll_loss(*out.out_het, labels, mask));
    if (out.out_stab && !out.stab_excluded) loss = tape.add(loss, tape.nll_loss(*out.out_stab, labels, mask));
  }
  return loss;
}

std::vector<int> predict(const DenseMatrix& log_probs) {
  std::vector<int> out(log_probs.rows(), -1);
  for (std::size_t r = 0; r < log_probs.rows(); ++r) {
    const auto row = log_probs.row(r);
    if (!finite_probe(row).is_finite) continue;
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
      if (row[c] > row[best]) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

std::optional<int> measure_overflow_order(const Graph& g, const ModelConfig& base, std::span<const int> candidates,
                                          std::uint64_t seed) {
  const auto ops = build_operators(g.adjacency);
  for (int k : candidates) {
    ModelConfig cfg = base;
    cfg.variant = Variant::krawtchouk;
    cfg.order = k;
    if (cfg.lattice != 0 && cfg.lattice < k) cfg.lattice = 0;
    Model m = init_model(cfg, g.num_features(), static_cast<std::size_t>(g.num_classes), seed);
    ad::Tape tape;
    if (forward(tape, m, ops, g.features, {}).collapsed) return k;
  }
  return std::nullopt;
}

LayerResponse layer_response(const ConvLayerParams& conv, const ModelConfig& cfg, std::span<const double> grid) {
  const int order = conv.order();
  std::optional<KrawtchoukShape> shape;
  if (conv.kind == FilterKind::krawtchouk) shape = KrawtchoukShape{sigmoid(conv.raw_p->value(0, 0)), cfg.lattice_size()};
  std::vector<double> mean_weights;
  for (const auto& w : conv.weights) {
    double s = 0.0;
    for (double v : w.value.values()) s += v;
    mean_weights.push_back(s / static_cast<double>(w.value.size()));
  }
  LayerResponse out;
  out.mean = scalar_response(conv.kind, mean_weights, shape, grid);
  for (double lambda : grid) {
    const auto basis = conv.kind == FilterKind::chebyshev
                           ? chebyshev_values(order, lambda)
                           : krawtchouk_values(order, lambda * shape->lattice, *shape);
    DenseMatrix acc(conv.in_features(), conv.out_features());
    for (int k = 0; k <= order; ++k) {
      const auto src = conv.weights[static_cast<std::size_t>(k)].value.values();
      auto dst = acc.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += basis[static_cast<std::size_t>(k)] * src[i];
    }
    double fro = 0.0;
    for (double v : acc.values()) fro += v * v;
    out.gain.push_back(std::sqrt(fro));
  }
  return out;
}

void save_checkpoint(Model& model, const std::filesystem::path& path) {
  nlohmann::json params = nlohmann::json::object();
  for (auto* p : model.parameters()) params[p->name] = matrix_to_json(p->value);
  nlohmann::json doc{{"format", "hybspec-checkpoint"},
                     {"version", kCheckpointVersion},
                     {"config", model.config},
                     {"in_features", model.in_features},
                     {"classes", model.classes},
                     {"params", std::move(params)}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << doc.dump(1) << '\n';
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != "hybspec-checkpoint")
      throw std::runtime_error("not a hybspec checkpoint");
    if (doc.at("version").get<int>() != kCheckpointVersion)
      throw std::runtime_error("unsupported checkpoint version " + doc.at("version").dump());
    const auto cfg = doc.at("config").get<ModelConfig>();
    Model m = init_model(cfg, doc.at("in_features").get<std::size_t>(), doc.at("classes").get<std::size_t>(), 0);
    const auto& params = doc.at("params");
    for (auto* p : m.parameters()) {
      DenseMatrix value = matrix_from_json(params.at(p->name));
      if (!value.same_shape(p->value)) throw std::runtime_error("shape mismatch for parameter " + p->name);
      p->value = std::move(value);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint " + path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace hybspec
