#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hybspec/autodiff.hpp"
#include "hybspec/graph.hpp"
#include "hybspec/poly_filters.hpp"
#include "json.hpp"

namespace hybspec {

enum class Variant { cheby, krawtchouk, hyb_v3, hyb_v4 };
enum class FusionGuard { off, mask_nonfinite };
/// het = Krawtchouk side, stab = Chebyshev side, fused = shared (v3 head).
enum class Branch { het, stab, fused };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);
const char* branch_name(Branch b);

struct ModelConfig {
  Variant variant = Variant::cheby;
  int order = 3;  // polynomial degree K
  int hidden = 16;
  double dropout = 0.5;
  /// true: ReLU(Dropout(x)) as in the fusion rule; false: Dropout(ReLU(x)).
  bool relu_after_dropout = true;
  FusionGuard fusion_guard = FusionGuard::mask_nonfinite;
  /// Krawtchouk lattice size N; 0 means N = order.
  int lattice = 0;
  /// Pre-sigmoid Krawtchouk shape at initialisation (0 gives p = 0.5).
  double raw_p_init = 0.0;
  /// Divide each emitted Krawtchouk order by its max-abs (treated as a constant).
  bool normalize_orders = false;
  /// v4 only: add per-branch NLL terms to the fused loss.
  bool aux_branch_losses = false;

  int lattice_size() const { return lattice > 0 ? lattice : order; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

struct ConvLayerParams {
  FilterKind kind = FilterKind::chebyshev;
  Branch branch = Branch::stab;
  int layer = 1;
  std::vector<ad::Param> weights;  // order + 1 matrices, in x out
  std::optional<ad::Param> raw_p;  // Krawtchouk only, 1x1

  int order() const { return static_cast<int>(weights.size()) - 1; }
  std::size_t in_features() const { return weights.front().value.rows(); }
  std::size_t out_features() const { return weights.front().value.cols(); }
};

struct Model {
  ModelConfig config;
  std::size_t in_features = 0;
  std::size_t classes = 0;
  std::vector<ConvLayerParams> het;   // Krawtchouk convs, layer order
  std::vector<ConvLayerParams> stab;  // Chebyshev convs, layer order
  std::optional<ad::Param> projection;  // v3: 2C -> C

  std::vector<ad::Param*> parameters();
  std::vector<std::pair<Branch, ad::Param*>> tagged_parameters();
};

/// Centered-uniform weights with bound 1/sqrt(fan_in) per order; raw_p from
/// the config. Each branch draws from its own stream so a branch is
/// initialised identically in single-branch and late-fusion models.
Model init_model(const ModelConfig& cfg, std::size_t in_features, std::size_t classes, std::uint64_t seed);

std::size_t parameter_count(Model& model);
/// Closed-form totals (see README, "Parameter counts").
std::size_t expected_parameter_count(const ModelConfig& cfg, std::size_t in_features, std::size_t classes);

struct StabilityEvent {
  enum class Site { basis_order, head, gradient };

  int epoch = -1;
  Branch branch = Branch::fused;
  Site site = Site::head;
  int layer = -1;  // 1-based conv layer
  int order = -1;  // basis order for basis_order events
  std::string param;  // parameter name for gradient events
  double max_abs_before = 0.0;

  /// Identity of the location, ignoring epoch and magnitude.
  std::string key() const;
};

const char* site_name(StabilityEvent::Site s);
void to_json(nlohmann::json& j, const StabilityEvent& e);

/// Overwrites one basis entry with NaN; used to demonstrate poisoning.
struct NanInjection {
  Branch branch = Branch::het;
  int layer = 1;
  int order = 1;
  std::size_t row = 0;
  std::size_t col = 0;
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  std::optional<NanInjection> inject;
};

/// Heads of one forward pass. out_final is always set; out_het/out_stab are
/// the per-branch heads of late fusion.
struct BranchOutputs {
  ad::NodeId out_final;
  std::optional<ad::NodeId> out_het;
  std::optional<ad::NodeId> out_stab;
  bool het_excluded = false;
  bool stab_excluded = false;
  /// No finite head survives (single branch / v3: the head is non-finite).
  bool collapsed = false;
  std::vector<StabilityEvent> stability;
};

/// Sum_k (P_k X) W_k with the basis built on the matching operator.
ad::NodeId conv_forward(ad::Tape& tape, ConvLayerParams& conv, const SpectralOperators& ops, ad::NodeId x,
                        const ModelConfig& cfg, std::vector<StabilityEvent>* events = nullptr,
                        const std::optional<NanInjection>& inject = std::nullopt);

BranchOutputs single_branch_forward(ad::Tape& tape, Model& model, const SpectralOperators& ops,
                                    const DenseMatrix& features, const ForwardOptions& opts);
BranchOutputs hyb_v3_forward(ad::Tape& tape, Model& model, const SpectralOperators& ops,
                             const DenseMatrix& features, const ForwardOptions& opts);
BranchOutputs hyb_v4_forward(ad::Tape& tape, Model& model, const SpectralOperators& ops,
                             const DenseMatrix& features, const ForwardOptions& opts);
/// Dispatches on model.config.variant.
BranchOutputs forward(ad::Tape& tape, Model& model, const SpectralOperators& ops, const DenseMatrix& features,
                      const ForwardOptions& opts);

/// NLL on the fused head, plus per-branch terms when aux_branch_losses is set.
ad::NodeId training_loss(ad::Tape& tape, const Model& model, const BranchOutputs& out,
                         std::span<const int> labels, const Mask& mask);

/// Row argmax; rows with any non-finite entry map to -1.
std::vector<int> predict(const DenseMatrix& log_probs);

/// Smallest order among candidates at which an untrained Krawtchouk-only
/// model built from base (variant overridden) emits a non-finite head on g.
std::optional<int> measure_overflow_order(const Graph& g, const ModelConfig& base, std::span<const int> candidates,
                                          std::uint64_t seed);

struct LayerResponse {
  std::vector<double> mean;  // response of the channel-averaged weights
  std::vector<double> gain;  // Frobenius norm of sum_k P_k(lambda) W_k
};

/// Frequency response of a conv layer on a grid in [-1,1] (Chebyshev) or
/// [0,1] (Krawtchouk).
LayerResponse layer_response(const ConvLayerParams& conv, const ModelConfig& cfg, std::span<const double> grid);

void save_checkpoint(Model& model, const std::filesystem::path& path);
/// Throws std::runtime_error on a malformed or incompatible file.
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace hybspec
