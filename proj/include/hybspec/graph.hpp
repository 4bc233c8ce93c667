#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "hybspec/linalg.hpp"

namespace hybspec {

using Mask = std::vector<std::uint8_t>;

struct Split {
  Mask train;
  Mask val;
  Mask test;
};

std::size_t mask_count(const Mask& mask);

struct Graph {
  std::size_t n = 0;
  CsrMatrix adjacency;  // binary, symmetric, zero diagonal
  DenseMatrix features;
  std::vector<int> labels;
  int num_classes = 0;
  std::optional<Split> split;  // public split when supplied with the data

  std::size_t num_features() const { return features.cols(); }
  /// Throws std::invalid_argument if any Graph invariant is broken.
  void validate() const;
};

/// Fraction of undirected edges whose endpoints share a label.
double edge_homophily(const Graph& g);

/// I - D^{-1/2} A D^{-1/2}; the diagonal is always stored and isolated nodes get 1.
CsrMatrix sym_laplacian(const CsrMatrix& adjacency);
/// L_sym - I, spectrum in [-1, 1].
CsrMatrix l_hat(const CsrMatrix& l_sym);
/// 0.5 * L_sym, spectrum in [0, 1].
CsrMatrix l_scaled(const CsrMatrix& l_sym);

struct SpectralOperators {
  CsrMatrix l_sym;
  CsrMatrix l_hat;
  CsrMatrix l_scaled;
};

SpectralOperators build_operators(const CsrMatrix& adjacency);

struct SbmConfig {
  std::size_t n = 400;
  int classes = 4;
  double homophily = 0.5;
  double avg_degree = 8.0;
  std::size_t features = 16;
  double feature_noise = 1.0;
  std::uint64_t seed = 0;
};

struct SbmProbabilities {
  double p_in;
  double p_out;
};

/// Intra/inter-class edge probabilities for the configured homophily and
/// expected degree. Throws std::invalid_argument when either exceeds 1.
SbmProbabilities sbm_probabilities(const SbmConfig& cfg);

/// Stochastic block model with one-hot class centroids plus Gaussian noise as
/// features. Bit-reproducible for a fixed seed.
Graph generate_sbm(const SbmConfig& cfg);

/// Loads an edge list (integer pairs, `#` comments) and a features/labels
/// file (F floats then an integer label per row). The adjacency is
/// symmetrised, deduplicated and stripped of self-loops. When num_classes is
/// given, labels must lie in [0, num_classes).
Graph load_graph(const std::filesystem::path& edges, const std::filesystem::path& features,
                 const std::optional<std::filesystem::path>& masks = std::nullopt,
                 std::optional<int> num_classes = std::nullopt);

/// Inverse of load_graph; masks are written only when the graph carries a split.
void save_graph(const Graph& g, const std::filesystem::path& edges,
                const std::filesystem::path& features,
                const std::optional<std::filesystem::path>& masks = std::nullopt);

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
};

/// k stratified random train/val/test splits, deterministic per seed.
std::vector<Split> make_folds(const Graph& g, int k, SplitRatios ratios, std::uint64_t seed);

}  // namespace hybspec
