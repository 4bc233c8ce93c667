#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hybspec/graph.hpp"
#include "hybspec/linalg.hpp"
#include "hybspec/random.hpp"

namespace hybspec::ad {

struct NodeId {
  std::size_t index = 0;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

/// A trainable tensor with its gradient and Adam state.
struct Param {
  std::string name;
  DenseMatrix value;
  DenseMatrix grad;
  DenseMatrix m;  // first moment
  DenseMatrix v;  // second moment
  std::int64_t steps = 0;
  /// True when the last backward reached this parameter from the loss.
  bool reached = false;

  Param() = default;
  Param(std::string name, DenseMatrix value);
};

enum class OpKind {
  constant,
  param,
  spmm,
  matmul,
  add,
  scale,
  concat_cols,
  slice_cols,
  relu,
  dropout,
  log_softmax_rows,
  sigmoid,
  mean_pair,
  nll_loss,
  weighted_sum,
  krawtchouk_basis,
};

const char* op_name(OpKind kind);

/// Append-only record of a computation. Inputs of node i always have ids < i,
/// so backward is a single descending sweep. Operators and Params passed by
/// reference must outlive the tape.
class Tape {
 public:
  NodeId constant(DenseMatrix value);
  NodeId param(Param& p);

  NodeId spmm(const CsrMatrix& a, NodeId x);
  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId a, double alpha);
  NodeId concat_cols(NodeId left, NodeId right);
  NodeId slice_cols(NodeId a, std::size_t begin, std::size_t count);
  NodeId relu(NodeId a);
  /// Inverted dropout: kept entries are scaled by 1/(1-rate). Identity when
  /// not training.
  NodeId dropout(NodeId a, double rate, Rng& rng, bool training);
  NodeId log_softmax_rows(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId mean_pair(NodeId a, NodeId b);
  /// Mean of -logp[i, label_i] over masked rows; 1x1 result.
  NodeId nll_loss(NodeId logp, std::span<const int> labels, const Mask& mask);
  /// sum(a .* weights); 1x1 result.
  NodeId weighted_sum(NodeId a, DenseMatrix weights);

  /// Krawtchouk basis stack [K_0(S)X | K_1(S)X | ... | K_order(S)X] with
  /// S = lattice * l_scaled, shape parameter taken from the 1x1 node p.
  NodeId krawtchouk_basis(const CsrMatrix& l_scaled, NodeId x, NodeId p, int order, int lattice);

  const DenseMatrix& value(NodeId id) const { return nodes_.at(id.index).value; }
  /// Empty when backward never reached the node or it depends on no Param.
  const DenseMatrix& grad(NodeId id) const { return nodes_.at(id.index).grad; }
  OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
  std::span<const NodeId> inputs(NodeId id) const { return nodes_.at(id.index).inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1x1 loss node. Every Param bound to this tape gets
  /// its grad overwritten: the accumulated gradient if reached, exact zeros
  /// otherwise. Non-finite values propagate untouched.
  void backward(NodeId loss);

 private:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    DenseMatrix value;
    DenseMatrix grad;
    BackwardFn backward;
    bool needs_grad = false;  // depends on a bound parameter
  };

  NodeId push(OpKind kind, std::vector<NodeId> inputs, DenseMatrix value, BackwardFn backward);
  /// grad(id) += delta, allocating on first touch.
  void accumulate(NodeId id, const DenseMatrix& delta);
  DenseMatrix& grad_slot(NodeId id);
  bool needs_grad(NodeId id) const { return nodes_[id.index].needs_grad; }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }

  std::vector<Node> nodes_;
  std::vector<std::pair<NodeId, Param*>> bound_params_;
};

/// Builds a loss on a fresh tape from the given parameters. Must be
/// deterministic for grad_check to be meaningful.
using TapeBuilder = std::function<NodeId(Tape&)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
};

/// Max over all parameter entries of |analytic - numeric| / max(1, |numeric|)
/// with central differences. Throws std::runtime_error when any evaluated
/// loss or analytic gradient is non-finite.
double grad_check(const TapeBuilder& build, std::span<Param* const> params,
                  const GradCheckOptions& opts = {});

}  // namespace hybspec::ad
