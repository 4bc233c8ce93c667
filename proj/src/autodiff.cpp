#include "hybspec/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "hybspec/poly_filters.hpp"

namespace hybspec::ad {

namespace {

std::string shape_str(const DenseMatrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

DenseMatrix slice(const DenseMatrix& m, std::size_t begin, std::size_t count) {
  DenseMatrix out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto src = m.row(r);
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(begin),
              src.begin() + static_cast<std::ptrdiff_t>(begin + count), out.row(r).begin());
  }
  return out;
}

double frobenius_dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

Param::Param(std::string name_, DenseMatrix value_)
    : name(std::move(name_)),
      value(std::move(value_)),
      grad(value.rows(), value.cols()),
      m(value.rows(), value.cols()),
      v(value.rows(), value.cols()) {}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::param: return "param";
    case OpKind::spmm: return "spmm";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::scale: return "scale";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::relu: return "relu";
    case OpKind::dropout: return "dropout";
    case OpKind::log_softmax_rows: return "log_softmax_rows";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::mean_pair: return "mean_pair";
    case OpKind::nll_loss: return "nll_loss";
    case OpKind::weighted_sum: return "weighted_sum";
    case OpKind::krawtchouk_basis: return "krawtchouk_basis";
  }
  return "unknown";
}

NodeId Tape::push(OpKind kind, std::vector<NodeId> inputs, DenseMatrix value, BackwardFn backward) {
  NodeId id{nodes_.size()};
  for (const auto& in : inputs) {
    if (in.index >= id.index) throw std::logic_error("Tape: input id not older than node");
  }
  bool needs = kind == OpKind::param;
  for (const auto& in : inputs) needs = needs || nodes_[in.index].needs_grad;
  nodes_.push_back(Node{kind, std::move(inputs), std::move(value), DenseMatrix{}, std::move(backward), needs});
  return id;
}

DenseMatrix& Tape::grad_slot(NodeId id) {
  auto& n = nodes_.at(id.index);
  if (n.grad.empty() && !n.value.empty()) n.grad = DenseMatrix(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(NodeId id, const DenseMatrix& delta) {
  if (!needs_grad(id)) return;
  auto& g = grad_slot(id);
  require_same_shape(g, delta, "accumulate");
  auto dst = g.values();
  const auto src = delta.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

NodeId Tape::constant(DenseMatrix value) { return push(OpKind::constant, {}, std::move(value), nullptr); }

NodeId Tape::param(Param& p) {
  auto id = push(OpKind::param, {}, p.value, nullptr);
  bound_params_.emplace_back(id, &p);
  return id;
}

NodeId Tape::spmm(const CsrMatrix& a, NodeId x) {
  const CsrMatrix* op = &a;
  return push(OpKind::spmm, {x}, hybspec::spmm(a, value(x)), [op](Tape& t, std::size_t self) {
    const NodeId in = t.nodes_[self].inputs[0];
    if (t.needs_grad(in)) t.accumulate(in, spmm_transposed(*op, t.nodes_[self].grad));
  });
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  return push(OpKind::matmul, {a, b}, dense_matmul(value(a), value(b)), [](Tape& t, std::size_t self) {
    const auto& n = t.nodes_[self];
    const NodeId a = n.inputs[0], b = n.inputs[1];
    if (t.needs_grad(a)) t.accumulate(a, dense_matmul(n.grad, t.value(b).transposed()));
    if (t.needs_grad(b)) t.accumulate(b, dense_matmul(t.value(a).transposed(), n.grad));
  });
}

NodeId Tape::add(NodeId a, NodeId b) {
  require_same_shape(value(a), value(b), "add");
  DenseMatrix out = value(a);
  auto dst = out.values();
  const auto src = value(b).values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  return push(OpKind::add, {a, b}, std::move(out), [](Tape& t, std::size_t self) {
    const DenseMatrix g = t.nodes_[self].grad;
    t.accumulate(t.nodes_[self].inputs[0], g);
    t.accumulate(t.nodes_[self].inputs[1], g);
  });
}

NodeId Tape::scale(NodeId a, double alpha) {
  DenseMatrix out = value(a);
  for (double& v : out.values()) v *= alpha;
  return push(OpKind::scale, {a}, std::move(out), [alpha](Tape& t, std::size_t self) {
    DenseMatrix g = t.nodes_[self].grad;
    for (double& v : g.values()) v *= alpha;
    t.accumulate(t.nodes_[self].inputs[0], g);
  });
}

NodeId Tape::concat_cols(NodeId left, NodeId right) {
  const auto& l = value(left);
  const auto& r = value(right);
  if (l.rows() != r.rows())
    throw std::invalid_argument("concat_cols: row mismatch " + shape_str(l) + " vs " + shape_str(r));
  DenseMatrix out(l.rows(), l.cols() + r.cols());
  for (std::size_t i = 0; i < l.rows(); ++i) {
    auto dst = out.row(i);
    std::copy(l.row(i).begin(), l.row(i).end(), dst.begin());
    std::copy(r.row(i).begin(), r.row(i).end(), dst.begin() + static_cast<std::ptrdiff_t>(l.cols()));
  }
  const std::size_t split = l.cols();
  const std::size_t rest = r.cols();
  return push(OpKind::concat_cols, {left, right}, std::move(out), [split, rest](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    t.accumulate(t.nodes_[self].inputs[0], slice(g, 0, split));
    t.accumulate(t.nodes_[self].inputs[1], slice(g, split, rest));
  });
}

NodeId Tape::slice_cols(NodeId a, std::size_t begin, std::size_t count) {
  const auto& src = value(a);
  if (begin + count > src.cols()) throw std::invalid_argument("slice_cols: range exceeds " + shape_str(src));
  return push(OpKind::slice_cols, {a}, slice(src, begin, count), [begin, count](Tape& t, std::size_t self) {
    const NodeId in = t.nodes_[self].inputs[0];
    if (!t.needs_grad(in)) return;
    auto& dst = t.grad_slot(in);
    const auto& g = t.nodes_[self].grad;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto row = dst.row(r);
      const auto grow = g.row(r);
      for (std::size_t c = 0; c < count; ++c) row[begin + c] += grow[c];
    }
  });
}

NodeId Tape::relu(NodeId a) {
  DenseMatrix out = value(a);
  // NaN compares false both ways and is kept.
  for (double& v : out.values())
    if (v <= 0.0) v = 0.0;
  return push(OpKind::relu, {a}, std::move(out), [](Tape& t, std::size_t self) {
    const NodeId in = t.nodes_[self].inputs[0];
    DenseMatrix g = t.nodes_[self].grad;
    const auto x = t.value(in).values();
    auto gv = g.values();
    for (std::size_t i = 0; i < gv.size(); ++i) {
      if (x[i] <= 0.0) gv[i] = 0.0;
      else if (std::isnan(x[i])) gv[i] = x[i];
    }
    t.accumulate(in, g);
  });
}

NodeId Tape::dropout(NodeId a, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  const auto& x = value(a);
  DenseMatrix mask(x.rows(), x.cols(), 1.0);
  if (training && rate > 0.0) {
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& m : mask.values()) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      m = u < rate ? 0.0 : keep_scale;
    }
  }
  DenseMatrix out = x;
  auto ov = out.values();
  const auto mv = mask.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= mv[i];
  return push(OpKind::dropout, {a}, std::move(out), [mask = std::move(mask)](Tape& t, std::size_t self) {
    DenseMatrix g = t.nodes_[self].grad;
    auto gv = g.values();
    const auto mv = mask.values();
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= mv[i];
    t.accumulate(t.nodes_[self].inputs[0], g);
  });
}

NodeId Tape::log_softmax_rows(NodeId a) {
  const auto& x = value(a);
  DenseMatrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto src = x.row(r);
    auto dst = out.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : src) mx = std::max(mx, v);
    // std::max drops NaN depending on argument order; recheck explicitly.
    for (double v : src)
      if (std::isnan(v)) mx = v;
    double sum = 0.0;
    for (double v : src) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] = src[c] - lse;
  }
  return push(OpKind::log_softmax_rows, {a}, std::move(out), [](Tape& t, std::size_t self) {
    const auto& n = t.nodes_[self];
    DenseMatrix g = n.grad;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto gr = g.row(r);
      const auto y = n.value.row(r);
      double total = 0.0;
      for (double v : gr) total += v;
      for (std::size_t c = 0; c < gr.size(); ++c) gr[c] -= std::exp(y[c]) * total;
    }
    t.accumulate(n.inputs[0], g);
  });
}

NodeId Tape::sigmoid(NodeId a) {
  DenseMatrix out = value(a);
  for (double& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return push(OpKind::sigmoid, {a}, std::move(out), [](Tape& t, std::size_t self) {
    const auto& n = t.nodes_[self];
    DenseMatrix g = n.grad;
    auto gv = g.values();
    const auto s = n.value.values();
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= s[i] * (1.0 - s[i]);
    t.accumulate(n.inputs[0], g);
  });
}

NodeId Tape::mean_pair(NodeId a, NodeId b) {
  require_same_shape(value(a), value(b), "mean_pair");
  DenseMatrix out = value(a);
  auto dst = out.values();
  const auto src = value(b).values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = 0.5 * (dst[i] + src[i]);
  return push(OpKind::mean_pair, {a, b}, std::move(out), [](Tape& t, std::size_t self) {
    DenseMatrix g = t.nodes_[self].grad;
    for (double& v : g.values()) v *= 0.5;
    t.accumulate(t.nodes_[self].inputs[0], g);
    t.accumulate(t.nodes_[self].inputs[1], g);
  });
}

NodeId Tape::nll_loss(NodeId logp, std::span<const int> labels, const Mask& mask) {
  const auto& lp = value(logp);
  if (labels.size() != lp.rows() || mask.size() != lp.rows())
    throw std::invalid_argument("nll_loss: labels/mask length must equal rows of logp");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) rows.push_back(i);
  if (rows.empty()) throw std::invalid_argument("nll_loss: empty mask");
  std::vector<std::size_t> cols;
  cols.reserve(rows.size());
  double total = 0.0;
  for (std::size_t r : rows) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= lp.cols())
      throw std::invalid_argument("nll_loss: label out of range at row " + std::to_string(r));
    cols.push_back(static_cast<std::size_t>(label));
    total -= lp(r, static_cast<std::size_t>(label));
  }
  const double count = static_cast<double>(rows.size());
  DenseMatrix out(1, 1, total / count);
  return push(OpKind::nll_loss, {logp}, std::move(out),
              [rows = std::move(rows), cols = std::move(cols), count](Tape& t, std::size_t self) {
                if (!t.needs_grad(t.nodes_[self].inputs[0])) return;
                const double g = t.nodes_[self].grad(0, 0);
                auto& dst = t.grad_slot(t.nodes_[self].inputs[0]);
                for (std::size_t i = 0; i < rows.size(); ++i) dst(rows[i], cols[i]) -= g / count;
              });
}

NodeId Tape::weighted_sum(NodeId a, DenseMatrix weights) {
  require_same_shape(value(a), weights, "weighted_sum");
  DenseMatrix out(1, 1, frobenius_dot(value(a).values(), weights.values()));
  return push(OpKind::weighted_sum, {a}, std::move(out), [w = std::move(weights)](Tape& t, std::size_t self) {
    DenseMatrix g = w;
    const double s = t.nodes_[self].grad(0, 0);
    for (double& v : g.values()) v *= s;
    t.accumulate(t.nodes_[self].inputs[0], g);
  });
}

NodeId Tape::krawtchouk_basis(const CsrMatrix& l_scaled, NodeId x, NodeId p_node, int order, int lattice) {
  const auto& xv = value(x);
  const auto& pv = value(p_node);
  if (pv.rows() != 1 || pv.cols() != 1) throw std::invalid_argument("krawtchouk_basis: p must be 1x1");
  if (order < 0) throw std::invalid_argument("krawtchouk_basis: order must be >= 0");
  if (lattice < std::max(order, 1)) throw std::invalid_argument("krawtchouk_basis: lattice must be >= order");
  if (l_scaled.n() != xv.rows()) throw std::invalid_argument("krawtchouk_basis: operator/feature size mismatch");
  const double p = pv(0, 0);
  const std::size_t width = xv.cols();
  const auto orders = static_cast<std::size_t>(order) + 1;

  std::vector<DenseMatrix> terms;
  std::vector<DenseMatrix> shifted;  // l_scaled * K_k for k < order
  terms.reserve(orders);
  terms.push_back(xv);
  for (int k = 0; k < order; ++k) {
    const auto& cur = terms[static_cast<std::size_t>(k)];
    shifted.push_back(hybspec::spmm(l_scaled, cur));
    DenseMatrix next(xv.rows(), width);
    std::span<const double> prev;
    if (k > 0) prev = terms[static_cast<std::size_t>(k) - 1].values();
    apply_krawtchouk_step(krawtchouk_step(k, p, lattice), cur.values(), shifted.back().values(),
                          k > 0 ? &prev : nullptr, next.values());
    terms.push_back(std::move(next));
  }

  DenseMatrix out(xv.rows(), width * orders);
  for (std::size_t k = 0; k < orders; ++k)
    for (std::size_t r = 0; r < xv.rows(); ++r)
      std::copy(terms[k].row(r).begin(), terms[k].row(r).end(),
                out.row(r).begin() + static_cast<std::ptrdiff_t>(k * width));

  const CsrMatrix* op = &l_scaled;
  auto backward = [op, order, lattice, p, width, terms = std::move(terms),
                   shifted = std::move(shifted)](Tape& t, std::size_t self) {
    const auto& n = t.nodes_[self];
    const auto orders = static_cast<std::size_t>(order) + 1;
    std::vector<DenseMatrix> g;
    g.reserve(orders);
    for (std::size_t k = 0; k < orders; ++k) g.push_back(slice(n.grad, k * width, width));
    double dp = 0.0;
    for (int k = order - 1; k >= 0; --k) {
      const auto uk = static_cast<std::size_t>(k);
      const auto step = krawtchouk_step(k, p, lattice);
      const auto dstep = krawtchouk_step_dp(k, p, lattice);
      const DenseMatrix& gnext = g[uk + 1];
      dp += dstep.cur * frobenius_dot(gnext.values(), terms[uk].values()) -
            dstep.shift * frobenius_dot(gnext.values(), shifted[uk].values());
      if (k > 0) dp -= dstep.prev * frobenius_dot(gnext.values(), terms[uk - 1].values());
      const DenseMatrix back = spmm_transposed(*op, gnext);
      auto gk = g[uk].values();
      const auto gn = gnext.values();
      const auto bv = back.values();
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += step.cur * gn[i] - step.shift * bv[i];
      if (k > 0) {
        auto gprev = g[uk - 1].values();
        for (std::size_t i = 0; i < gprev.size(); ++i) gprev[i] -= step.prev * gn[i];
      }
    }
    t.accumulate(n.inputs[0], g[0]);
    t.accumulate(n.inputs[1], DenseMatrix(1, 1, dp));
  };
  return push(OpKind::krawtchouk_basis, {x, p_node}, std::move(out), std::move(backward));
}

void Tape::backward(NodeId loss) {
  const auto& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) throw std::invalid_argument("backward: loss must be 1x1");
  for (auto& n : nodes_) n.grad = DenseMatrix{};
  grad_slot(loss)(0, 0) = 1.0;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
  for (auto& [id, p] : bound_params_) {
    p->grad = DenseMatrix(p->value.rows(), p->value.cols());
    p->reached = false;
  }
  for (auto& [id, p] : bound_params_) {
    const auto& g = nodes_[id.index].grad;
    if (g.empty()) continue;
    p->reached = true;
    auto dst = p->grad.values();
    const auto src = g.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

double grad_check(const TapeBuilder& build, std::span<Param* const> params, const GradCheckOptions& opts) {
  auto evaluate = [&] {
    Tape tape;
    const NodeId loss = build(tape);
    const double v = tape.value(loss)(0, 0);
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss");
    return v;
  };

  {
    Tape tape;
    const NodeId loss = build(tape);
    if (!std::isfinite(tape.value(loss)(0, 0))) throw std::runtime_error("grad_check: non-finite loss");
    tape.backward(loss);
  }
  std::vector<DenseMatrix> analytic;
  for (Param* p : params) {
    if (!finite_probe(p->grad).is_finite) throw std::runtime_error("grad_check: non-finite gradient in " + p->name);
    analytic.push_back(p->grad);
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i]->value.values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double saved = values[k];
      values[k] = saved + opts.epsilon;
      const double up = evaluate();
      values[k] = saved - opts.epsilon;
      const double down = evaluate();
      values[k] = saved;
      const double numeric = (up - down) / (2.0 * opts.epsilon);
      const double err = std::abs(analytic[i].values()[k] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace hybspec::ad
