#include "hybspec/poly_filters.hpp"

#include <cmath>
#include <string>

namespace hybspec {

namespace {

std::vector<double> krawtchouk_at_lambda(int order, double lambda, const KrawtchoukShape& shape) {
  std::vector<double> values(static_cast<std::size_t>(order) + 1);
  values[0] = 1.0;
  for (int k = 0; k < order; ++k) {
    const auto step = krawtchouk_step(k, shape.p, shape.lattice);
    const double cur = values[static_cast<std::size_t>(k)];
    const double lcur = lambda * cur;
    const double prev = k > 0 ? values[static_cast<std::size_t>(k) - 1] : 0.0;
    const std::span<const double> prev_span(&prev, 1);
    apply_krawtchouk_step(step, {&cur, 1}, {&lcur, 1}, k > 0 ? &prev_span : nullptr,
                          {&values[static_cast<std::size_t>(k) + 1], 1});
  }
  return values;
}

}  // namespace

const char* filter_name(FilterKind kind) {
  return kind == FilterKind::chebyshev ? "chebyshev" : "krawtchouk";
}

void instrument(BasisStack& stack) {
  stack.max_abs.clear();
  stack.first_nonfinite_order.reset();
  for (std::size_t k = 0; k < stack.mats.size(); ++k) {
    const auto probe = finite_probe(stack.mats[k]);
    stack.max_abs.push_back(probe.max_abs);
    if (!probe.is_finite && !stack.first_nonfinite_order) stack.first_nonfinite_order = static_cast<int>(k);
  }
}

void KrawtchoukShape::validate(int order) const {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("KrawtchoukShape: p must lie in (0, 1)");
  if (lattice < 1 || lattice < order) {
    throw std::invalid_argument("KrawtchoukShape: lattice N=" + std::to_string(lattice) +
                                " must be >= order " + std::to_string(order));
  }
}

RecurrenceStep krawtchouk_step(int k, double p, int lattice) {
  const double kk = k;
  const double d = p * (lattice - kk);
  return {(d + kk * (1.0 - p)) / d, lattice / d, kk * (1.0 - p) / d};
}

RecurrenceStep krawtchouk_step_dp(int k, double p, int lattice) {
  const double kk = k;
  const double rest = lattice - kk;
  const double p2 = p * p;
  return {-kk / (rest * p2), -lattice / (rest * p2), -kk / (rest * p2)};
}

void apply_krawtchouk_step(const RecurrenceStep& step, std::span<const double> cur,
                           std::span<const double> lcur, const std::span<const double>* prev,
                           std::span<double> out) {
  if (prev) {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = step.cur * cur[i] - step.shift * lcur[i] - step.prev * (*prev)[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = step.cur * cur[i] - step.shift * lcur[i];
  }
}

BasisStack cheb_propagate(const CsrMatrix& l_hat, const DenseMatrix& x, int order) {
  if (order < 0) throw std::invalid_argument("cheb_propagate: order must be >= 0");
  if (l_hat.n() != x.rows()) throw std::invalid_argument("cheb_propagate: operator/feature size mismatch");
  BasisStack stack;
  stack.order = order;
  stack.mats.push_back(x);
  if (order >= 1) stack.mats.push_back(spmm(l_hat, x));
  for (int k = 1; k < order; ++k) {
    DenseMatrix next = spmm(l_hat, stack.mats[static_cast<std::size_t>(k)]);
    const auto prev = stack.mats[static_cast<std::size_t>(k) - 1].values();
    auto out = next.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2.0 * out[i] - prev[i];
    stack.mats.push_back(std::move(next));
  }
  instrument(stack);
  return stack;
}

BasisStack krawtchouk_propagate(const CsrMatrix& l_scaled, const DenseMatrix& x, int order,
                                const KrawtchoukShape& shape, bool normalize_orders) {
  if (order < 0) throw std::invalid_argument("krawtchouk_propagate: order must be >= 0");
  if (l_scaled.n() != x.rows())
    throw std::invalid_argument("krawtchouk_propagate: operator/feature size mismatch");
  shape.validate(order);
  BasisStack stack;
  stack.order = order;
  stack.mats.push_back(x);
  for (int k = 0; k < order; ++k) {
    const auto& cur = stack.mats[static_cast<std::size_t>(k)];
    const DenseMatrix lcur = spmm(l_scaled, cur);
    DenseMatrix next(x.rows(), x.cols());
    std::span<const double> prev;
    if (k > 0) prev = stack.mats[static_cast<std::size_t>(k) - 1].values();
    apply_krawtchouk_step(krawtchouk_step(k, shape.p, shape.lattice), cur.values(), lcur.values(),
                          k > 0 ? &prev : nullptr, next.values());
    stack.mats.push_back(std::move(next));
  }
  instrument(stack);
  if (normalize_orders) {
    for (std::size_t k = 0; k < stack.mats.size(); ++k) {
      const double m = stack.max_abs[k];
      if (m > 0.0 && std::isfinite(m))
        for (double& v : stack.mats[k].values()) v /= m;
    }
  }
  return stack;
}

std::vector<double> chebyshev_values(int order, double x) {
  std::vector<double> t(static_cast<std::size_t>(order) + 1);
  t[0] = 1.0;
  if (order >= 1) t[1] = x;
  for (std::size_t k = 2; k < t.size(); ++k) t[k] = 2.0 * (x * t[k - 1]) - t[k - 2];
  return t;
}

std::vector<double> krawtchouk_values(int order, double x, const KrawtchoukShape& shape) {
  return krawtchouk_at_lambda(order, x / shape.lattice, shape);
}

std::vector<double> scalar_response(FilterKind kind, std::span<const double> weights,
                                    const std::optional<KrawtchoukShape>& shape,
                                    std::span<const double> grid) {
  if (weights.empty()) throw std::invalid_argument("scalar_response: no weights");
  const int order = static_cast<int>(weights.size()) - 1;
  const double lo = kind == FilterKind::chebyshev ? -1.0 : 0.0;
  if (kind == FilterKind::krawtchouk) {
    if (!shape) throw std::invalid_argument("scalar_response: Krawtchouk response needs a shape");
    shape->validate(order);
  }
  std::vector<double> response;
  response.reserve(grid.size());
  for (double lambda : grid) {
    if (!(lambda >= lo && lambda <= 1.0)) {
      throw std::invalid_argument("scalar_response: grid point " + std::to_string(lambda) +
                                  " outside [" + std::to_string(lo) + ", 1]");
    }
    const auto basis = kind == FilterKind::chebyshev ? chebyshev_values(order, lambda)
                                                     : krawtchouk_at_lambda(order, lambda, *shape);
    double g = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) g += weights[k] * basis[k];
    response.push_back(g);
  }
  return response;
}

std::optional<int> overflow_degree(FilterKind kind, const std::optional<KrawtchoukShape>& shape,
                                   double lambda_extreme, int cap) {
  if (cap < 1 || cap > 200) throw std::invalid_argument("overflow_degree: cap must lie in [1, 200]");
  std::vector<double> values;
  if (kind == FilterKind::chebyshev) {
    values = chebyshev_values(cap, lambda_extreme);
  } else {
    if (!shape) throw std::invalid_argument("overflow_degree: Krawtchouk scan needs a shape");
    values = krawtchouk_at_lambda(std::min(cap, shape->lattice), lambda_extreme, *shape);
  }
  for (std::size_t k = 1; k < values.size(); ++k)
    if (!std::isfinite(values[k])) return static_cast<int>(k);
  return std::nullopt;
}

}  // namespace hybspec
