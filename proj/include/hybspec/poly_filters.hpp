#pragma once

#include <optional>
#include <span>
#include <vector>

#include "hybspec/linalg.hpp"

namespace hybspec {

enum class FilterKind { chebyshev, krawtchouk };

const char* filter_name(FilterKind kind);

/// Propagated terms P_0 X ... P_K X with overflow instrumentation.
struct BasisStack {
  int order = 0;
  std::vector<DenseMatrix> mats;
  std::vector<double> max_abs;  // per order, over finite entries
  std::optional<int> first_nonfinite_order;
};

/// Fills max_abs and first_nonfinite_order from mats.
void instrument(BasisStack& stack);

/// Krawtchouk weight parameter p in (0,1) and lattice size N.
struct KrawtchoukShape {
  double p = 0.5;
  int lattice = 1;

  /// Throws std::invalid_argument unless 0 < p < 1 and lattice >= order.
  void validate(int order) const;
};

/// One three-term step K_{k+1} = cur*K_k - shift*(L K_k) - prev*K_{k-1},
/// where L is the scaled operator (spectrum [0,1]) and the lattice argument
/// is x = N*lambda. At k = 0 the step reduces to K_1 = 1 - x/(pN).
struct RecurrenceStep {
  double cur;
  double shift;
  double prev;
};

RecurrenceStep krawtchouk_step(int k, double p, int lattice);
/// Derivative of each coefficient with respect to p.
RecurrenceStep krawtchouk_step_dp(int k, double p, int lattice);

/// out = step.cur*cur - step.shift*lcur - step.prev*prev (prev may be null
/// when k = 0). Shared by the plain and the differentiable propagation so the
/// two agree bitwise.
void apply_krawtchouk_step(const RecurrenceStep& step, std::span<const double> cur,
                           std::span<const double> lcur, const std::span<const double>* prev,
                           std::span<double> out);

/// Chebyshev stack T_k(L_hat) X for k = 0..order.
BasisStack cheb_propagate(const CsrMatrix& l_hat, const DenseMatrix& x, int order);

/// Krawtchouk stack K_k(N * L_scaled; p, N) X for k = 0..order. Keeps going
/// past non-finite orders. With normalize_orders each emitted order is divided
/// by its own max-abs (the recurrence itself stays unnormalised).
BasisStack krawtchouk_propagate(const CsrMatrix& l_scaled, const DenseMatrix& x, int order,
                                const KrawtchoukShape& shape, bool normalize_orders = false);

/// T_0(x) .. T_order(x) via the three-term recurrence.
std::vector<double> chebyshev_values(int order, double x);
/// K_0(x) .. K_order(x) with x on the lattice scale [0, N].
std::vector<double> krawtchouk_values(int order, double x, const KrawtchoukShape& shape);

/// g(lambda) = sum_k w_k P_k(lambda) on a grid in [-1,1] (Chebyshev) or
/// [0,1] (Krawtchouk, scaled onto the lattice internally).
std::vector<double> scalar_response(FilterKind kind, std::span<const double> weights,
                                    const std::optional<KrawtchoukShape>& shape,
                                    std::span<const double> grid);

/// Smallest k in 1..cap whose scalar basis value at lambda_extreme is
/// non-finite. Krawtchouk scans stop at the lattice size.
std::optional<int> overflow_degree(FilterKind kind, const std::optional<KrawtchoukShape>& shape,
                                   double lambda_extreme, int cap = 200);

}  // namespace hybspec
