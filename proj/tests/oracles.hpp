#pragma once
// Reference computations that share no code with the kernels under test.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "hybspec/linalg.hpp"

namespace oracle {

/// Krawtchouk polynomial from its terminating hypergeometric series
///   K_n(x; p, N) = sum_j (-n)_j (-x)_j / ((-N)_j j!) * p^-j
/// summed in long double. x may be any real; the series terminates at j = n.
inline long double krawtchouk(int n, long double x, long double p, int N) {
  long double term = 1.0L, sum = 1.0L;
  for (int j = 0; j < n; ++j) {
    term *= static_cast<long double>(j - n) * (static_cast<long double>(j) - x) /
            (static_cast<long double>(j - N) * static_cast<long double>(j + 1) * p);
    sum += term;
  }
  return sum;
}

/// Sum of |terms| of the series above, the scale of its rounding error.
inline long double krawtchouk_term_scale(int n, long double x, long double p, int N) {
  long double term = 1.0L, sum = 1.0L;
  for (int j = 0; j < n; ++j) {
    term *= static_cast<long double>(j - n) * (static_cast<long double>(j) - x) /
            (static_cast<long double>(j - N) * static_cast<long double>(j + 1) * p);
    sum += std::fabs(term);
  }
  return sum;
}

inline double chebyshev(int k, double x) { return std::cos(k * std::acos(std::clamp(x, -1.0, 1.0))); }

/// f(A) X for symmetric A through its eigendecomposition.
inline hybspec::DenseMatrix spectral_apply(const hybspec::CsrMatrix& a, const hybspec::DenseMatrix& x,
                                           const std::function<double(double)>& f) {
  const auto eig = hybspec::jacobi_eigh(a);
  const std::size_t n = a.n();
  hybspec::DenseMatrix out(n, x.cols());
  for (std::size_t e = 0; e < n; ++e) {
    const double fe = f(eig.values[e]);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double proj = 0.0;
      for (std::size_t i = 0; i < n; ++i) proj += eig.vectors(i, e) * x(i, c);
      for (std::size_t i = 0; i < n; ++i) out(i, c) += fe * proj * eig.vectors(i, e);
    }
  }
  return out;
}

inline double max_abs_diff(const hybspec::DenseMatrix& a, const hybspec::DenseMatrix& b) {
  if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.values()[i] - b.values()[i]));
  return d;
}

}  // namespace oracle
