#include "hybspec/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace hybspec {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw std::invalid_argument("DenseMatrix: data length " + std::to_string(data_.size()) +
                                " does not match " + std::to_string(rows_) + "x" +
                                std::to_string(cols_));
  }
}

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() == 0 ? 0 : rows.begin()->size()) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw std::invalid_argument("DenseMatrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

CsrMatrix::CsrMatrix(std::size_t n, std::vector<std::size_t> row_ptr,
                     std::vector<std::size_t> col_idx, std::vector<double> vals)
    : n_(n), row_ptr_(std::move(row_ptr)), col_idx_(std::move(col_idx)), vals_(std::move(vals)) {
  if (row_ptr_.size() != n_ + 1) throw std::invalid_argument("CsrMatrix: row_ptr length != n+1");
  if (row_ptr_.front() != 0) throw std::invalid_argument("CsrMatrix: row_ptr[0] != 0");
  if (col_idx_.size() != vals_.size())
    throw std::invalid_argument("CsrMatrix: col_idx and vals differ in length");
  if (row_ptr_.back() != col_idx_.size()) throw std::invalid_argument("CsrMatrix: row_ptr[n] != nnz");
  for (std::size_t r = 0; r < n_; ++r) {
    if (row_ptr_[r + 1] < row_ptr_[r]) throw std::invalid_argument("CsrMatrix: row_ptr decreasing");
    for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
      if (col_idx_[k] >= n_) throw std::invalid_argument("CsrMatrix: column index out of range");
      if (k > row_ptr_[r] && col_idx_[k] <= col_idx_[k - 1])
        throw std::invalid_argument("CsrMatrix: columns not strictly increasing in row " +
                                    std::to_string(r));
    }
  }
}

CsrMatrix CsrMatrix::from_triplets(std::size_t n, std::vector<Entry> entries) {
  for (const auto& e : entries) {
    if (e.row >= n || e.col >= n) throw std::invalid_argument("CsrMatrix: triplet out of range");
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  std::vector<std::size_t> row_ptr(n + 1, 0);
  std::vector<std::size_t> cols;
  std::vector<double> vals;
  cols.reserve(entries.size());
  vals.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (i > 0 && entries[i - 1].row == e.row && entries[i - 1].col == e.col) {
      vals.back() += e.value;
      continue;
    }
    cols.push_back(e.col);
    vals.push_back(e.value);
    ++row_ptr[e.row + 1];
  }
  std::partial_sum(row_ptr.begin(), row_ptr.end(), row_ptr.begin());
  return CsrMatrix(n, std::move(row_ptr), std::move(cols), std::move(vals));
}

CsrMatrix CsrMatrix::identity(std::size_t n) {
  std::vector<std::size_t> row_ptr(n + 1);
  std::iota(row_ptr.begin(), row_ptr.end(), std::size_t{0});
  std::vector<std::size_t> cols(n);
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  return CsrMatrix(n, std::move(row_ptr), std::move(cols), std::vector<double>(n, 1.0));
}

CsrMatrix CsrMatrix::from_dense(const DenseMatrix& dense) {
  if (dense.rows() != dense.cols()) throw std::invalid_argument("CsrMatrix: dense input not square");
  std::vector<Entry> entries;
  for (std::size_t r = 0; r < dense.rows(); ++r)
    for (std::size_t c = 0; c < dense.cols(); ++c)
      if (dense(r, c) != 0.0) entries.push_back({r, c, dense(r, c)});
  return from_triplets(dense.rows(), std::move(entries));
}

double CsrMatrix::at(std::size_t r, std::size_t c) const {
  auto first = col_idx_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[r]);
  auto last = col_idx_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[r + 1]);
  auto it = std::lower_bound(first, last, c);
  if (it == last || *it != c) return 0.0;
  return vals_[static_cast<std::size_t>(it - col_idx_.begin())];
}

DenseMatrix CsrMatrix::to_dense() const {
  DenseMatrix d(n_, n_);
  for (std::size_t r = 0; r < n_; ++r)
    for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) d(r, col_idx_[k]) = vals_[k];
  return d;
}

CsrMatrix CsrMatrix::transposed() const {
  std::vector<Entry> entries;
  entries.reserve(nnz());
  for (std::size_t r = 0; r < n_; ++r)
    for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k)
      entries.push_back({col_idx_[k], r, vals_[k]});
  return from_triplets(n_, std::move(entries));
}

bool CsrMatrix::is_symmetric(double abs_tol) const {
  for (std::size_t r = 0; r < n_; ++r) {
    for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
      const std::size_t c = col_idx_[k];
      auto first = col_idx_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[c]);
      auto last = col_idx_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[c + 1]);
      auto it = std::lower_bound(first, last, r);
      if (it == last || *it != r) return false;
      const double mirrored = vals_[static_cast<std::size_t>(it - col_idx_.begin())];
      if (!(std::abs(mirrored - vals_[k]) <= abs_tol) && mirrored != vals_[k]) return false;
    }
  }
  return true;
}

DenseMatrix spmm(const CsrMatrix& a, const DenseMatrix& x) {
  if (a.n() != x.rows()) {
    throw std::invalid_argument("spmm: operator is " + std::to_string(a.n()) + "x" +
                                std::to_string(a.n()) + " but X has " + std::to_string(x.rows()) +
                                " rows");
  }
  const auto row_ptr = a.row_ptr();
  const auto cols = a.col_idx();
  const auto vals = a.vals();
  DenseMatrix out(a.n(), x.cols());
  for (std::size_t r = 0; r < a.n(); ++r) {
    auto dst = out.row(r);
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
      const double v = vals[k];
      const auto src = x.row(cols[k]);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += v * src[j];
    }
  }
  return out;
}

DenseMatrix spmm_transposed(const CsrMatrix& a, const DenseMatrix& x) {
  if (a.n() != x.rows()) throw std::invalid_argument("spmm_transposed: dimension mismatch");
  const auto row_ptr = a.row_ptr();
  const auto cols = a.col_idx();
  const auto vals = a.vals();
  DenseMatrix out(a.n(), x.cols());
  for (std::size_t r = 0; r < a.n(); ++r) {
    const auto src = x.row(r);
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
      const double v = vals[k];
      auto dst = out.row(cols[k]);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += v * src[j];
    }
  }
  return out;
}

DenseMatrix dense_matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("dense_matmul: inner dimensions " + std::to_string(a.cols()) +
                                " and " + std::to_string(b.rows()) + " differ");
  }
  DenseMatrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto src = b.row(k);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

FiniteProbe finite_probe(std::span<const double> values) {
  FiniteProbe probe;
  for (double v : values) {
    if (std::isfinite(v)) {
      probe.max_abs = std::max(probe.max_abs, std::abs(v));
    } else {
      probe.is_finite = false;
    }
  }
  return probe;
}

EigenDecomposition jacobi_eigh(const CsrMatrix& a, const JacobiOptions& opts) {
  if (!a.is_symmetric(opts.symmetry_tol)) throw std::invalid_argument("jacobi_eigh: matrix is not symmetric");
  return jacobi_eigh(a.to_dense(), opts);
}

EigenDecomposition jacobi_eigh(const DenseMatrix& input, const JacobiOptions& opts) {
  const std::size_t n = input.rows();
  if (input.cols() != n) throw std::invalid_argument("jacobi_eigh: matrix is not square");
  if (n > opts.max_n) {
    throw std::invalid_argument("jacobi_eigh: n=" + std::to_string(n) + " exceeds cap " +
                                std::to_string(opts.max_n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (!(std::abs(input(i, j) - input(j, i)) <= opts.symmetry_tol))
        throw std::invalid_argument("jacobi_eigh: matrix is not symmetric");
    }
  }

  DenseMatrix a = input;
  DenseMatrix v = DenseMatrix::identity(n);
  double frob2 = 0.0;
  for (double x : a.values()) frob2 += x * x;

  auto off_diagonal = [&] {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    return off;
  };

  const double stop = 1e-30 * frob2;
  for (int sweep = 0; sweep < opts.max_sweeps && off_diagonal() > stop; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });

  EigenDecomposition out;
  out.values.resize(n);
  out.vectors = DenseMatrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    out.values[i] = a(order[i], order[i]);
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, i) = v(k, order[i]);
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lambda = out.values[i];
    double residual = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      double av = 0.0;
      for (std::size_t k = 0; k < n; ++k) av += input(r, k) * out.vectors(k, i);
      residual = std::max(residual, std::abs(av - lambda * out.vectors(r, i)));
    }
    const double scaled = residual / std::max(1.0, std::abs(lambda));
    worst = std::max(worst, std::isfinite(scaled) ? scaled : INFINITY);
  }
  if (!(worst <= opts.residual_tol)) {
    throw ConvergenceError("jacobi_eigh: residual " + std::to_string(worst) +
                               " above tolerance after sweep budget",
                           worst);
  }
  return out;
}

}  // namespace hybspec
