#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hybspec {

/// Row-major dense matrix of doubles. Non-finite entries are stored as-is.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows);

  static DenseMatrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }

  bool same_shape(const DenseMatrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  DenseMatrix transposed() const;

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Square sparse matrix in compressed-sparse-row form with strictly
/// increasing column indices per row.
class CsrMatrix {
 public:
  struct Entry {
    std::size_t row;
    std::size_t col;
    double value;
  };

  CsrMatrix() = default;
  /// Validates the CSR invariants and throws std::invalid_argument on violation.
  CsrMatrix(std::size_t n, std::vector<std::size_t> row_ptr, std::vector<std::size_t> col_idx,
            std::vector<double> vals);

  /// Builds from unordered triplets; duplicates are summed.
  static CsrMatrix from_triplets(std::size_t n, std::vector<Entry> entries);
  static CsrMatrix identity(std::size_t n);
  static CsrMatrix from_dense(const DenseMatrix& dense);

  std::size_t n() const { return n_; }
  std::size_t nnz() const { return col_idx_.size(); }
  std::span<const std::size_t> row_ptr() const { return row_ptr_; }
  std::span<const std::size_t> col_idx() const { return col_idx_; }
  std::span<const double> vals() const { return vals_; }
  std::span<double> vals() { return vals_; }

  /// Stored value at (r, c), zero when not stored.
  double at(std::size_t r, std::size_t c) const;

  DenseMatrix to_dense() const;
  CsrMatrix transposed() const;

  /// Structural and value symmetry within abs_tol.
  bool is_symmetric(double abs_tol = 0.0) const;

  friend bool operator==(const CsrMatrix&, const CsrMatrix&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> row_ptr_{0};
  std::vector<std::size_t> col_idx_;
  std::vector<double> vals_;
};

/// Sparse-dense product; each output entry sums in ascending column order.
DenseMatrix spmm(const CsrMatrix& a, const DenseMatrix& x);
/// a^T x without materialising the transpose.
DenseMatrix spmm_transposed(const CsrMatrix& a, const DenseMatrix& x);

DenseMatrix dense_matmul(const DenseMatrix& a, const DenseMatrix& b);

struct FiniteProbe {
  bool is_finite = true;
  double max_abs = 0.0;  // over finite entries only
};

FiniteProbe finite_probe(std::span<const double> values);
inline FiniteProbe finite_probe(const DenseMatrix& x) { return finite_probe(x.values()); }

struct EigenDecomposition {
  std::vector<double> values;  // ascending
  DenseMatrix vectors;         // column i pairs with values[i]
};

struct JacobiOptions {
  std::size_t max_n = 2000;
  int max_sweeps = 100;
  double symmetry_tol = 1e-12;
  double residual_tol = 1e-8;
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// Cyclic Jacobi eigensolver for symmetric matrices. Throws
/// std::invalid_argument on asymmetric or oversized input and
/// ConvergenceError if the residual bound is not met within the sweep budget.
EigenDecomposition jacobi_eigh(const CsrMatrix& a, const JacobiOptions& opts = {});
EigenDecomposition jacobi_eigh(const DenseMatrix& a, const JacobiOptions& opts = {});

}  // namespace hybspec
