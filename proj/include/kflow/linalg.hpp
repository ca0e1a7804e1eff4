#pragma once

// Dense row-major matrices and the symmetric solve machinery behind kernel
// interpolation: Cholesky with a nugget ladder, multi-right-hand-side solves,
// and the reverse-mode rule for V = A^{-1} B.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

namespace kflow::linalg {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  /// Takes ownership of row-major `data`; rejects size mismatch and non-finite entries.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double> release() && { return std::move(data_); }

  Matrix transposed() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);

/// Diagonal inflations tried in order; each rung is multiplied by mean(diag(A))
/// when `relative` is set.
struct NuggetPolicy {
  std::vector<double> ladder{0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-3};
  bool relative = true;
  double symmetry_tolerance = 1e-10;
};

struct CholeskyFactor {
  Matrix lower;
  double nugget_used = 0.0;

  std::size_t dim() const noexcept { return lower.rows(); }
  /// L * L^T, i.e. the matrix that was actually factored (A + nugget * I).
  Matrix reconstruct() const;
};

/// Factors (A + A^T)/2 + eps*I for the first eps in the policy ladder that
/// yields numerically positive pivots.
CholeskyFactor cholesky(const Matrix& a, const NuggetPolicy& policy = {});

/// Solves (A + eps*I) V = B.
Matrix solve(const CholeskyFactor& factor, const Matrix& b);

struct SolveAdjoint {
  Matrix a_bar;  // symmetrized
  Matrix b_bar;
};

/// Reverse rule of V = A^{-1} B: B_bar = A^{-T} V_bar, A_bar = sym(-B_bar V^T).
SolveAdjoint solve_adjoint(const CholeskyFactor& factor, const Matrix& v, const Matrix& v_bar);

}  // namespace kflow::linalg
