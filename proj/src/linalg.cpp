#include "kflow/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "kflow/error.hpp"

namespace kflow::linalg {

namespace {

void require_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, "matrix entry is not finite");
  }
}

std::string dims(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
  require_finite(std::span<const double>(&fill, 1));
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorKind::DimensionMismatch,
                "data length " + std::to_string(data_.size()) + " != " + std::to_string(rows_ * cols_));
  }
  require_finite(data_);
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw Error(ErrorKind::DimensionMismatch, "ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
  require_finite(data_);
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw Error(ErrorKind::DimensionMismatch, "matmul " + dims(a) + " * " + dims(b));
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto br = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(ErrorKind::DimensionMismatch, dims(a) + " + " + dims(b));
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(ErrorKind::DimensionMismatch, dims(a) + " - " + dims(b));
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

Matrix CholeskyFactor::reconstruct() const {
  return matmul(lower, lower.transposed());
}

namespace {

// Returns false when a pivot is not safely positive.
bool try_factor(const Matrix& a, double nugget, Matrix& lower) {
  const std::size_t n = a.rows();
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i)) + nugget);
  const double pivot_floor = static_cast<double>(n) * std::numeric_limits<double>::epsilon() * max_diag;

  lower = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    auto lj = lower.row(j);
    double d = a(j, j) + nugget;
    for (std::size_t k = 0; k < j; ++k) d -= lj[k] * lj[k];
    if (!(d > pivot_floor)) return false;
    const double ljj = std::sqrt(d);
    lj[j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      auto li = lower.row(i);
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      li[j] = s / ljj;
    }
  }
  return true;
}

}  // namespace

CholeskyFactor cholesky(const Matrix& a, const NuggetPolicy& policy) {
  if (a.rows() != a.cols()) throw Error(ErrorKind::DimensionMismatch, "cholesky of " + dims(a));
  const std::size_t n = a.rows();

  const double scale = std::max(max_abs(a), std::numeric_limits<double>::min());
  Matrix sym(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > policy.symmetry_tolerance * scale) {
        throw Error(ErrorKind::NotSymmetric,
                    "entry (" + std::to_string(i) + "," + std::to_string(j) + ") differs from its transpose");
      }
      sym(i, j) = 0.5 * (a(i, j) + a(j, i));
    }
  }

  double unit = 1.0;
  if (policy.relative && n > 0) {
    double trace = 0.0;
    for (std::size_t i = 0; i < n; ++i) trace += sym(i, i);
    unit = trace / static_cast<double>(n);
    if (!(unit > 0.0)) unit = 1.0;
  }

  CholeskyFactor factor;
  for (double rung : policy.ladder) {
    const double nugget = rung * unit;
    if (try_factor(sym, nugget, factor.lower)) {
      factor.nugget_used = nugget;
      return factor;
    }
  }
  throw Error(ErrorKind::NotPositiveDefinite,
              "factorization failed at the largest nugget for a " + dims(a) + " matrix");
}

Matrix solve(const CholeskyFactor& factor, const Matrix& b) {
  const std::size_t n = factor.dim();
  if (b.rows() != n)
    throw Error(ErrorKind::DimensionMismatch, "solve with factor " + std::to_string(n) + " and rhs " + dims(b));
  const std::size_t m = b.cols();
  const Matrix& l = factor.lower;

  // L y = b
  Matrix y = b;
  for (std::size_t i = 0; i < n; ++i) {
    auto yi = y.row(i);
    for (std::size_t k = 0; k < i; ++k) {
      const double lik = l(i, k);
      auto yk = y.row(k);
      for (std::size_t c = 0; c < m; ++c) yi[c] -= lik * yk[c];
    }
    const double inv = 1.0 / l(i, i);
    for (std::size_t c = 0; c < m; ++c) yi[c] *= inv;
  }
  // L^T v = y
  for (std::size_t ii = n; ii-- > 0;) {
    auto vi = y.row(ii);
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double lki = l(k, ii);
      auto vk = y.row(k);
      for (std::size_t c = 0; c < m; ++c) vi[c] -= lki * vk[c];
    }
    const double inv = 1.0 / l(ii, ii);
    for (std::size_t c = 0; c < m; ++c) vi[c] *= inv;
  }
  return y;
}

SolveAdjoint solve_adjoint(const CholeskyFactor& factor, const Matrix& v, const Matrix& v_bar) {
  const std::size_t n = factor.dim();
  if (v.rows() != n || v_bar.rows() != n || v.cols() != v_bar.cols())
    throw Error(ErrorKind::DimensionMismatch, "solve_adjoint with V " + dims(v) + " and V_bar " + dims(v_bar));

  SolveAdjoint out;
  out.b_bar = solve(factor, v_bar);
  out.a_bar = Matrix(n, n);
  const std::size_t m = v.cols();
  for (std::size_t i = 0; i < n; ++i) {
    auto bi = out.b_bar.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      auto vj = v.row(j);
      double s = 0.0;
      for (std::size_t c = 0; c < m; ++c) s += bi[c] * vj[c];
      out.a_bar(i, j) = -s;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double s = 0.5 * (out.a_bar(i, j) + out.a_bar(j, i));
      out.a_bar(i, j) = s;
      out.a_bar(j, i) = s;
    }
  }
  return out;
}

}  // namespace kflow::linalg
