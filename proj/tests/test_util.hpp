#pragma once

#include <cmath>
#include <random>

#include "doctest.h"
#include "kflow/error.hpp"
#include "kflow/linalg.hpp"
#include "kflow/tensor.hpp"

namespace kflow::testing {

inline linalg::Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  linalg::Matrix m(r, c);
  for (double& v : m.data()) v = nd(rng);
  return m;
}

/// W W^T + I, always SPD.
inline linalg::Matrix random_spd(std::size_t n, std::mt19937_64& rng) {
  const auto w = random_matrix(n, n, rng);
  return linalg::matmul(w, w.transposed()) + linalg::Matrix::identity(n);
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = nd(rng);
  return t;
}

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

/// Kind of the kflow::Error thrown by fn; fails the test when nothing is thrown.
inline ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an Error");
  return ErrorKind::Io;
}

}  // namespace kflow::testing
