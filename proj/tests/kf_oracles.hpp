#pragma once

// Dense-matrix oracles for the KF losses, independent of the library solvers.

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "kflow/kernels.hpp"
#include "kflow/kf.hpp"
#include "kflow/tensor.hpp"

namespace kflow::testing {

struct KFInstance {
  Tensor features;  // (N_b, d)
  Tensor yb;        // (N_b, m)
  std::vector<std::size_t> half;
  double gamma = 1.0;

  Tensor yc() const { return yb.gather(half); }
};

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  const auto rows = static_cast<Eigen::Index>(t.shape[0]);
  const auto cols = static_cast<Eigen::Index>(t.size() / t.shape[0]);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = t.data[static_cast<std::size_t>(i * cols + j)];
  return m;
}

inline Eigen::MatrixXd rbf(const Eigen::MatrixXd& f, double gamma) {
  const Eigen::Index n = f.rows();
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) k(i, j) = std::exp(-gamma * (f.row(i) - f.row(j)).squaredNorm());
  return k;
}

inline double condition(const Eigen::MatrixXd& spd) {
  const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(spd).eigenvalues();
  return ev.maxCoeff() / ev.minCoeff();
}

inline constexpr double kMaxCondition = 1e6;

/// N_b in [4, max_batch], random half of size N_b / 2, Gaussian features and
/// labels, gamma a random multiple (1..4) of the median heuristic, doubled
/// while cond(K_bb) exceeds kMaxCondition.
inline KFInstance random_instance(std::mt19937_64& rng, std::size_t max_batch = 16) {
  std::uniform_int_distribution<std::size_t> nb_dist(4, max_batch), d_dist(1, 4), m_dist(1, 3);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> mult(1.0, 4.0);
  KFInstance inst;
  const std::size_t nb = nb_dist(rng), d = d_dist(rng), m = m_dist(rng);
  inst.features = Tensor({nb, d});
  for (double& v : inst.features.data) v = nd(rng);
  inst.yb = Tensor({nb, m});
  for (double& v : inst.yb.data) v = nd(rng);
  std::vector<std::size_t> perm(nb);
  for (std::size_t i = 0; i < nb; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  inst.half.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(nb / 2));
  inst.gamma = mult(rng) * kernels::median_gamma(inst.features);
  // sharpen until K_bb is well conditioned, so a 1e-8 comparison measures the
  // formulas rather than roundoff
  while (condition(rbf(to_eigen(inst.features), inst.gamma)) > kMaxCondition) inst.gamma *= 2.0;
  return inst;
}

/// ||u_b - u_c||_K^2 / ||u_b||_K^2 from explicit representer weights
/// alpha_b = K_bb^{-1} Y_b and alpha_c = K_cc^{-1} Y_c (embedded into the batch).
inline double rho_representer(const KFInstance& inst) {
  const Eigen::MatrixXd kbb = rbf(to_eigen(inst.features), inst.gamma);
  const Eigen::MatrixXd yb = to_eigen(inst.yb);
  const auto nc = static_cast<Eigen::Index>(inst.half.size());
  Eigen::MatrixXd kcc(nc, nc), yc(nc, yb.cols());
  for (Eigen::Index i = 0; i < nc; ++i) {
    yc.row(i) = yb.row(static_cast<Eigen::Index>(inst.half[static_cast<std::size_t>(i)]));
    for (Eigen::Index j = 0; j < nc; ++j)
      kcc(i, j) = kbb(static_cast<Eigen::Index>(inst.half[static_cast<std::size_t>(i)]),
                      static_cast<Eigen::Index>(inst.half[static_cast<std::size_t>(j)]));
  }
  const Eigen::MatrixXd alpha_b = kbb.fullPivLu().solve(yb);
  const Eigen::MatrixXd alpha_c_small = kcc.fullPivLu().solve(yc);
  Eigen::MatrixXd alpha_c = Eigen::MatrixXd::Zero(kbb.rows(), yb.cols());
  for (Eigen::Index i = 0; i < nc; ++i)
    alpha_c.row(static_cast<Eigen::Index>(inst.half[static_cast<std::size_t>(i)])) = alpha_c_small.row(i);
  const Eigen::MatrixXd diff = alpha_b - alpha_c;
  return (diff.transpose() * kbb * diff).trace() / (alpha_b.transpose() * kbb * alpha_b).trace();
}

/// ||Y_b - K_bc K_cc^{-1} Y_c||_F^2 with an explicit inverse.
inline double e2_dense(const KFInstance& inst) {
  const Eigen::MatrixXd kbb = rbf(to_eigen(inst.features), inst.gamma);
  const Eigen::MatrixXd yb = to_eigen(inst.yb);
  const auto nc = static_cast<Eigen::Index>(inst.half.size());
  Eigen::MatrixXd kbc(kbb.rows(), nc), kcc(nc, nc), yc(nc, yb.cols());
  for (Eigen::Index j = 0; j < nc; ++j) {
    const auto hj = static_cast<Eigen::Index>(inst.half[static_cast<std::size_t>(j)]);
    kbc.col(j) = kbb.col(hj);
    yc.row(j) = yb.row(hj);
    for (Eigen::Index i = 0; i < nc; ++i) kcc(i, j) = kbb(static_cast<Eigen::Index>(inst.half[static_cast<std::size_t>(i)]), hj);
  }
  return (yb - kbc * kcc.inverse() * yc).squaredNorm();
}

/// Library losses on the same instance.
inline double library_loss(const KFInstance& inst, kf::Objective objective) {
  ad::Tape tape;
  const kernels::GramPair g = kernels::gram(tape.constant(inst.features),
                                            tape.constant(Tensor::scalar(std::log(inst.gamma))), inst.half);
  const Tensor yc = inst.yc();
  return (objective == kf::Objective::Rho ? kf::rho_loss(g, inst.yb, yc) : kf::e2_loss(g, inst.yb, yc)).item();
}

}  // namespace kflow::testing
