#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "kflow/kernels.hpp"
#include "test_util.hpp"

using namespace kflow;
using namespace kflow::kernels;
using kflow::testing::kind_of;
using kflow::testing::random_tensor;

namespace {

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

struct Grams {
  Tensor bb, bc, cc;
};

Grams grams(const Tensor& features, double gamma, const std::vector<std::size_t>& half) {
  ad::Tape tape;
  const GramPair g = gram(tape.constant(features), tape.constant(Tensor::scalar(std::log(gamma))), half);
  return {g.k_bb.value(), g.k_bc.value(), g.k_cc.value()};
}

Tensor interpolate_values(const Tensor& features, double gamma, const std::vector<std::size_t>& half, const Tensor& yc) {
  ad::Tape tape;
  const GramPair g = gram(tape.constant(features), tape.constant(Tensor::scalar(std::log(gamma))), half);
  return interpolate(g.k_bc, g.k_cc, tape.constant(yc)).value();
}

}  // namespace

TEST_CASE("gram diagonal is one") {
  std::mt19937_64 rng(1);
  const Tensor f = random_tensor({7, 3}, rng);
  for (double gamma : {1e-3, 0.5, 40.0}) {
    const Grams g = grams(f, gamma, {0, 2, 4});
    for (std::size_t i = 0; i < 7; ++i) CHECK(g.bb.data[i * 7 + i] == 1.0);
  }
}

TEST_CASE("gram matches a hand computation") {
  const Tensor f({2, 2}, std::vector<double>{0, 0, 3, 4});
  const Grams g = grams(f, 0.01, {0});
  CHECK(g.bb.data[1] == doctest::Approx(std::exp(-0.25)).epsilon(1e-14));
  CHECK(g.bb.data[2] == doctest::Approx(0.7788007830714049).epsilon(1e-14));
}

TEST_CASE("very large bandwidth gives the identity") {
  std::mt19937_64 rng(2);
  const Tensor f = random_tensor({6, 2}, rng);
  const Grams g = grams(f, 1e8, {1, 3});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      if (i != j) CHECK(g.bb.data[i * 6 + j] < 1e-12);
}

TEST_CASE("sub-blocks are exact slices of K_bb") {
  std::mt19937_64 rng(3);
  const Tensor f = random_tensor({8, 4}, rng);
  const std::vector<std::size_t> half{6, 1, 3};
  const Grams g = grams(f, 0.3, half);
  CHECK(g.bc.shape == Shape{8, 3});
  CHECK(g.cc.shape == Shape{3, 3});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(g.bc.data[i * 3 + j] == g.bb.data[i * 8 + half[j]]);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(g.cc.data[i * 3 + j] == g.bb.data[half[i] * 8 + half[j]]);
}

TEST_CASE("invalid half indices are rejected") {
  CHECK(kind_of([] { check_half(std::vector<std::size_t>{0, 4}, 4); }) == ErrorKind::IndexOutOfRange);
  CHECK(kind_of([] { check_half(std::vector<std::size_t>{1, 2, 1}, 4); }) == ErrorKind::DuplicateIndex);
  std::mt19937_64 rng(4);
  const Tensor f = random_tensor({4, 2}, rng);
  CHECK(kind_of([&] { grams(f, 1.0, {2, 2}); }) == ErrorKind::DuplicateIndex);
}

TEST_CASE("interpolation is exact at the nodes") {
  std::mt19937_64 rng(5);
  const Tensor f = random_tensor({10, 3}, rng);
  const Tensor y = random_tensor({10, 2}, rng);
  const Tensor out = interpolate_values(f, 0.4, iota(10), y);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(out.data[i] - y.data[i]) <= 1e-6);
}

TEST_CASE("interpolant vanishes far from the data") {
  const Tensor f({4, 1}, std::vector<double>{0.0, 100.0, 200.0, 300.0});
  const Tensor yc({2, 1}, std::vector<double>{1.0, -2.0});
  const Tensor out = interpolate_values(f, 1.0, {0, 2}, yc);
  CHECK(out.data[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(out.data[2] == doctest::Approx(-2.0).epsilon(1e-14));
  CHECK(std::abs(out.data[1]) < 1e-300);
  CHECK(std::abs(out.data[3]) < 1e-300);
}

TEST_CASE("interpolant on a line matches a dense inverse") {
  const Tensor f({4, 1}, std::vector<double>{0.0, 1.0, 2.0, 3.0});
  const double gamma = 0.5;
  const std::vector<std::size_t> half{0, 2};
  const Tensor yc({2, 1}, std::vector<double>{0.0, 2.0});
  const Tensor out = interpolate_values(f, gamma, half, yc);

  auto k = [&](double a, double b) { return std::exp(-gamma * (a - b) * (a - b)); };
  const double a = 1.0, b = k(0, 2), det = a * a - b * b;
  // [[a, b], [b, a]]^{-1} yc
  const double w0 = (a * 0.0 - b * 2.0) / det, w1 = (-b * 0.0 + a * 2.0) / det;
  for (std::size_t i = 0; i < 4; ++i) {
    const double x = static_cast<double>(i);
    const double expected = k(x, 0.0) * w0 + k(x, 2.0) * w1;
    CHECK(std::abs(out.data[i] - expected) <= 1e-10);
  }
}

TEST_CASE("gram is permutation equivariant") {
  std::mt19937_64 rng(6);
  const Tensor f = random_tensor({6, 3}, rng);
  std::vector<std::size_t> perm = iota(6);
  std::shuffle(perm.begin(), perm.end(), rng);
  const Tensor fp = f.gather(perm);
  const Grams g = grams(f, 0.7, {0});
  const Grams gp = grams(fp, 0.7, {0});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(gp.bb.data[i * 6 + j] == g.bb.data[perm[i] * 6 + perm[j]]);
}

TEST_CASE("gram is positive semidefinite") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = random_tensor({12, 2}, rng);
    const Grams g = grams(f, 0.05 + 0.2 * trial, {0});
    Eigen::MatrixXd m(12, 12);
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g.bb.data[i * 12 + j];
    CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues().minCoeff() >= -1e-12);
  }
}

TEST_CASE("gradients flow to features and bandwidth") {
  std::mt19937_64 rng(8);
  Tensor f = random_tensor({6, 2}, rng);
  Tensor lg = Tensor::scalar(std::log(0.5));
  const Tensor y = random_tensor({6, 1}, rng);
  const std::vector<std::size_t> half{0, 2, 4};
  const Tensor yc = y.gather(half);
  ad::Program program = [&](ad::Tape& tape) {
    const GramPair g = gram(tape.variable(f, "f"), tape.variable(lg, "lg"), half);
    return ad::sum(ad::square(ad::sub(interpolate(g.k_bc, g.k_cc, tape.constant(yc)), tape.constant(y))));
  };
  const std::vector<ad::ParamRef> params{{"f", &f}, {"lg", &lg}};
  const auto report = ad::grad_check(program, params, 1e-4);
  CHECK(report.passed);
  ad::Tape tape;
  const auto grads = tape.backward(program(tape));
  CHECK(std::abs(grads["lg"].data[0]) > 0.0);
}

TEST_CASE("raw and identity deformation features return the input") {
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({5, 3}, rng);
  ad::Tape tape;
  KernelSpec raw = KernelSpec::raw(1.0);
  CHECK(feature_map(raw, tape.constant(x)).value().data == x.data);

  nn::NetworkSpec spec;
  spec.input_shape = {3};
  spec.add(nn::Dense{3});
  nn::NetworkState net = nn::build(spec, rng);
  net.params.at("dense1.weight").data = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  KernelSpec deform = KernelSpec::deformation(net, 1.0);
  CHECK(feature_map(deform, tape.constant(x)).value().data == x.data);
}

TEST_CASE("pooled tap features are channel means") {
  std::mt19937_64 rng(10);
  const Tensor act = random_tensor({2, 8, 8, 3}, rng);
  ad::Tape tape;
  const std::map<std::string, ad::Var> taps{{"conv3", tape.constant(act)}};
  KernelSpec spec = KernelSpec::tap("conv3");
  const Tensor out = feature_map(spec, tape.constant(Tensor({2, 1})), taps).value();
  REQUIRE(out.shape == Shape{2, 3});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0;
      for (std::size_t p = 0; p < 64; ++p) s += act.data[(n * 64 + p) * 3 + c];
      CHECK(out.data[n * 3 + c] == doctest::Approx(s / 64.0).epsilon(1e-14));
    }

  KernelSpec flat = KernelSpec::tap("conv3", 1.0, Reduce::None);
  CHECK(feature_map(flat, tape.constant(Tensor({2, 1})), taps).value().shape == Shape{2, 192});
  KernelSpec missing = KernelSpec::tap("conv9");
  CHECK(kind_of([&] { feature_map(missing, tape.constant(Tensor({2, 1})), taps); }) == ErrorKind::UnknownTap);
}

TEST_CASE("bandwidth accessors") {
  KernelSpec spec = KernelSpec::raw(0.25);
  CHECK(spec.gamma() == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(log_gamma_name(spec) == "log_gamma.raw");
  CHECK(log_gamma_name(KernelSpec::tap("conv6")) == "log_gamma.conv6");
  CHECK(kind_of([&] { spec.set_gamma(0.0); }) == ErrorKind::InvalidRange);
  CHECK(kind_of([&] { spec.set_gamma(NAN); }) == ErrorKind::InvalidRange);
}

TEST_CASE("median heuristic") {
  // squared distances 1, 9, 4 -> median 4
  CHECK(median_gamma(Tensor({3, 1}, std::vector<double>{0, 1, 3})) == doctest::Approx(0.25).epsilon(1e-15));
  // 1, 9, 49, 4, 36, 16 -> median (9 + 16) / 2
  CHECK(median_gamma(Tensor({4, 1}, std::vector<double>{0, 1, 3, 7})) == doctest::Approx(1.0 / 12.5).epsilon(1e-15));
  CHECK(median_gamma(Tensor({3, 2}, 1.5)) == 1.0);
  CHECK(median_gamma(Tensor({1, 2}, 1.5)) == 1.0);
}
