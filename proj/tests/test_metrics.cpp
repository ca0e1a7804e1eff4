#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "doctest.h"
#include "kflow/metrics.hpp"
#include "test_util.hpp"

using namespace kflow;
using namespace kflow::metrics;
using kflow::testing::kind_of;
using kflow::testing::random_tensor;

namespace {

data::Dataset labelled(Tensor x, const std::vector<int>& labels, std::size_t classes) {
  data::Dataset d;
  d.x = std::move(x);
  d.y = data::one_hot(labels, classes);
  data::index_classes(d, labels, classes);
  return d;
}

/// Clusters around well separated centres; `spread` is the in-class noise.
data::Dataset clusters(std::size_t classes, std::size_t per_class, double spread, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t n = classes * per_class, dim = 3;
  Tensor x({n, dim});
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % classes);
    for (std::size_t k = 0; k < dim; ++k)
      x.data[i * dim + k] = (k == i % classes % dim ? 100.0 * static_cast<double>(1 + i % classes) : 0.0) + spread * nd(rng);
  }
  return labelled(std::move(x), labels, classes);
}

/// d -> identity dense [tap "id"] -> dense(classes) -> head.
nn::NetworkState probe_net(std::size_t dim, std::size_t classes, std::mt19937_64& rng) {
  nn::NetworkSpec spec;
  spec.input_shape = {dim};
  spec.add(nn::Dense{dim}).tap("id").add(nn::Dense{classes}).add(nn::SoftmaxHead{});
  nn::NetworkState net = nn::build(spec, rng);
  Tensor& w = net.params.at("dense1.weight");
  for (std::size_t i = 0; i < dim * dim; ++i) w.data[i] = i % (dim + 1) == 0 ? 1.0 : 0.0;
  net.mode = nn::Mode::Eval;
  return net;
}

kf::KFLossConfig probe_config(double gamma, std::size_t batch, kf::Sampling sampling = kf::Sampling::Uniform) {
  kf::KFLossConfig cfg;
  cfg.taps = {{kernels::KernelSpec::tap("id", gamma, kernels::Reduce::None), 1.0}};
  cfg.batch_size = batch;
  cfg.sampling = sampling;
  return cfg;
}

double pair_mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

}  // namespace

TEST_CASE("error of perfect and inverted logits") {
  const std::vector<int> labels{0, 1, 1, 0, 1, 0};
  const linalg::Matrix y = data::one_hot(labels, 2);
  const Tensor logits = Tensor::from_matrix(y);
  CHECK(classification_error(logits, y) == 0.0);
  Tensor negated = logits;
  for (double& v : negated.data) v = -v;
  CHECK(classification_error(negated, y) == 1.0);
}

TEST_CASE("error ties resolve to the first maximum") {
  const linalg::Matrix y = data::one_hot(std::vector<int>{0, 1}, 2);
  const Tensor flat({2, 2}, 0.0);
  CHECK(classification_error(flat, y) == 0.5);
}

TEST_CASE("network error ignores order and batching") {
  std::mt19937_64 rng(1);
  data::Dataset d = clusters(3, 20, 30.0, rng);
  nn::NetworkState net = probe_net(3, 3, rng);
  const double whole = classification_error(net, d, 500);
  CHECK(classification_error(net, d, 7) == whole);
  std::vector<std::size_t> perm(d.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  CHECK(classification_error(net, d.subset(perm), 13) == doctest::Approx(whole).epsilon(1e-15));

  net.mode = nn::Mode::Train;
  CHECK(kind_of([&] { classification_error(net, d); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("distance ratio of coincident clusters is flagged") {
  const Tensor f({4, 2}, std::vector<double>{0, 0, 0, 0, 1, 0, 1, 0});
  const std::vector<int> labels{0, 0, 1, 1};
  const DistanceRatioReport r = distance_ratio(f, labels, "t");
  CHECK(r.tap == "t");
  CHECK(r.mean_inclass == 0.0);
  CHECK(r.mean_interclass == 1.0);
  CHECK_FALSE(r.defined);
}

TEST_CASE("distance ratio matches hand-enumerated pairs") {
  const Tensor f({4, 2}, std::vector<double>{0, 0, 3, 4, 1, 0, 1, 1});
  const std::vector<int> labels{0, 0, 1, 1};
  const DistanceRatioReport r = distance_ratio(f, labels);
  const double inclass = pair_mean({5.0, 1.0});
  const double inter = pair_mean({1.0, std::sqrt(2.0), std::sqrt(20.0), std::sqrt(13.0)});
  CHECK(r.defined);
  CHECK(r.mean_inclass == doctest::Approx(inclass).epsilon(1e-15));
  CHECK(r.mean_interclass == doctest::Approx(inter).epsilon(1e-15));
  CHECK(r.ratio == doctest::Approx(inter / inclass).epsilon(1e-15));
}

TEST_CASE("identical features are flagged") {
  const Tensor f({4, 3}, 2.5);
  const DistanceRatioReport r = distance_ratio(f, std::vector<int>{0, 1, 0, 1});
  CHECK(r.mean_inclass == 0.0);
  CHECK(r.mean_interclass == 0.0);
  CHECK_FALSE(r.defined);
}

TEST_CASE("degenerate batches are rejected") {
  const Tensor f({3, 1}, std::vector<double>{0, 1, 2});
  CHECK(kind_of([&] { distance_ratio(f, std::vector<int>{4, 4, 4}); }) == ErrorKind::DegenerateBatch);
  CHECK(kind_of([&] { distance_ratio(f, std::vector<int>{0, 1, 2}); }) == ErrorKind::DegenerateBatch);
}

TEST_CASE("distance ratio is invariant to rigid motions and scaling") {
  std::mt19937_64 rng(2);
  const std::size_t n = 30, dim = 4;
  const Tensor f = random_tensor({n, dim}, rng);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 3);
  const DistanceRatioReport base = distance_ratio(f, labels);

  Eigen::MatrixXd a = Eigen::MatrixXd::Random(dim, dim);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
  Tensor moved = f;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < dim; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) s += q(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) * f.data[i * dim + j];
      moved.data[i * dim + k] = s + 5.0 - static_cast<double>(k);
    }
  const DistanceRatioReport rigid = distance_ratio(moved, labels);
  CHECK(rigid.mean_inclass == doctest::Approx(base.mean_inclass).epsilon(1e-12));
  CHECK(rigid.mean_interclass == doctest::Approx(base.mean_interclass).epsilon(1e-12));
  CHECK(rigid.ratio == doctest::Approx(base.ratio).epsilon(1e-12));

  Tensor scaled = f;
  for (double& v : scaled.data) v *= 3.5;
  const DistanceRatioReport s = distance_ratio(scaled, labels);
  CHECK(s.mean_inclass == doctest::Approx(3.5 * base.mean_inclass).epsilon(1e-12));
  CHECK(s.mean_interclass == doctest::Approx(3.5 * base.mean_interclass).epsilon(1e-12));
  CHECK(s.ratio == doctest::Approx(base.ratio).epsilon(1e-12));
}

TEST_CASE("batched ratio with one batch equals the direct ratio") {
  std::mt19937_64 rng(3);
  const data::Dataset d = clusters(3, 10, 5.0, rng);
  nn::NetworkState net = probe_net(3, 3, rng);
  kf::KFLossConfig cfg = probe_config(1.0, d.size());
  const auto reports = batched_distance_ratio(net, d, cfg);
  const DistanceRatioReport direct = distance_ratio(d.x, d.classes);
  REQUIRE(reports.contains("id"));
  CHECK(reports.at("id").ratio == doctest::Approx(direct.ratio).epsilon(1e-14));
  CHECK(reports.at("id").tap == "id");
}

TEST_CASE("probe is reproducible") {
  std::mt19937_64 rng(4);
  const data::Dataset d = clusters(3, 20, 20.0, rng);
  nn::NetworkState net = probe_net(3, 3, rng);
  kf::KFLossConfig cfg = probe_config(1e-3, 12);
  std::mt19937_64 a(5), b(5);
  CHECK(kf_probe(net, d, cfg, 1, a).at("id") == kf_probe(net, d, cfg, 1, b).at("id"));
  net.mode = nn::Mode::Train;
  CHECK(kind_of([&] { kf_probe(net, d, cfg, 1, a); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("separated classes interpolate their labels") {
  std::mt19937_64 rng(6);
  const data::Dataset d = clusters(4, 25, 0.01, rng);
  nn::NetworkState net = probe_net(3, 4, rng);
  kf::KFLossConfig cfg = probe_config(1.0, 40, kf::Sampling::ClassBalanced);
  cfg.per_class = 5;
  const double e2 = kf_probe(net, d, cfg, 10, rng).at("id");
  // ||Y_b||^2 = 40 for one-hot rows
  CHECK(e2 >= 0.0);
  CHECK(e2 <= 1e-3 * 40.0);
}

TEST_CASE("probe of random features stays within the label norm") {
  std::mt19937_64 rng(7);
  std::vector<int> labels(60);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(rng() % 5);
  const data::Dataset d = labelled(random_tensor({60, 3}, rng), labels, 5);
  nn::NetworkState net = probe_net(3, 5, rng);
  // At the bare median bandwidth the interpolant of random labels overshoots
  // (e2 about 1.7 ||Y_b||^2 here); sharper kernels keep predictions below |Y|.
  const double median = kernels::median_gamma(d.x);
  for (double mult : {4.0, 16.0, 64.0}) {
    kf::KFLossConfig cfg = probe_config(mult * median, 20);
    const double e2 = kf_probe(net, d, cfg, 20, rng).at("id");
    CHECK(e2 >= 0.0);
    CHECK(e2 <= 20.0 * 1.5);
  }
}

TEST_CASE("probe spread shrinks with more splits") {
  std::mt19937_64 rng(8);
  const data::Dataset d = clusters(3, 30, 60.0, rng);
  nn::NetworkState net = probe_net(3, 3, rng);
  kf::KFLossConfig cfg = probe_config(1e-3, 12);
  auto spread = [&](std::size_t splits) {
    std::vector<double> v;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      std::mt19937_64 r(seed);
      v.push_back(kf_probe(net, d, cfg, splits, r).at("id"));
    }
    const double m = pair_mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
  };
  CHECK(spread(16) < spread(1));
}

TEST_CASE("untrained classifier is at chance on MNIST") {
  const std::filesystem::path dir = KFLOW_MNIST_DIR;
  if (!std::filesystem::exists(dir / "t10k-images-idx3-ubyte")) {
    MESSAGE("MNIST files not found under " << dir << "; skipped");
    return;
  }
  data::Dataset test = data::load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  std::vector<std::size_t> first(std::min<std::size_t>(1000, test.size()));
  std::iota(first.begin(), first.end(), 0);
  test = test.subset(first);
  std::mt19937_64 rng(9);
  nn::NetworkState net = nn::build(nn::table1_spec(0.1, true), rng);
  net.mode = nn::Mode::Eval;
  const double err = classification_error(net, test);
  CHECK(std::abs(err - 0.9) <= 0.05);
}
