#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "kflow/nn.hpp"
#include "test_util.hpp"

using namespace kflow;
using namespace kflow::nn;
using kflow::testing::kind_of;
using kflow::testing::random_tensor;

namespace {

Tensor run(NetworkState& net, const Tensor& x, std::mt19937_64* rng = nullptr) {
  ad::Tape tape;
  return forward_with_taps(net, tape, tape.constant(x), rng).output.value();
}

std::map<std::string, Tensor> run_taps(NetworkState& net, const Tensor& x) {
  ad::Tape tape;
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : forward_with_taps(net, tape, tape.constant(x)).taps) out[name] = v.value();
  return out;
}

}  // namespace

TEST_CASE("dense layer parameter shapes") {
  NetworkSpec spec;
  spec.input_shape = {300};
  spec.add(Dense{10});
  std::mt19937_64 rng(1);
  const NetworkState net = build(spec, rng);
  CHECK(net.params.at("dense1.weight").shape == Shape{300, 10});
  CHECK(net.params.at("dense1.bias").shape == Shape{10});
  CHECK(net.parameter_count() == 3010);
}

TEST_CASE("classifier shapes at full width") {
  const NetworkSpec spec = table1_spec(1.0, true);
  CHECK(spec.tap_shape("conv1") == Shape{26, 26, 150});
  CHECK(spec.tap_shape("conv2") == Shape{24, 24, 150});
  CHECK(spec.tap_shape("conv3") == Shape{12, 12, 150});
  CHECK(spec.tap_shape("conv4") == Shape{10, 10, 300});
  CHECK(spec.tap_shape("conv5") == Shape{8, 8, 300});
  CHECK(spec.tap_shape("conv6") == Shape{300});
  CHECK(spec.tap_shape("dense1") == Shape{1200});
  CHECK(spec.tap_shape("dense2") == Shape{300});
  CHECK(spec.output_shape() == Shape{10});

  // the same-padded 5x5 convs keep 24x24 and 8x8 before pooling
  const auto shapes = spec.infer_shapes();
  const std::size_t pool3 = spec.taps.at("conv3");
  CHECK(shapes[pool3 - 1] == Shape{24, 24, 150});
  CHECK(shapes[spec.taps.at("conv6") - 2] == Shape{8, 8, 300});
  CHECK(shapes[spec.taps.at("conv6") - 1] == Shape{4, 4, 300});
}

TEST_CASE("classifier shapes at width 0.1") {
  const NetworkSpec spec = table1_spec(0.1, false);
  CHECK(spec.tap_shape("conv1") == Shape{26, 26, 15});
  CHECK(spec.tap_shape("conv2") == Shape{24, 24, 15});
  CHECK(spec.tap_shape("conv3") == Shape{12, 12, 15});
  CHECK(spec.tap_shape("conv4") == Shape{10, 10, 30});
  CHECK(spec.tap_shape("conv5") == Shape{8, 8, 30});
  CHECK(spec.tap_shape("conv6") == Shape{30});
  CHECK(spec.tap_shape("dense1") == Shape{120});
  CHECK(spec.tap_shape("dense2") == Shape{30});
  CHECK(spec.output_shape() == Shape{10});
}

TEST_CASE("identity dense tap returns its input") {
  NetworkSpec spec;
  spec.input_shape = {3};
  spec.add(Dense{3}).tap("id");
  std::mt19937_64 rng(2);
  NetworkState net = build(spec, rng);
  Tensor& w = net.params.at("dense1.weight");
  for (std::size_t i = 0; i < 9; ++i) w.data[i] = i % 4 == 0 ? 1.0 : 0.0;
  const Tensor x = random_tensor({5, 3}, rng);
  CHECK(run_taps(net, x).at("id").data == x.data);
}

TEST_CASE("conv6 tap is one vector per sample") {
  std::mt19937_64 rng(3);
  NetworkState net = build(table1_spec(0.1, true), rng);
  const auto taps = run_taps(net, random_tensor({3, 28, 28, 1}, rng));
  CHECK(taps.at("conv6").shape == Shape{3, 30});
  CHECK(taps.at("conv3").shape == Shape{3, 12, 12, 15});
}

TEST_CASE("eval mode is deterministic") {
  std::mt19937_64 rng(4);
  NetworkState net = build(dropout_baseline(table1_spec(0.05, true), 0.25, 0.25), rng);
  const Tensor x = random_tensor({4, 28, 28, 1}, rng);
  net.mode = Mode::Eval;
  std::mt19937_64 a(10), b(11);
  CHECK(run(net, x, &a).data == run(net, x, &b).data);
}

TEST_CASE("zero dropout is the identity") {
  std::mt19937_64 rng(5);
  const NetworkSpec plain = mlp_spec(4, {8, 8}, 3);
  const NetworkSpec dropped = dropout_baseline(plain, 0.0, 0.0);
  CHECK(dropped.layers.size() == plain.layers.size() + 2);
  NetworkState a = build(plain, rng);
  NetworkState b = build(dropped, rng);
  b.params = a.params;
  const Tensor x = random_tensor({6, 4}, rng);
  std::mt19937_64 mask(6);
  CHECK(run(a, x).data == run(b, x, &mask).data);
}

TEST_CASE("inverted dropout preserves the expectation") {
  const double p = 0.25;
  NetworkSpec spec;
  spec.input_shape = {1};
  spec.add(Dense{1}).add(Relu{}).add(Dropout{p});
  std::mt19937_64 rng(7);
  NetworkState net = build(spec, rng);
  net.params.at("dense1.weight").data = {1.0};
  net.params.at("dense1.bias").data = {0.0};
  const Tensor x({1, 1}, 0.8);

  const std::size_t draws = 10000;
  double mean = 0.0;
  std::mt19937_64 mask(8);
  for (std::size_t i = 0; i < draws; ++i) mean += run(net, x, &mask).data[0];
  mean /= static_cast<double>(draws);

  net.mode = Mode::Eval;
  const double expected = run(net, x).data[0];
  const double sigma = expected * std::sqrt(p / (1.0 - p) / static_cast<double>(draws));
  CHECK(std::abs(mean - expected) <= 3.0 * sigma);
}

TEST_CASE("dropout probabilities are validated") {
  const NetworkSpec spec = mlp_spec(2, {4}, 2);
  CHECK(kind_of([&] { dropout_baseline(spec, 1.0, 0.0); }) == ErrorKind::InvalidProbability);
  CHECK(kind_of([&] { dropout_baseline(spec, 0.0, -0.1); }) == ErrorKind::InvalidProbability);
  NetworkSpec bad;
  bad.input_shape = {2};
  bad.add(Dropout{1.5});
  CHECK(kind_of([&] { bad.infer_shapes(); }) == ErrorKind::InvalidProbability);
}

TEST_CASE("batch-norm-free network is positively homogeneous") {
  std::mt19937_64 rng(9);
  NetworkState net = build(table1_spec(0.05, false), rng);
  const Tensor x = random_tensor({2, 28, 28, 1}, rng);
  Tensor x3 = x;
  for (double& v : x3.data) v *= 3.0;
  const Tensor y = run(net, x);
  const Tensor y3 = run(net, x3);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y3.data[i] == doctest::Approx(3.0 * y.data[i]).epsilon(1e-10));
}

TEST_CASE("taps do not change the logits") {
  std::mt19937_64 rng(10);
  NetworkSpec tapped = table1_spec(0.05, true);
  NetworkSpec untapped = tapped;
  untapped.taps.clear();
  NetworkState a = build(tapped, rng);
  NetworkState b = a;
  b.spec = untapped;
  const Tensor x = random_tensor({3, 28, 28, 1}, rng);
  CHECK(run(a, x).data == run(b, x).data);
}

TEST_CASE("batch-norm running statistics settle") {
  NetworkSpec spec;
  spec.input_shape = {2};
  spec.add(BatchNorm{});
  std::mt19937_64 rng(11);
  NetworkState net = build(spec, rng);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int step = 0; step < 100; ++step) {
    Tensor x({64, 2});
    for (std::size_t i = 0; i < 64; ++i) {
      x.data[2 * i] = 3.0 + 2.0 * nd(rng);
      x.data[2 * i + 1] = -1.0 + 0.5 * nd(rng);
    }
    run(net, x);
  }
  const Tensor& mean = net.buffers.at("bn1.running_mean");
  const Tensor& var = net.buffers.at("bn1.running_var");
  CHECK(mean.data[0] == doctest::Approx(3.0).epsilon(0.1));
  CHECK(mean.data[1] == doctest::Approx(-1.0).epsilon(0.1));
  CHECK(var.data[0] == doctest::Approx(4.0).epsilon(0.2));
  CHECK(var.data[1] == doctest::Approx(0.25).epsilon(0.2));

  net.mode = Mode::Eval;
  const Tensor probe({1, 2}, std::vector<double>{3.0, -1.0});
  const Tensor first = run(net, probe);
  CHECK(run(net, probe).data == first.data);
  CHECK(std::abs(first.data[0]) < 0.2);
  CHECK(std::abs(first.data[1]) < 0.2);
}

TEST_CASE("archive round trip") {
  std::mt19937_64 rng(12);
  NetworkState net = build(table1_spec(0.05, true), rng);
  const auto path = std::filesystem::temp_directory_path() / "kflow_test_archive.kfa";
  save_archive(path, net.params);
  const auto loaded = load_archive(path);
  REQUIRE(loaded.size() == net.params.size());
  for (const auto& [name, t] : net.params) {
    CHECK(loaded.at(name).shape == t.shape);
    CHECK(loaded.at(name).data == t.data);
  }
  std::filesystem::remove(path);
}

TEST_CASE("invalid specs are rejected") {
  NetworkSpec too_small;
  too_small.input_shape = {2, 2, 1};
  too_small.add(Conv{4, 3, ad::Padding::Valid});
  CHECK(kind_of([&] { too_small.infer_shapes(); }) == ErrorKind::InvalidSpec);

  NetworkSpec conv_on_vector;
  conv_on_vector.input_shape = {5};
  conv_on_vector.add(Conv{4, 3, ad::Padding::Same});
  CHECK(kind_of([&] { conv_on_vector.infer_shapes(); }) == ErrorKind::InvalidSpec);

  CHECK(kind_of([] { table1_spec(0.0, true); }) == ErrorKind::InvalidSpec);
  CHECK(kind_of([] { table1_spec(1.0, true).tap_shape("conv9"); }) == ErrorKind::UnknownTap);
}
