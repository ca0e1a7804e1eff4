#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "kflow/experiment.hpp"
#include "test_util.hpp"

using namespace kflow;
using namespace kflow::exp;
using kflow::testing::kind_of;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path = fs::temp_directory_path() / ("kflow_test_exp_" + std::to_string(std::random_device{}()));
  TempDir() { fs::create_directories(path); }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

bool have_mnist() { return fs::exists(fs::path(KFLOW_MNIST_DIR) / "train-images-idx3-ubyte"); }

ExperimentConfig tiny_cnn(const fs::path& out) {
  ExperimentConfig c;
  c.experiment = Kind::TrainCnn;
  c.out_dir = out.string();
  c.data.dir = KFLOW_MNIST_DIR;
  c.data.train_limit = 200;
  c.data.test_limit = 100;
  c.network.width_factor = 0.05;
  c.optimizer.epochs = 1;
  return c;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  CHECK(lr_at(0, 100, 1e-2, 1e-6) == 1e-2);
  CHECK(lr_at(100, 100, 1e-2, 1e-6) == 1e-6);
  CHECK(lr_at(50, 100, 1e-2, 1e-6) == doctest::Approx(1e-4).epsilon(1e-12));
  for (std::size_t s = 0; s <= 10; ++s) CHECK(lr_at(s, 10, 3e-3, 3e-3) == doctest::Approx(3e-3).epsilon(1e-15));
  for (std::size_t s = 1; s <= 10; ++s) CHECK(lr_at(s, 10, 1e-2, 1e-6) < lr_at(s - 1, 10, 1e-2, 1e-6));
  CHECK(kind_of([] { lr_at(11, 10, 1e-2, 1e-6); }) == ErrorKind::InvalidRange);
  CHECK(kind_of([] { lr_at(0, 0, 1e-2, 1e-6); }) == ErrorKind::InvalidRange);
  CHECK(kind_of([] { lr_at(1, 10, 0.0, 1e-6); }) == ErrorKind::InvalidRange);
}

TEST_CASE("config text round trips") {
  ExperimentConfig c;
  c.experiment = Kind::Swissroll;
  c.seed = 1234567890123ULL;
  c.network.width_factor = 0.3;
  c.kf.taps = {"conv3", "conv6"};
  c.kf.lambdas = {0.5, 1.0 / 3.0};
  c.kf.sampling = kf::Sampling::ClassBalanced;
  c.kf.gamma_init = 0.125;
  c.optimizer.lr_start = 0.1;
  c.augment.enabled = true;
  c.augment.policy.max_rotation_deg = 7.5;
  c.swissroll.objective = kf::Objective::Rho;
  const std::string text = to_ini(c);
  const ExperimentConfig back = parse_config(text);
  CHECK(to_ini(back) == text);
  CHECK(back.seed == c.seed);
  CHECK(back.kf.lambdas[1] == c.kf.lambdas[1]);
  CHECK(back.kf.gamma_init == c.kf.gamma_init);
  CHECK(back.kf.taps == c.kf.taps);
  CHECK(back.swissroll.objective == kf::Objective::Rho);
  CHECK(to_ini(parse_config(to_ini(ExperimentConfig{}))) == to_ini(ExperimentConfig{}));
}

TEST_CASE("config parsing rejects unknown keys and bad values") {
  CHECK(kind_of([] { parse_config("[network]\nwidth = 0.2\n"); }) == ErrorKind::InvalidConfig);
  CHECK(kind_of([] { parse_config("[nonsense]\nx = 1\n"); }) == ErrorKind::InvalidConfig);
  CHECK(kind_of([] { parse_config("experiment = train\n"); }) == ErrorKind::InvalidConfig);
  CHECK(kind_of([] { parse_config("[optimizer]\nepochs = many\n"); }) == ErrorKind::InvalidConfig);
  CHECK(kind_of([] { parse_config("[network]\nbatchnorm = maybe\n"); }) == ErrorKind::InvalidConfig);
  const ExperimentConfig c = parse_config("seed = 7\n[kf]\ntaps = conv6\nlambdas = 1\n");
  CHECK(c.seed == 7);
  CHECK(c.kf.taps == std::vector<std::string>{"conv6"});
}

TEST_CASE("overrides") {
  ExperimentConfig c;
  apply_override(c, "optimizer.lr_start=0.05");
  apply_override(c, "seed=3");
  apply_override(c, "kf.taps=conv3,conv6");
  CHECK(c.optimizer.lr_start == 0.05);
  CHECK(c.seed == 3);
  CHECK(c.kf.taps.size() == 2);
  CHECK(kind_of([&] { apply_override(c, "optimizer.lr"); }) == ErrorKind::InvalidConfig);
  CHECK(kind_of([&] { apply_override(c, "optimizer.speed=1"); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("every documented key parses") {
  const auto keys = documented_keys();
  CHECK(keys.size() > 40);
  const std::string ini = "\n" + to_ini(ExperimentConfig{});
  for (const auto& [key, doc] : keys) {
    CHECK_FALSE(doc.empty());
    const auto dot = key.find('.');
    const std::string leaf = dot == std::string::npos ? key : key.substr(dot + 1);
    CHECK(ini.find("\n" + leaf + " =") != std::string::npos);
  }
}

TEST_CASE("config validation") {
  ExperimentConfig c;
  CHECK_NOTHROW(c.validate());
  c.optimizer.lr_end = 1.0;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::InvalidConfig);
  c = {};
  c.optimizer.epochs = 0;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::InvalidConfig);
  c = {};
  c.kf.taps = {"conv3", "conv6"};
  c.kf.lambdas = {1, 2, 3};
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::InvalidConfig);
  c = {};
  c.network.dropout_conv = 1.0;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::InvalidProbability);
}

TEST_CASE("random streams are independent and reproducible") {
  auto a = stream_rng(1, 2), b = stream_rng(1, 2), c = stream_rng(1, 3), d = stream_rng(2, 2);
  const auto x = a();
  CHECK(x == b());
  CHECK(x != c());
  CHECK(x != d());
  CHECK(stream_rng(1, 2, 0)() != stream_rng(1, 2, 1)());
}

TEST_CASE("swissroll run output contract") {
  TempDir dir;
  ExperimentConfig c;
  c.experiment = Kind::Swissroll;
  c.out_dir = (dir.path / "sw").string();
  c.swissroll.steps = 400;
  c.swissroll.checkpoint_every = 100;
  const RunRecord rec = run(c);
  CHECK(fs::exists(rec.out_dir / "trajectory.csv"));
  CHECK(fs::exists(rec.out_dir / "summary.csv"));
  CHECK(fs::exists(rec.out_dir / "config.ini"));
  CHECK(fs::exists(rec.checkpoint));
  std::size_t clouds = 0;
  for (const auto& e : fs::directory_iterator(rec.out_dir)) clouds += e.path().filename().string().starts_with("points_step_");
  CHECK(clouds >= 5);
  CHECK(rec.summary.at("checkpoints") == static_cast<double>(clouds));
  CHECK(std::isfinite(rec.summary.at("final_e2")));

  // the snapshot reproduces the run
  ExperimentConfig again = load_config(rec.out_dir / "config.ini");
  again.out_dir = (dir.path / "sw2").string();
  const RunRecord rec2 = run(again);
  CHECK(slurp(rec.out_dir / "trajectory.csv") == slurp(rec2.out_dir / "trajectory.csv"));
}

TEST_CASE("grad-check run passes") {
  TempDir dir;
  ExperimentConfig c;
  c.experiment = Kind::GradCheck;
  c.out_dir = dir.path.string();
  const RunRecord rec = run(c);
  CHECK(rec.passed);
  CHECK(rec.summary.at("max_rel_error") <= 1e-4);
  CHECK(fs::exists(dir.path / "gradcheck.csv"));
}

TEST_CASE("train-cnn is bit reproducible and reduces to plain cross-entropy") {
  if (!have_mnist()) {
    MESSAGE("MNIST files not found under " << KFLOW_MNIST_DIR << "; skipped");
    return;
  }
  TempDir dir;
  ExperimentConfig plain = tiny_cnn(dir.path / "plain");
  const RunRecord a = run(plain);
  plain.out_dir = (dir.path / "plain2").string();
  run(plain);
  CHECK(slurp(dir.path / "plain" / "metrics.csv") == slurp(dir.path / "plain2" / "metrics.csv"));
  CHECK(a.metrics.size() == 1);

  ExperimentConfig zero = tiny_cnn(dir.path / "zero");
  zero.kf.taps = {"conv6"};
  zero.kf.lambdas = {0.0};
  run(zero);
  CHECK(slurp(dir.path / "plain" / "metrics.csv") == slurp(dir.path / "zero" / "metrics.csv"));

  // first and last logged rates are the configured endpoints
  std::ifstream traj(dir.path / "plain" / "trajectory.csv");
  std::string line, first, last;
  std::getline(traj, line);
  std::getline(traj, first);
  last = first;
  while (std::getline(traj, line))
    if (!line.empty()) last = line;
  auto lr_of = [](const std::string& row) { return std::stod(row.substr(row.find(',') + 1)); };
  CHECK(lr_of(first) == plain.optimizer.lr_start);
  CHECK(lr_of(last) == plain.optimizer.lr_end);
}

TEST_CASE("compare summaries") {
  if (!have_mnist()) {
    MESSAGE("MNIST files not found under " << KFLOW_MNIST_DIR << "; skipped");
    return;
  }
  TempDir dir;
  const ExperimentConfig c = tiny_cnn(dir.path);
  const auto one = compare({{"solo", c}}, {0}, dir.path / "one");
  REQUIRE(one.size() == 1);
  CHECK(one[0].stddev == 0.0);
  CHECK(one[0].failures.empty());
  CHECK(one[0].mean == one[0].test_errors[0]);
  CHECK(one[0].median == one[0].test_errors[0]);

  const auto two = compare({{"a", c}, {"b", c}}, {0}, dir.path / "two");
  REQUIRE(two.size() == 2);
  CHECK(two[0].test_errors == two[1].test_errors);
  CHECK(two[0].mean == two[1].mean);
  CHECK(two[0].test_errors == one[0].test_errors);
  CHECK(fs::exists(dir.path / "two" / "compare.csv"));
  CHECK(fs::exists(dir.path / "two" / "runs.csv"));

  ExperimentConfig broken = c;
  broken.data.dir = (dir.path / "missing").string();
  const auto partial = compare({{"ok", c}, {"broken", broken}}, {0}, dir.path / "partial");
  CHECK(partial[0].failures.empty());
  CHECK(partial[1].failures.size() == 1);
  CHECK(partial[1].test_errors.empty());
}
