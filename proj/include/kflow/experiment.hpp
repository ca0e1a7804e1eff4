#pragma once

// Config-driven experiment runs: swissroll kernel learning, KF-regularized CNN
// training, gradient checks and multi-seed comparisons.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kflow/data.hpp"
#include "kflow/kf.hpp"

namespace kflow::exp {

enum class Kind { Swissroll, TrainCnn, GradCheck };

struct ExperimentConfig {
  Kind experiment = Kind::TrainCnn;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/out";

  struct Data {
    std::string dir = "data/mnist";
    std::string train_images, train_labels, test_images, test_labels;
    std::string shifted_images, shifted_labels;  // optional alternate test set
    std::size_t train_limit = 5000;              // 0 keeps every sample
    std::size_t test_limit = 1000;
  } data;

  struct Network {
    double width_factor = 0.1;
    bool batchnorm = true;
    double dropout_conv = 0.0;
    double dropout_dense = 0.0;
  } network;

  struct KF {
    std::vector<std::string> taps;     // loss taps
    std::vector<double> lambdas;       // one per tap, or a single value for all
    std::vector<std::string> probe_taps{"conv6"};
    double ce_weight = 1.0;
    kf::Sampling sampling = kf::Sampling::Uniform;
    std::size_t per_class = 5;
    std::size_t batch_size = 100;
    std::optional<double> gamma_init;  // empty: median heuristic on the first batch
    double nugget_min = 0.0;           // drops ladder rungs below this value
    std::size_t probe_splits = 10;
    bool probe_heldout = true;
  } kf;

  struct Optimizer {
    double lr_start = 1e-2;
    double lr_end = 1e-6;
    std::size_t epochs = 5;
    double momentum = 0.0;
  } optimizer;

  struct Augment {
    bool enabled = false;
    data::AugmentPolicy policy;
  } augment;

  struct Swissroll {
    std::size_t n_per_class = 250;
    double turns = 1.5;
    double noise = 0.1;
    std::size_t hidden = 16;
    std::size_t steps = 2000;
    std::size_t batch_size = 100;
    std::size_t checkpoint_every = 400;
    kf::Objective objective = kf::Objective::E2;
    double lr_start = 1e-4;
    double lr_end = 1e-4;
    double nugget_min = 1e-4;
    std::size_t eval_splits = 20;
  } swissroll;

  struct GradCheck {
    double tol = 1e-4;
    std::size_t batch_size = 16;
    double step = 1e-5;
  } gradcheck;

  void validate() const;
};

std::string to_string(Kind kind);
Kind parse_kind(const std::string& s);

/// Reads an INI file (top-level keys plus [section] blocks). Unknown keys throw InvalidConfig.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text);
/// Applies "section.key=value" (or "key=value" for top-level keys).
void apply_override(ExperimentConfig& config, const std::string& assignment);
/// Every field, in INI form; parse_config(to_ini(c)) reproduces c exactly.
std::string to_ini(const ExperimentConfig& config);
/// "section.key" -> one-line description with the default value.
std::vector<std::pair<std::string, std::string>> documented_keys();

/// lr_start * (lr_end / lr_start)^(step / total_steps).
double lr_at(std::size_t step, std::size_t total_steps, double lr_start, double lr_end);

/// Independent generator for (seed, stream[, sub]).
std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t sub = 0);

struct MetricsRow {
  std::size_t epoch = 0;
  double train_error = 0.0;
  double test_error = 0.0;
  std::optional<double> test_error_shifted;
  std::map<std::string, double> kf_probe;
  std::map<std::string, double> ratio;
};

struct RunRecord {
  ExperimentConfig config;
  std::filesystem::path out_dir;
  std::vector<MetricsRow> metrics;
  std::filesystem::path checkpoint;
  double wall_seconds = 0.0;
  bool passed = true;                      // grad-check verdict
  std::map<std::string, double> summary;   // experiment-specific scalars
};

/// Executes one experiment and writes its outputs under config.out_dir:
/// config.ini, trajectory.csv, metrics.csv / summary.csv, checkpoint.kfa and,
/// for swissroll, points_step_<n>.csv.
RunRecord run(const ExperimentConfig& config);

struct CompareEntry {
  std::string label;
  ExperimentConfig config;
};

struct CompareRow {
  std::string label;
  std::vector<std::uint64_t> seeds;
  std::vector<double> test_errors;
  std::vector<double> generalization_gaps;  // final test error - train error
  std::vector<std::map<std::string, double>> final_ratios;
  std::vector<std::string> failures;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single run
  double median = 0.0;
};

/// Runs every entry under every seed (out_dir/<label>/seed<k>), writes
/// out_dir/compare.csv and out_dir/runs.csv. A failing run is recorded and the
/// remaining runs still execute.
std::vector<CompareRow> compare(const std::vector<CompareEntry>& entries, const std::vector<std::uint64_t>& seeds,
                                const std::filesystem::path& out_dir);

}  // namespace kflow::exp
