#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <span>
#include <string>

#include "kflow/data.hpp"
#include "kflow/kf.hpp"
#include "kflow/linalg.hpp"
#include "kflow/nn.hpp"

namespace kflow::metrics {

/// Fraction of rows whose logit argmax differs from the label argmax (first maximum wins).
double classification_error(const Tensor& logits, const linalg::Matrix& labels);
/// Batched eval-mode error over a dataset. Throws InvalidConfig for a train-mode network.
double classification_error(nn::NetworkState& net, const data::Dataset& dataset, std::size_t batch_size = 500);

struct DistanceRatioReport {
  std::string tap;
  double mean_interclass = 0.0;
  double mean_inclass = 0.0;
  double ratio = 0.0;
  bool defined = false;  // false when mean_inclass == 0
};

/// Mean Euclidean distance over all same-class and all cross-class unordered pairs of rows.
DistanceRatioReport distance_ratio(const Tensor& features, std::span<const int> labels, std::string tap = {});

/// Eval-mode features of every kernel in `config.taps` over `dataset`, batch by
/// batch of `config.batch_size`; the per-batch ratios are averaged.
std::map<std::string, DistanceRatioReport> batched_distance_ratio(nn::NetworkState& net, const data::Dataset& dataset,
                                                                  kf::KFLossConfig& config);

/// Mean e2 of every configured tap over `n_splits` fresh splits of `dataset`
/// with the current bandwidths. No gradients are taken.
std::map<std::string, double> kf_probe(nn::NetworkState& net, const data::Dataset& dataset, kf::KFLossConfig& config,
                                       std::size_t n_splits, std::mt19937_64& rng);

}  // namespace kflow::metrics
