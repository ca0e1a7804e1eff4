#include "kflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "kflow/error.hpp"
#include "kflow/kernels.hpp"

namespace kflow::metrics {

namespace {

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

void require_eval(const nn::NetworkState& net, const char* what) {
  if (net.mode != nn::Mode::Eval) throw Error(ErrorKind::InvalidConfig, std::string(what) + " needs an eval-mode network");
}

template <class Fn>
void for_each_batch(std::size_t n, std::size_t batch_size, Fn&& fn) {
  if (batch_size == 0) throw Error(ErrorKind::InvalidConfig, "batch size must be positive");
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> rows(std::min(batch_size, n - start));
    std::iota(rows.begin(), rows.end(), start);
    fn(rows);
  }
}

}  // namespace

double classification_error(const Tensor& logits, const linalg::Matrix& labels) {
  if (logits.rank() != 2 || logits.shape[0] != labels.rows() || logits.shape[1] != labels.cols())
    throw Error(ErrorKind::ShapeMismatch, "logits " + shape_string(logits.shape) + " vs labels " +
                                              std::to_string(labels.rows()) + "x" + std::to_string(labels.cols()));
  if (labels.rows() == 0) return 0.0;
  const std::size_t m = labels.cols();
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.rows(); ++i) {
    std::span<const double> row(logits.data.data() + i * m, m);
    if (argmax(row) != argmax(labels.row(i))) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(labels.rows());
}

double classification_error(nn::NetworkState& net, const data::Dataset& dataset, std::size_t batch_size) {
  require_eval(net, "classification_error");
  if (dataset.size() == 0) return 0.0;
  std::size_t wrong = 0;
  for_each_batch(dataset.size(), batch_size, [&](const std::vector<std::size_t>& rows) {
    ad::Tape tape;
    const Tensor logits = nn::forward_with_taps(net, tape, tape.constant(dataset.x.gather(rows))).output.value();
    const std::size_t m = dataset.y.cols();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::span<const double> row(logits.data.data() + i * m, m);
      if (argmax(row) != argmax(dataset.y.row(rows[i]))) ++wrong;
    }
  });
  return static_cast<double>(wrong) / static_cast<double>(dataset.size());
}

DistanceRatioReport distance_ratio(const Tensor& features, std::span<const int> labels, std::string tap) {
  const linalg::Matrix f = features.to_matrix();
  if (f.rows() != labels.size())
    throw Error(ErrorKind::ShapeMismatch, std::to_string(f.rows()) + " feature rows vs " + std::to_string(labels.size()) + " labels");
  double in_sum = 0.0, inter_sum = 0.0;
  std::size_t in_count = 0, inter_count = 0;
  for (std::size_t i = 0; i < f.rows(); ++i)
    for (std::size_t j = i + 1; j < f.rows(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < f.cols(); ++k) {
        const double d = f(i, k) - f(j, k);
        s += d * d;
      }
      if (labels[i] == labels[j]) {
        in_sum += std::sqrt(s);
        ++in_count;
      } else {
        inter_sum += std::sqrt(s);
        ++inter_count;
      }
    }
  if (in_count == 0 || inter_count == 0)
    throw Error(ErrorKind::DegenerateBatch, in_count == 0 ? "no same-class pair" : "no cross-class pair");
  DistanceRatioReport r;
  r.tap = std::move(tap);
  r.mean_inclass = in_sum / static_cast<double>(in_count);
  r.mean_interclass = inter_sum / static_cast<double>(inter_count);
  r.defined = r.mean_inclass > 0.0;
  r.ratio = r.defined ? r.mean_interclass / r.mean_inclass : 0.0;
  return r;
}

std::map<std::string, DistanceRatioReport> batched_distance_ratio(nn::NetworkState& net, const data::Dataset& dataset,
                                                                  kf::KFLossConfig& config) {
  require_eval(net, "distance_ratio");
  if (!dataset.categorical()) throw Error(ErrorKind::InvalidConfig, "distance ratio needs class labels");
  struct Acc {
    double inter = 0.0, in = 0.0, ratio = 0.0;
    std::size_t batches = 0, ratios = 0;
  };
  std::map<std::string, Acc> acc;
  for_each_batch(dataset.size(), config.batch_size, [&](const std::vector<std::size_t>& rows) {
    ad::Tape tape;
    ad::Var x = tape.constant(dataset.x.gather(rows));
    const nn::ForwardResult fwd = nn::forward_with_taps(net, tape, x);
    std::vector<int> labels;
    labels.reserve(rows.size());
    for (std::size_t r : rows) labels.push_back(dataset.classes[r]);
    for (auto& t : config.taps) {
      const Tensor features = kernels::feature_map(t.kernel, x, fwd.taps).value();
      DistanceRatioReport rep;
      try {
        rep = distance_ratio(features, labels);
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::DegenerateBatch) continue;
        throw;
      }
      Acc& a = acc[t.kernel.name];
      a.inter += rep.mean_interclass;
      a.in += rep.mean_inclass;
      ++a.batches;
      if (rep.defined) {
        a.ratio += rep.ratio;
        ++a.ratios;
      }
    }
  });
  std::map<std::string, DistanceRatioReport> out;
  for (auto& t : config.taps) {
    DistanceRatioReport r;
    r.tap = t.kernel.name;
    auto it = acc.find(t.kernel.name);
    if (it == acc.end() || it->second.batches == 0)
      throw Error(ErrorKind::DegenerateBatch, "no usable batch for tap " + t.kernel.name);
    const Acc& a = it->second;
    r.mean_interclass = a.inter / static_cast<double>(a.batches);
    r.mean_inclass = a.in / static_cast<double>(a.batches);
    r.defined = a.ratios > 0;
    r.ratio = r.defined ? a.ratio / static_cast<double>(a.ratios) : 0.0;
    out[r.tap] = r;
  }
  return out;
}

std::map<std::string, double> kf_probe(nn::NetworkState& net, const data::Dataset& dataset, kf::KFLossConfig& config,
                                       std::size_t n_splits, std::mt19937_64& rng) {
  require_eval(net, "kf_probe");
  if (n_splits == 0) throw Error(ErrorKind::InvalidConfig, "kf_probe needs at least one split");
  std::map<std::string, double> sums;
  for (std::size_t s = 0; s < n_splits; ++s) {
    const kf::BatchSplit split = kf::sample_split(dataset, config, rng);
    const Tensor yb = dataset.labels(split.batch_indices);
    const Tensor yc = yb.gather(split.half_indices);
    ad::Tape tape;
    ad::Var x = tape.constant(dataset.x.gather(split.batch_indices));
    const nn::ForwardResult fwd = nn::forward_with_taps(net, tape, x);
    for (auto& t : config.taps) {
      ad::Var features = kernels::feature_map(t.kernel, x, fwd.taps);
      kernels::GramPair g = kernels::gram(features, tape.constant(t.kernel.log_gamma), split.half_indices);
      sums[t.kernel.name] += kf::e2_loss(g, yb, yc, config.nugget).item();
    }
  }
  for (auto& [name, v] : sums) v /= static_cast<double>(n_splits);
  return sums;
}

}  // namespace kflow::metrics
