#include "kflow/kf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "kflow/error.hpp"

namespace kflow::kf {

void KFLossConfig::validate() const {
  if (taps.empty() && !(ce_weight > 0.0))
    throw Error(ErrorKind::InvalidConfig, "loss needs at least one tap or a positive cross-entropy weight");
  if (!std::isfinite(ce_weight) || ce_weight < 0.0) throw Error(ErrorKind::InvalidConfig, "ce_weight must be finite and >= 0");
  std::set<std::string> names;
  for (const auto& t : taps) {
    if (!std::isfinite(t.weight) || t.weight < 0.0)
      throw Error(ErrorKind::InvalidConfig, "tap weight for '" + t.kernel.name + "' must be finite and >= 0");
    if (!names.insert(t.kernel.name).second)
      throw Error(ErrorKind::InvalidConfig, "tap '" + t.kernel.name + "' listed twice");
  }
  if (batch_size < 2) throw Error(ErrorKind::InvalidConfig, "batch size must be at least 2");
  if (sampling == Sampling::ClassBalanced && per_class == 0)
    throw Error(ErrorKind::InvalidConfig, "class-balanced sampling needs a positive per-class count");
}

namespace {

/// k distinct draws from `pool` (partial Fisher-Yates; `pool` is permuted in place).
std::vector<std::size_t> draw(std::vector<std::size_t>& pool, std::size_t k, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  return {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k)};
}

std::vector<std::size_t> range(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

std::vector<std::size_t> uniform_half(std::size_t batch, std::mt19937_64& rng) {
  auto pool = range(batch);
  auto half = draw(pool, batch / 2, rng);
  std::sort(half.begin(), half.end());
  return half;
}

void require_categorical(const data::Dataset& d) {
  if (!d.categorical()) throw Error(ErrorKind::InvalidConfig, "class-aware sampling needs class labels");
}

}  // namespace

BatchSplit sample_split(const data::Dataset& dataset, const KFLossConfig& config, std::mt19937_64& rng) {
  const std::size_t nb = config.batch_size;
  if (nb < 2) throw Error(ErrorKind::InvalidConfig, "batch size must be at least 2");
  if (dataset.size() < nb)
    throw Error(ErrorKind::InsufficientData,
                "dataset of " + std::to_string(dataset.size()) + " samples, batch of " + std::to_string(nb));
  BatchSplit split;

  if (config.sampling == Sampling::ClassBalanced) {
    require_categorical(dataset);
    const std::size_t classes = dataset.num_classes();
    if (config.per_class * classes != nb / 2)
      throw Error(ErrorKind::InvalidConfig, std::to_string(config.per_class) + " per class x " + std::to_string(classes) +
                                                " classes does not fill a half batch of " + std::to_string(nb / 2));
    std::vector<std::size_t> half_members;
    std::vector<bool> taken(dataset.size(), false);
    for (std::size_t c = 0; c < classes; ++c) {
      auto pool = dataset.class_index[c];
      if (pool.size() < config.per_class)
        throw Error(ErrorKind::InsufficientData, "class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                                                     " samples, need " + std::to_string(config.per_class));
      for (std::size_t i : draw(pool, config.per_class, rng)) {
        half_members.push_back(i);
        taken[i] = true;
      }
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < dataset.size(); ++i)
      if (!taken[i]) rest.push_back(i);
    std::vector<std::size_t> batch = half_members;
    for (std::size_t i : draw(rest, nb - half_members.size(), rng)) batch.push_back(i);
    std::shuffle(batch.begin(), batch.end(), rng);
    for (std::size_t pos = 0; pos < batch.size(); ++pos)
      if (taken[batch[pos]]) split.half_indices.push_back(pos);
    split.batch_indices = std::move(batch);
    return split;
  }

  auto pool = range(dataset.size());
  split.batch_indices = draw(pool, nb, rng);
  if (config.sampling == Sampling::Uniform) {
    split.half_indices = uniform_half(nb, rng);
    return split;
  }

  require_categorical(dataset);
  for (std::size_t attempt = 0; attempt < kCoverageAttempts; ++attempt) {
    auto half = uniform_half(nb, rng);
    std::vector<bool> in_half_class(dataset.num_classes(), false);
    std::vector<bool> in_half(nb, false);
    for (std::size_t pos : half) {
      in_half[pos] = true;
      in_half_class[static_cast<std::size_t>(dataset.classes[split.batch_indices[pos]])] = true;
    }
    bool covered = true;
    for (std::size_t pos = 0; pos < nb && covered; ++pos)
      if (!in_half[pos] && !in_half_class[static_cast<std::size_t>(dataset.classes[split.batch_indices[pos]])])
        covered = false;
    if (covered) {
      split.half_indices = std::move(half);
      return split;
    }
  }
  throw Error(ErrorKind::CoverageUnsatisfiable,
              "no covering half after " + std::to_string(kCoverageAttempts) + " attempts");
}

namespace {

void check_labels(const kernels::GramPair& gram, const Tensor& yb, const Tensor& yc) {
  const std::size_t nb = gram.k_bb.shape()[0];
  const std::size_t nc = gram.k_cc.shape()[0];
  if (yb.rank() != 2 || yc.rank() != 2 || yb.shape[0] != nb || yc.shape[0] != nc || yb.shape[1] != yc.shape[1])
    throw Error(ErrorKind::ShapeMismatch, "labels " + shape_string(yb.shape) + " / " + shape_string(yc.shape) +
                                              " do not match a gram of " + std::to_string(nb) + " / " + std::to_string(nc));
}

}  // namespace

ad::Var rho_loss(const kernels::GramPair& gram, const Tensor& yb, const Tensor& yc, const linalg::NuggetPolicy& policy) {
  check_labels(gram, yb, yc);
  ad::Tape& tape = gram.k_bb.tape();
  ad::Var vb = tape.constant(yb);
  ad::Var vc = tape.constant(yc);
  ad::Var num = ad::sum(ad::mul(vc, ad::solve(gram.k_cc, vc, policy)));
  ad::Var den = ad::sum(ad::mul(vb, ad::solve(gram.k_bb, vb, policy)));
  if (!(std::abs(den.item()) >= kDegenerateDenominator))
    throw Error(ErrorKind::DegenerateDenominator, "Yb^T Kbb^{-1} Yb = " + std::to_string(den.item()));
  return ad::sub(tape.constant(Tensor::scalar(1.0)), ad::div(num, den));
}

ad::Var e2_loss(const kernels::GramPair& gram, const Tensor& yb, const Tensor& yc, const linalg::NuggetPolicy& policy) {
  check_labels(gram, yb, yc);
  ad::Tape& tape = gram.k_bb.tape();
  ad::Var pred = kernels::interpolate(gram.k_bc, gram.k_cc, tape.constant(yc), policy);
  return ad::sum(ad::square(ad::sub(tape.constant(yb), pred)));
}

LossTerms combined_loss(nn::NetworkState& net, ad::Tape& tape, const Tensor& xb, const Tensor& yb,
                        std::span<const std::size_t> half, KFLossConfig& config, std::mt19937_64* dropout_rng) {
  config.validate();
  LossTerms terms;
  ad::Var x = tape.constant(xb);
  terms.forward = nn::forward_with_taps(net, tape, x, dropout_rng);
  terms.ce = ad::softmax_cross_entropy(terms.forward.output, yb);

  std::vector<ad::Var> parts;
  if (config.ce_weight > 0.0) parts.push_back(ad::scale(terms.ce, config.ce_weight));
  if (!config.taps.empty()) {
    kernels::check_half(half, yb.shape.empty() ? 0 : yb.shape[0]);
    const Tensor yc = yb.gather(half);
    for (auto& t : config.taps) {
      ad::Var log_gamma = tape.variable(t.kernel.log_gamma, kernels::log_gamma_name(t.kernel));
      ad::Var features = kernels::feature_map(t.kernel, x, terms.forward.taps);
      ad::Var e2 = e2_loss(kernels::gram(features, log_gamma, half), yb, yc, config.nugget);
      terms.kf[t.kernel.name] = e2;
      if (t.weight > 0.0) parts.push_back(ad::scale(e2, t.weight));
    }
  }
  if (parts.empty()) parts.push_back(ad::scale(terms.ce, 0.0));
  terms.total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) terms.total = ad::add(terms.total, parts[i]);
  return terms;
}

LossTerms combined_loss(nn::NetworkState& net, ad::Tape& tape, const data::Dataset& dataset, const BatchSplit& split,
                        KFLossConfig& config, std::mt19937_64* dropout_rng) {
  return combined_loss(net, tape, dataset.x.gather(split.batch_indices), dataset.labels(split.batch_indices),
                       split.half_indices, config, dropout_rng);
}

Tensor deform(kernels::KernelSpec& spec, const Tensor& x) {
  if (auto* def = std::get_if<kernels::Deformation>(&spec.source)) {
    ad::Tape tape;
    return nn::forward_with_taps(def->net, tape, tape.constant(x)).output.value();
  }
  if (std::holds_alternative<kernels::Raw>(spec.source)) return x;
  throw Error(ErrorKind::UnsupportedOp, "deform needs a raw or deformation kernel");
}

FitResult kernel_flow_fit(const data::Dataset& dataset, kernels::KernelSpec spec, Objective objective,
                          const FitOptions& options, std::mt19937_64& rng) {
  if (std::holds_alternative<kernels::TapSource>(spec.source))
    throw Error(ErrorKind::UnsupportedOp, "kernel_flow_fit needs a raw or deformation kernel");
  if (options.checkpoint_every == 0) throw Error(ErrorKind::InvalidConfig, "checkpoint interval must be positive");
  KFLossConfig cfg;
  cfg.ce_weight = 0.0;
  cfg.batch_size = options.batch_size;
  cfg.sampling = options.sampling;
  cfg.nugget = options.nugget;

  FitResult result{std::move(spec), {}, {}};
  auto* def = std::get_if<kernels::Deformation>(&result.spec.source);
  const std::string prefix = "deform.";
  result.clouds.push_back({0, deform(result.spec, dataset.x)});

  for (std::size_t step = 0; step < options.steps; ++step) {
    const BatchSplit split = sample_split(dataset, cfg, rng);
    const Tensor yb = dataset.labels(split.batch_indices);
    const Tensor yc = yb.gather(split.half_indices);
    ad::Tape tape;
    ad::Var x = tape.constant(dataset.x.gather(split.batch_indices));
    ad::Var log_gamma = options.train_gamma ? tape.variable(result.spec.log_gamma, kernels::log_gamma_name(result.spec))
                                            : tape.constant(result.spec.log_gamma);
    ad::Var features = kernels::feature_map(result.spec, x, {}, prefix);
    kernels::GramPair g = kernels::gram(features, log_gamma, split.half_indices);
    ad::Var loss = objective == Objective::Rho ? rho_loss(g, yb, yc, cfg.nugget) : e2_loss(g, yb, yc, cfg.nugget);
    if (!std::isfinite(loss.item()))
      throw Error(ErrorKind::NumericalFailure, "non-finite loss at step " + std::to_string(step));
    const double lr = options.lr(step);
    const ad::Gradients grads = tape.backward(loss);

    if (def) {
      for (auto& [name, t] : def->net.params) {
        const Tensor& g_t = grads[prefix + name];
        for (std::size_t k = 0; k < t.size(); ++k) t.data[k] -= lr * g_t.data[k];
      }
    }
    if (options.train_gamma) result.spec.log_gamma.data[0] -= lr * grads[kernels::log_gamma_name(result.spec)].item();
    result.trajectory.push_back({step, lr, loss.item(), result.spec.gamma()});

    const std::size_t done = step + 1;
    if (done % options.checkpoint_every == 0 || done == options.steps)
      result.clouds.push_back({done, deform(result.spec, dataset.x)});
  }
  return result;
}

}  // namespace kflow::kf
