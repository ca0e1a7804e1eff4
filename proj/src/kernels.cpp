#include "kflow/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "kflow/error.hpp"

namespace kflow::kernels {

double KernelSpec::gamma() const { return std::exp(log_gamma.item()); }

void KernelSpec::set_gamma(double gamma) {
  if (!(gamma > 0.0) || !std::isfinite(gamma))
    throw Error(ErrorKind::InvalidRange, "kernel bandwidth must be positive and finite");
  log_gamma = Tensor::scalar(std::log(gamma));
}

KernelSpec KernelSpec::raw(double gamma, std::string name) {
  KernelSpec spec{std::move(name), Raw{}};
  spec.set_gamma(gamma);
  return spec;
}

KernelSpec KernelSpec::deformation(nn::NetworkState net, double gamma, std::string name) {
  KernelSpec spec{std::move(name), Deformation{std::move(net)}};
  spec.set_gamma(gamma);
  return spec;
}

KernelSpec KernelSpec::tap(std::string tap, double gamma, Reduce reduce) {
  KernelSpec spec{tap, TapSource{tap, reduce}};
  spec.set_gamma(gamma);
  return spec;
}

std::string log_gamma_name(const KernelSpec& spec) { return "log_gamma." + spec.name; }

namespace {

ad::Var flatten(const ad::Var& v) {
  const Shape& s = v.shape();
  if (s.size() == 2) return v;
  if (s.empty()) throw Error(ErrorKind::ShapeMismatch, "kernel features need a batch dimension");
  const std::size_t n = s[0];
  return ad::reshape(v, {n, n == 0 ? 0 : v.value().size() / n});
}

}  // namespace

ad::Var feature_map(KernelSpec& spec, const ad::Var& x, const std::map<std::string, ad::Var>& taps,
                    const std::string& prefix) {
  if (auto* def = std::get_if<Deformation>(&spec.source)) {
    return flatten(nn::forward_with_taps(def->net, x.tape(), x, nullptr, prefix).output);
  }
  if (auto* src = std::get_if<TapSource>(&spec.source)) {
    auto it = taps.find(src->tap);
    if (it == taps.end()) throw Error(ErrorKind::UnknownTap, "no tap named '" + src->tap + "'");
    ad::Var h = it->second;
    if (src->reduce == Reduce::AvgPoolToChannel && h.shape().size() == 4) h = ad::avgpool_global(h);
    return flatten(h);
  }
  return flatten(x);
}

void check_half(std::span<const std::size_t> half, std::size_t batch) {
  std::vector<bool> seen(batch, false);
  for (std::size_t i : half) {
    if (i >= batch)
      throw Error(ErrorKind::IndexOutOfRange, "half index " + std::to_string(i) + " outside batch of " + std::to_string(batch));
    if (seen[i]) throw Error(ErrorKind::DuplicateIndex, "half index " + std::to_string(i) + " repeated");
    seen[i] = true;
  }
}

GramPair gram(const ad::Var& features, const ad::Var& log_gamma, std::span<const std::size_t> half) {
  if (features.shape().size() != 2)
    throw Error(ErrorKind::ShapeMismatch, "gram needs (N, d) features, got " + shape_string(features.shape()));
  const std::size_t n = features.shape()[0];
  check_half(half, n);
  ad::Var d = ad::pairwise_sqdist(features);
  ad::Var k_bb = ad::exp(ad::scale(ad::scale(d, ad::exp(log_gamma)), -1.0));
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return {k_bb, ad::select(k_bb, all, half), ad::select(k_bb, half, half)};
}

ad::Var interpolate(const ad::Var& k_bc, const ad::Var& k_cc, const ad::Var& yc, const linalg::NuggetPolicy& policy) {
  return ad::matmul(k_bc, ad::solve(k_cc, yc, policy));
}

double median_gamma(const Tensor& features) {
  const linalg::Matrix f = features.to_matrix();
  std::vector<double> d;
  d.reserve(f.rows() * (f.rows() - (f.rows() > 0)) / 2);
  for (std::size_t i = 0; i < f.rows(); ++i)
    for (std::size_t j = i + 1; j < f.rows(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < f.cols(); ++k) {
        const double diff = f(i, k) - f(j, k);
        s += diff * diff;
      }
      d.push_back(s);
    }
  if (d.empty()) return 1.0;
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double median = d[mid];
  if (d.size() % 2 == 0) {
    const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (median + lower);
  }
  return median > 0.0 ? 1.0 / median : 1.0;
}

}  // namespace kflow::kernels
