#pragma once

// RBF kernels k(x, x') = exp(-gamma ||F(x) - F(x')||^2) on raw inputs, on an
// explicit deformation network F, or on a tapped inner layer of a classifier.

#include <map>
#include <span>
#include <string>
#include <variant>

#include "kflow/autodiff.hpp"
#include "kflow/linalg.hpp"
#include "kflow/nn.hpp"
#include "kflow/tensor.hpp"

namespace kflow::kernels {

enum class Reduce { None, AvgPoolToChannel };

struct Raw {};
struct Deformation {
  nn::NetworkState net;
};
struct TapSource {
  std::string tap;
  Reduce reduce = Reduce::AvgPoolToChannel;
};

using FeatureSource = std::variant<Raw, Deformation, TapSource>;

struct KernelSpec {
  std::string name;
  FeatureSource source;
  Tensor log_gamma = Tensor::scalar(0.0);

  double gamma() const;
  void set_gamma(double gamma);

  static KernelSpec raw(double gamma, std::string name = "raw");
  static KernelSpec deformation(nn::NetworkState net, double gamma, std::string name = "deform");
  static KernelSpec tap(std::string tap, double gamma = 1.0, Reduce reduce = Reduce::AvgPoolToChannel);
};

/// Tape name of the log-bandwidth variable of `spec`.
std::string log_gamma_name(const KernelSpec& spec);

/// (N, d) features on the tape. Tap sources read `taps` (one shared forward
/// pass); deformation sources run their network on `x` with parameters named
/// `prefix` + param name. Rank-4 taps reduce to channel means or flatten.
ad::Var feature_map(KernelSpec& spec, const ad::Var& x, const std::map<std::string, ad::Var>& taps = {},
                    const std::string& prefix = "deform.");

struct GramPair {
  ad::Var k_bb;
  ad::Var k_bc;
  ad::Var k_cc;
};

void check_half(std::span<const std::size_t> half, std::size_t batch);

/// K_bb from the features; K_bc and K_cc are index slices of K_bb.
GramPair gram(const ad::Var& features, const ad::Var& log_gamma, std::span<const std::size_t> half);

/// K_bc (K_cc + eps I)^{-1} Y_c.
ad::Var interpolate(const ad::Var& k_bc, const ad::Var& k_cc, const ad::Var& yc,
                    const linalg::NuggetPolicy& policy = {});

/// 1 / median of the pairwise squared distances between distinct rows; 1 when that median is 0.
double median_gamma(const Tensor& features);

}  // namespace kflow::kernels
