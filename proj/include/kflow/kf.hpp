#pragma once

// Kernel Flows: nested batch sampling, the rho and e2 losses, the combined
// classifier objective with per-tap KF terms, and the standalone kernel
// learning loop.

#include <cstddef>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kflow/autodiff.hpp"
#include "kflow/data.hpp"
#include "kflow/kernels.hpp"
#include "kflow/nn.hpp"

namespace kflow::kf {

enum class Sampling { Uniform, ClassBalanced, ClassCovering };

struct BatchSplit {
  std::vector<std::size_t> batch_indices;  // into the dataset
  std::vector<std::size_t> half_indices;   // positions within batch_indices
};

struct TapLoss {
  kernels::KernelSpec kernel;
  double weight = 1.0;
};

struct KFLossConfig {
  std::vector<TapLoss> taps;
  double ce_weight = 1.0;
  Sampling sampling = Sampling::Uniform;
  std::size_t per_class = 5;  // half-batch count per class under ClassBalanced
  std::size_t batch_size = 100;
  linalg::NuggetPolicy nugget;

  void validate() const;
};

inline constexpr std::size_t kCoverageAttempts = 1000;
inline constexpr double kDegenerateDenominator = 1e-12;

/// Uniform: batch and half drawn without replacement. ClassBalanced: the half
/// holds exactly per_class samples of every class (per_class * classes must be
/// floor(N_b/2)). ClassCovering: the half is redrawn until every class of the
/// batch appears in it.
BatchSplit sample_split(const data::Dataset& dataset, const KFLossConfig& config, std::mt19937_64& rng);

/// 1 - tr(Yc^T Kcc^{-1} Yc) / tr(Yb^T Kbb^{-1} Yb).
ad::Var rho_loss(const kernels::GramPair& gram, const Tensor& yb, const Tensor& yc,
                 const linalg::NuggetPolicy& policy = {});
/// ||Yb - Kbc Kcc^{-1} Yc||_F^2.
ad::Var e2_loss(const kernels::GramPair& gram, const Tensor& yb, const Tensor& yc,
                const linalg::NuggetPolicy& policy = {});

struct LossTerms {
  ad::Var total;
  ad::Var ce;
  /// Unweighted e2 of every configured tap, including zero-weight ones.
  std::map<std::string, ad::Var> kf;
  nn::ForwardResult forward;
};

/// sum_l lambda_l e2_l + ce_weight * CE(f(Xb), Yb) from one forward pass.
/// Network parameters are tape variables named after the parameter,
/// bandwidths are named log_gamma.<kernel>. Zero-weight taps are evaluated but
/// left out of the total.
LossTerms combined_loss(nn::NetworkState& net, ad::Tape& tape, const Tensor& xb, const Tensor& yb,
                        std::span<const std::size_t> half, KFLossConfig& config,
                        std::mt19937_64* dropout_rng = nullptr);
LossTerms combined_loss(nn::NetworkState& net, ad::Tape& tape, const data::Dataset& dataset, const BatchSplit& split,
                        KFLossConfig& config, std::mt19937_64* dropout_rng = nullptr);

enum class Objective { Rho, E2 };

struct FitOptions {
  std::size_t steps = 2000;
  std::size_t batch_size = 100;
  std::size_t checkpoint_every = 400;
  Sampling sampling = Sampling::Uniform;
  bool train_gamma = true;
  linalg::NuggetPolicy nugget;
  std::function<double(std::size_t)> lr = [](std::size_t) { return 1e-2; };
};

struct FitStep {
  std::size_t step;
  double lr;
  double loss;
  double gamma;
};

struct PointCloud {
  std::size_t step;
  Tensor points;  // F(X) over the whole dataset
};

struct FitResult {
  kernels::KernelSpec spec;
  std::vector<FitStep> trajectory;
  std::vector<PointCloud> clouds;
};

/// Steps: draw a split, evaluate the loss on F(Xb), step the deformation
/// parameters and log gamma by -lr * gradient. Point clouds are taken at step 0,
/// every checkpoint_every steps and after the last step.
FitResult kernel_flow_fit(const data::Dataset& dataset, kernels::KernelSpec spec, Objective objective,
                          const FitOptions& options, std::mt19937_64& rng);

/// F(X) of a raw or deformation kernel, off the tape.
Tensor deform(kernels::KernelSpec& spec, const Tensor& x);

}  // namespace kflow::kf
