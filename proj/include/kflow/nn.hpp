#pragma once

// Sequential networks with named taps on inner-layer outputs.

#include <cstddef>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "kflow/autodiff.hpp"
#include "kflow/tensor.hpp"

namespace kflow::nn {

struct Conv {
  std::size_t filters;
  std::size_t kernel;
  ad::Padding padding;
};
struct Relu {};
struct MaxPool2x2 {};
struct AvgPoolGlobal {};
struct Dense {
  std::size_t out;
};
struct BatchNorm {};
struct Dropout {
  double p;
};
/// Marks the logits; cross-entropy is applied by the loss, not by the network.
struct SoftmaxHead {};

using LayerKind = std::variant<Conv, Relu, MaxPool2x2, AvgPoolGlobal, Dense, BatchNorm, Dropout, SoftmaxHead>;

struct LayerSpec {
  std::string name;
  LayerKind kind;
};

struct NetworkSpec {
  Shape input_shape;  // per sample, e.g. {28, 28, 1} or {2}
  std::vector<LayerSpec> layers;
  std::map<std::string, std::size_t> taps;  // tap name -> layer index whose output is tapped

  /// Appends a layer; an empty name becomes <kind><ordinal>, e.g. conv3.
  NetworkSpec& add(LayerKind kind, std::string name = {});
  /// Taps the output of the most recently added layer.
  NetworkSpec& tap(const std::string& name);

  /// Per-sample output shape of every layer. Throws InvalidSpec naming the first bad layer.
  std::vector<Shape> infer_shapes() const;
  Shape output_shape() const;
  Shape tap_shape(const std::string& tap) const;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

enum class Mode { Train, Eval };

struct NetworkState {
  NetworkSpec spec;
  std::map<std::string, Tensor> params;   // <layer>.weight, <layer>.bias, <bn>.gamma, <bn>.beta
  std::map<std::string, Tensor> buffers;  // <bn>.running_mean, <bn>.running_var
  Mode mode = Mode::Train;

  std::size_t parameter_count() const;
  std::vector<ad::ParamRef> param_refs(const std::string& prefix = {});
};

/// He-normal weights (std sqrt(2/fan_in)), zero biases, BN scale 1 / shift 0.
NetworkState build(const NetworkSpec& spec, std::mt19937_64& rng);

struct ForwardResult {
  ad::Var output;
  std::map<std::string, ad::Var> taps;
};

/// One pass over a batch (N, input_shape...). Parameters are registered on the
/// tape as variables named prefix + param name. In train mode dropout masks
/// are drawn from `dropout_rng` and BN running statistics are updated.
ForwardResult forward_with_taps(NetworkState& net, ad::Tape& tape, const ad::Var& x,
                                std::mt19937_64* dropout_rng = nullptr, const std::string& prefix = {});

/// The six-conv / three-dense MNIST classifier with channel counts scaled by
/// `width_factor` (1.0 -> 150/300 channels, dense 1200/300). Taps conv1..conv6
/// sit after each conv block's ReLU and pooling; dense1, dense2 after their ReLU.
/// With `batchnorm`, a BN layer follows every conv, before its ReLU.
NetworkSpec table1_spec(double width_factor, bool batchnorm);

/// Inserts inverted dropout after every ReLU that follows a conv (p_conv) or a dense layer (p_dense).
NetworkSpec dropout_baseline(const NetworkSpec& spec, double p_conv, double p_dense);

/// input -> [dense(h), relu]* -> dense(output).
NetworkSpec mlp_spec(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t output_dim);

// Named-tensor archive, text format:
//   kflow-archive 1
//   <count>
//   then per tensor: "<name> <rank> <d0> ... <d_{rank-1}>" and one line of values (%.17g).
void save_archive(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_archive(const std::filesystem::path& path);

}  // namespace kflow::nn
