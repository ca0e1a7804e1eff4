#pragma once

#include <cstddef>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "kflow/linalg.hpp"
#include "kflow/tensor.hpp"

namespace kflow::data {

struct Dataset {
  Tensor x;          // (N, sample shape...)
  linalg::Matrix y;  // (N, m): one-hot rows for classification, real values for regression
  /// Per-sample class id and class -> sample indices; empty when the labels are not categorical.
  std::vector<int> classes;
  std::vector<std::vector<std::size_t>> class_index;

  std::size_t size() const noexcept { return y.rows(); }
  std::size_t num_classes() const noexcept { return class_index.size(); }
  bool categorical() const noexcept { return !classes.empty(); }

  Dataset subset(std::span<const std::size_t> rows) const;
  /// Rows `rows` of Y as a tensor.
  Tensor labels(std::span<const std::size_t> rows) const;
};

/// Fills `classes` / `class_index` from the given per-sample ids.
void index_classes(Dataset& d, std::vector<int> classes, std::size_t num_classes);

linalg::Matrix one_hot(std::span<const int> labels, std::size_t num_classes);

/// Two interleaved spirals in the plane. Label +1 (class 0) at (t cos t, t sin t),
/// label -1 (class 1) at the half-turn rotation, t ~ U[pi/2, 2 pi turns], plus
/// isotropic Gaussian noise. Y is N x 1.
Dataset swissroll(std::size_t n_per_class, double turns, double noise_std, std::mt19937_64& rng);

/// Big-endian IDX pair: images magic 0x00000803 (N, rows, cols) and labels
/// magic 0x00000801 (N). Pixels are scaled to [0,1]; labels one-hot over 10 classes.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
/// Inverse of load_idx for single-channel image datasets (pixels rounded to bytes).
void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const Dataset& d);

struct AugmentPolicy {
  double p_identity = 0.5;
  double p_affine = 0.5;
  double max_translation = 2.0;  // pixels
  double max_rotation_deg = 10.0;
  double max_shear = 0.1;

  void validate() const;
};

struct AffineParams {
  double dx = 0.0;  // columns
  double dy = 0.0;  // rows
  double rotation_deg = 0.0;
  double shear = 0.0;
};

/// Resamples every (H, W, 1) image of an (N, H, W, 1) batch under the map
/// p -> R S (p - c) + c + t about the image centre, bilinear with zero fill.
Tensor affine_transform(const Tensor& images, const AffineParams& params);

/// Per image: identity with p_identity, otherwise a uniformly drawn small affine map.
Tensor augment(const Tensor& images, const AugmentPolicy& policy, std::mt19937_64& rng);

}  // namespace kflow::data
