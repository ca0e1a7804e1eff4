#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "kflow/linalg.hpp"

namespace kflow {

using Shape = std::vector<std::size_t>;

/// Cache-line aligned storage. Vectorized kernels choose their peeling from the
/// buffer address, so a fixed alignment keeps results bitwise reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major n-d array of doubles. Images are stored NHWC.
struct Tensor {
  Shape shape;
  Buffer data;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::span<const double> values);
  Tensor(Shape s, std::initializer_list<double> values) : Tensor(std::move(s), std::span<const double>(values)) {}
  Tensor(Shape s, const std::vector<double>& values) : Tensor(std::move(s), std::span<const double>(values)) {}

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor from_matrix(const linalg::Matrix& m);

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  double item() const;

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  /// Views a rank-2 tensor (or rank-1 as a column) as a Matrix copy.
  linalg::Matrix to_matrix() const;

  /// Rows `index` of the leading dimension.
  Tensor gather(std::span<const std::size_t> index) const;
};

}  // namespace kflow
