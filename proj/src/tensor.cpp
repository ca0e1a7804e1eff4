#include "kflow/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "kflow/error.hpp"

namespace kflow {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

Tensor::Tensor(Shape s, std::span<const double> values) : shape(std::move(s)), data(values.begin(), values.end()) {
  if (data.size() != shape_size(shape)) {
    throw Error(ErrorKind::ShapeMismatch,
                "shape " + shape_string(shape) + " needs " + std::to_string(shape_size(shape)) +
                    " values, got " + std::to_string(data.size()));
  }
}

Tensor Tensor::from_matrix(const linalg::Matrix& m) {
  return Tensor({m.rows(), m.cols()}, m.data());
}

double Tensor::item() const {
  if (data.size() != 1) throw Error(ErrorKind::NotScalar, "item() on shape " + shape_string(shape));
  return data[0];
}

linalg::Matrix Tensor::to_matrix() const {
  if (rank() == 2) return linalg::Matrix(shape[0], shape[1], std::vector<double>(data.begin(), data.end()));
  if (rank() == 1) return linalg::Matrix(shape[0], 1, std::vector<double>(data.begin(), data.end()));
  throw Error(ErrorKind::ShapeMismatch, "to_matrix on shape " + shape_string(shape));
}

Tensor Tensor::gather(std::span<const std::size_t> index) const {
  if (rank() == 0) throw Error(ErrorKind::ShapeMismatch, "gather on a scalar");
  const std::size_t stride = size() / shape[0];
  Shape s = shape;
  s[0] = index.size();
  Tensor out(s);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= shape[0]) throw Error(ErrorKind::IndexOutOfRange, "gather index " + std::to_string(index[i]));
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(index[i] * stride), stride,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

}  // namespace kflow
