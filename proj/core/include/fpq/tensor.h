// Copyright 2026 The FPQ Toolkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef FPQ_TENSOR_H_
#define FPQ_TENSOR_H_

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fpq/errors.h"

namespace fpq {

using Shape = std::vector<std::size_t>;

std::size_t ShapeSize(const Shape& shape);
std::string ShapeToString(const Shape& shape);

// Dense row-major array. Float storage is the default (`Tensor`); the
// calibration code uses the double instantiation (`TensorD`) internally.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(ShapeSize(shape_), fill) {}
  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (ShapeSize(shape_) != data_.size()) {
      throw DimensionError("tensor data size " + std::to_string(data_.size()) +
                           " does not match shape " + ShapeToString(shape_));
    }
  }

  // Builds a 2-D tensor from nested rows; all rows must have equal length.
  static BasicTensor FromRows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return BasicTensor({r, c}, std::move(data));
  }

  static BasicTensor Identity(std::size_t n) {
    BasicTensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  // 2-D views. A rank-1 tensor is treated as a single row.
  std::size_t rows() const {
    if (shape_.empty()) return 0;
    return shape_.size() == 1 ? 1 : size() / shape_.back();
  }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  BasicTensor Reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  template <typename U>
  BasicTensor<U> Cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor& other) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Matrix product of [M x K] and [K x N]. Each output element accumulates in
// double over k = 0..K-1 in increasing order, so results are reproducible.
template <typename T>
BasicTensor<T> Matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// a [M x K] times the transpose of b [N x K]; this is a linear layer x W^T.
template <typename T>
BasicTensor<T> MatmulTransposed(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> Transpose(const BasicTensor<T>& a);

template <typename T>
BasicTensor<T> Add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> Subtract(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> Multiply(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> Scale(const BasicTensor<T>& a, double factor);

// out[i, j] = a[i, j] * v[j]; v broadcasts over rows.
template <typename T>
BasicTensor<T> MultiplyRows(const BasicTensor<T>& a, std::span<const T> v);

// Exact erf form x * Phi(x), evaluated in double.
double Gelu(double x);
double GeluDerivative(double x);
template <typename T>
BasicTensor<T> Gelu(const BasicTensor<T>& x);

inline constexpr double kLayerNormEpsilon = 1e-6;

// Per-row normalization to zero mean and unit variance (population variance
// plus kLayerNormEpsilon), followed by out = norm * scale + shift. scale and
// shift have one entry per column.
template <typename T>
BasicTensor<T> LayerNorm(const BasicTensor<T>& x, std::span<const T> scale,
                         std::span<const T> shift);
template <typename T>
BasicTensor<T> LayerNorm(const BasicTensor<T>& x, const BasicTensor<T>& scale,
                         const BasicTensor<T>& shift) {
  return LayerNorm(x, scale.data(), shift.data());
}

// Numerically stable row-wise softmax.
template <typename T>
BasicTensor<T> SoftmaxRows(const BasicTensor<T>& x);

template <typename T>
double MaxAbs(std::span<const T> values);
template <typename T>
double MaxAbs(const BasicTensor<T>& x) {
  return MaxAbs(x.data());
}

// Mean squared difference; shapes must match.
template <typename T>
double MeanSquaredError(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
bool AllFinite(const BasicTensor<T>& x);

// Stacks equally-shaped 2-D tensors along the row axis.
template <typename T>
BasicTensor<T> ConcatRows(std::span<const BasicTensor<T>> parts);

}  // namespace fpq

#endif  // FPQ_TENSOR_H_
