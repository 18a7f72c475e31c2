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

#include "fpq/tensor.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace fpq {

std::size_t ShapeSize(const Shape& shape) {
  if (shape.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <typename T>
void RequireMatrix(const BasicTensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " must be 2-D, got " + ShapeToString(t.shape()));
  }
}

template <typename T>
void RequireSameShape(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("shape mismatch " + ShapeToString(a.shape()) + " vs " +
                         ShapeToString(b.shape()));
  }
}

template <typename T, typename F>
BasicTensor<T> Zip(const BasicTensor<T>& a, const BasicTensor<T>& b, F f) {
  RequireSameShape(a, b);
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> Matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  RequireMatrix(a, "matmul lhs");
  RequireMatrix(b, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner dimensions disagree: " + ShapeToString(a.shape()) +
                         " x " + ShapeToString(b.shape()));
  }
  BasicTensor<T> out({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      const T* brow = &b(p, 0);
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) = static_cast<T>(acc[j]);
  }
  return out;
}

template <typename T>
BasicTensor<T> MatmulTransposed(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  RequireMatrix(a, "matmul lhs");
  RequireMatrix(b, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("linear inner dimensions disagree: " + ShapeToString(a.shape()) +
                         " x " + ShapeToString(b.shape()) + "^T");
  }
  BasicTensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = &a(i, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = &b(j, 0);
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(arow[p]) * brow[p];
      out(i, j) = static_cast<T>(acc);
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> Transpose(const BasicTensor<T>& a) {
  RequireMatrix(a, "transpose operand");
  BasicTensor<T> out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
BasicTensor<T> Add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return Zip(a, b, [](T x, T y) { return x + y; });
}

template <typename T>
BasicTensor<T> Subtract(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return Zip(a, b, [](T x, T y) { return x - y; });
}

template <typename T>
BasicTensor<T> Multiply(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return Zip(a, b, [](T x, T y) { return x * y; });
}

template <typename T>
BasicTensor<T> Scale(const BasicTensor<T>& a, double factor) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<T>(a[i] * factor);
  return out;
}

template <typename T>
BasicTensor<T> MultiplyRows(const BasicTensor<T>& a, std::span<const T> v) {
  if (v.size() != a.cols()) throw DimensionError("row multiplier length mismatch");
  BasicTensor<T> out(a.shape());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(r, c) = a(r, c) * v[c];
  return out;
}

double Gelu(double x) { return 0.5 * x * std::erfc(-x / std::numbers::sqrt2); }

double GeluDerivative(double x) {
  const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

template <typename T>
BasicTensor<T> Gelu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(Gelu(static_cast<double>(x[i])));
  return out;
}

template <typename T>
BasicTensor<T> LayerNorm(const BasicTensor<T>& x, std::span<const T> scale,
                         std::span<const T> shift) {
  const std::size_t cols = x.cols();
  if (scale.size() != cols || shift.size() != cols) {
    throw DimensionError("layer_norm scale/shift must have " + std::to_string(cols) + " entries");
  }
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (T v : in) mean += v;
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    auto o = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = static_cast<T>((in[c] - mean) * inv * scale[c] + shift[c]);
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> SoftmaxRows(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mx = -INFINITY;
    for (T v : in) mx = std::max<double>(mx, v);
    double sum = 0.0;
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) {
      const double e = std::exp(in[c] - mx);
      o[c] = static_cast<T>(e);
      sum += e;
    }
    for (auto& v : o) v = static_cast<T>(v / sum);
  }
  return out;
}

template <typename T>
double MaxAbs(std::span<const T> values) {
  double m = 0.0;
  for (T v : values) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
double MeanSquaredError(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  RequireSameShape(a, b);
  if (a.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

template <typename T>
bool AllFinite(const BasicTensor<T>& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
BasicTensor<T> ConcatRows(std::span<const BasicTensor<T>> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat column mismatch");
    rows += p.rows();
  }
  std::vector<T> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return BasicTensor<T>({rows, cols}, std::move(data));
}

#define FPQ_INSTANTIATE_TENSOR_OPS(T)                                                       \
  template BasicTensor<T> Matmul(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> MatmulTransposed(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> Transpose(const BasicTensor<T>&);                                 \
  template BasicTensor<T> Add(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> Subtract(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> Multiply(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> Scale(const BasicTensor<T>&, double);                             \
  template BasicTensor<T> MultiplyRows(const BasicTensor<T>&, std::span<const T>);          \
  template BasicTensor<T> Gelu(const BasicTensor<T>&);                                      \
  template BasicTensor<T> LayerNorm(const BasicTensor<T>&, std::span<const T>,              \
                                    std::span<const T>);                                    \
  template BasicTensor<T> SoftmaxRows(const BasicTensor<T>&);                               \
  template double MaxAbs(std::span<const T>);                                               \
  template double MeanSquaredError(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template bool AllFinite(const BasicTensor<T>&);                                           \
  template BasicTensor<T> ConcatRows(std::span<const BasicTensor<T>>);

FPQ_INSTANTIATE_TENSOR_OPS(float)
FPQ_INSTANTIATE_TENSOR_OPS(double)

#undef FPQ_INSTANTIATE_TENSOR_OPS

}  // namespace fpq
