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

#include "fpq/quantizers.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "fpq/errors.h"

namespace fpq {

double RoundHalfEven(double x) {
  const double r = std::round(x);
  if (std::abs(x - std::trunc(x)) == 0.5) return 2.0 * std::round(x / 2.0);
  return r;
}

void IntQuantParams::Validate() const {
  if (!(std::isfinite(scale) && scale > 0)) throw ParameterError("INT scale must be positive");
  if (qmin >= qmax) throw ParameterError("INT clip bounds must satisfy qmin < qmax");
}

IntQuantParams IntQuantParams::MatchingUniform(int man_bits, double maxval) {
  if (man_bits < 1) throw ParameterError("uniform grid needs at least one mantissa bit");
  const std::int32_t top = (std::int32_t{1} << man_bits) - 1;
  // Same arithmetic as the FP codebook: (maxval / (2 - 2^(1-m))) * 2^(1-m).
  const double maxf = static_cast<float>(maxval);
  const double unit = maxf / (2.0 - std::exp2(1.0 - man_bits));
  return IntQuantParams{std::ldexp(unit, 1 - man_bits), 0, -top, top};
}

std::size_t QuantizedTensor::groups_per_row() const {
  if (axis == GroupAxis::kTensor) return 1;
  const std::size_t cols = shape.empty() ? 0 : shape.back();
  if (cols == 0) return 0;
  const std::size_t gs = std::min(group_size, cols);
  return (cols + gs - 1) / gs;
}

std::size_t QuantizedTensor::num_groups() const {
  if (axis == GroupAxis::kTensor) return 1;
  const std::size_t cols = shape.empty() ? 0 : shape.back();
  const std::size_t rows = cols == 0 ? 0 : ShapeSize(shape) / cols;
  return rows * groups_per_row();
}

std::size_t QuantizedTensor::GroupOf(std::size_t i) const {
  if (axis == GroupAxis::kTensor) return 0;
  const std::size_t cols = shape.back();
  const std::size_t gs = std::min(group_size, cols);
  return (i / cols) * groups_per_row() + (i % cols) / gs;
}

namespace {

void RequireFinite(const Tensor& t) {
  if (!AllFinite(t)) throw InputError("quantizer input contains NaN or Inf");
}

// Quantizes elements [begin, end) of `in` with a shared clipping value.
// Returns false when the run was all zeros.
bool QuantizeRun(const Tensor& in, std::size_t begin, std::size_t end, const FpFormat& fmt,
                 MinMaxResult& out, float& maxval_out) {
  double maxval = fmt.clip_override().value_or(MaxAbs(in.data().subspan(begin, end - begin)));
  maxval = static_cast<float>(maxval);
  maxval_out = static_cast<float>(maxval);
  if (maxval == 0.0) {
    for (std::size_t i = begin; i < end; ++i) {
      out.quantized.codes[i] = 0;
      out.values[i] = 0.0f;
      out.scales[i] = 0.0;
    }
    return false;
  }
  const FpCodebook book(fmt, maxval);
  for (std::size_t i = begin; i < end; ++i) {
    const double x = std::clamp<double>(in[i], -maxval, maxval);
    const double a = std::abs(x);
    const int k = book.Bucket(a);
    const double step = book.BucketScale(k);
    std::int64_t j = static_cast<std::int64_t>(RoundHalfEven(a / step));
    j = std::clamp(j, std::int64_t{0}, book.MaxCode(k));
    const std::int32_t index = book.MagnitudeIndex(k, j);
    const float mag = book.Magnitude(index);
    const bool negative = x < 0 && index != 0;
    out.quantized.codes[i] = negative ? -index : index;
    out.values[i] = negative ? -mag : mag;
    out.scales[i] = step;
  }
  return true;
}

MinMaxResult MakeResult(const Tensor& in, const FpFormat& fmt, GroupAxis axis, std::size_t group_size) {
  MinMaxResult r;
  r.quantized.shape = in.shape();
  r.quantized.codes.assign(in.size(), 0);
  r.quantized.format = fmt;
  r.quantized.axis = axis;
  r.quantized.group_size = group_size;
  r.values = Tensor(in.shape());
  r.scales = TensorD(in.shape());
  return r;
}

}  // namespace

QuantizedTensor IntQuantize(const Tensor& x, const IntQuantParams& params) {
  params.Validate();
  RequireFinite(x);
  QuantizedTensor q;
  q.shape = x.shape();
  q.format = params;
  q.axis = GroupAxis::kTensor;
  q.codes.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = RoundHalfEven(x[i] / params.scale) + params.zero_point;
    q.codes[i] = static_cast<std::int32_t>(std::clamp<double>(c, params.qmin, params.qmax));
  }
  return q;
}

MinMaxResult FpMinMaxQuantize(const Tensor& a, const FpFormat& fmt) {
  RequireFinite(a);
  MinMaxResult r = MakeResult(a, fmt, GroupAxis::kTensor, a.size());
  r.quantized.group_maxvals.resize(1);
  if (!QuantizeRun(a, 0, a.size(), fmt, r, r.quantized.group_maxvals[0])) r.degenerate_groups = 1;
  return r;
}

MinMaxResult GroupQuantize(const Tensor& w, const FpFormat& fmt, std::size_t group_size) {
  if (group_size == 0) throw ConfigError("group size must be at least 1");
  if (w.rank() != 2) throw DimensionError("group quantization expects a 2-D [out x in] weight");
  RequireFinite(w);
  MinMaxResult r = MakeResult(w, fmt, GroupAxis::kRow, group_size);
  const std::size_t cols = w.cols();
  const std::size_t gs = std::min(group_size, cols);
  r.quantized.group_maxvals.resize(r.quantized.num_groups());
  std::size_t g = 0;
  for (std::size_t row = 0; row < w.rows(); ++row) {
    for (std::size_t start = 0; start < cols; start += gs, ++g) {
      const std::size_t begin = row * cols + start;
      const std::size_t end = row * cols + std::min(cols, start + gs);
      if (!QuantizeRun(w, begin, end, fmt, r, r.quantized.group_maxvals[g])) ++r.degenerate_groups;
    }
  }
  return r;
}

MinMaxResult TokenQuantize(const Tensor& acts, const TokenQuantConfig& cfg) {
  if (acts.rank() != 2) throw DimensionError("token quantization expects [tokens x features]");
  return GroupQuantize(acts, cfg.fmt, std::max<std::size_t>(acts.cols(), 1));
}

Tensor Dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape);
  if (q.codes.size() != out.size()) throw DecodeError("code count does not match shape");
  if (const auto* ip = std::get_if<IntQuantParams>(&q.format)) {
    for (std::size_t i = 0; i < q.codes.size(); ++i) {
      const std::int32_t c = q.codes[i];
      if (c < ip->qmin || c > ip->qmax) throw DecodeError("INT code out of range");
      out[i] = static_cast<float>(ip->scale * (c - ip->zero_point));
    }
    return out;
  }
  const auto& fmt = std::get<FpFormat>(q.format);
  if (q.group_maxvals.size() != q.num_groups()) throw DecodeError("group metadata count mismatch");
  std::vector<std::optional<FpCodebook>> books(q.group_maxvals.size());
  for (std::size_t g = 0; g < books.size(); ++g) {
    const float mv = q.group_maxvals[g];
    if (mv > 0 && std::isfinite(mv)) {
      books[g].emplace(fmt, mv);
    } else if (mv != 0) {
      throw DecodeError("invalid group clipping value");
    }
  }
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    const std::int32_t c = q.codes[i];
    const auto& book = books[q.GroupOf(i)];
    if (!book) {
      if (c != 0) throw DecodeError("non-zero code in an all-zero group");
      out[i] = 0.0f;
      continue;
    }
    const std::int32_t index = c < 0 ? -c : c;
    if (index > book->max_index()) {
      throw DecodeError("code " + std::to_string(c) + " out of range for " + fmt.name());
    }
    const float mag = book->Magnitude(index);
    out[i] = c < 0 ? -mag : mag;
  }
  return out;
}

}  // namespace fpq
