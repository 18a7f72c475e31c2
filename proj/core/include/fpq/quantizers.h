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

#ifndef FPQ_QUANTIZERS_H_
#define FPQ_QUANTIZERS_H_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <variant>
#include <vector>

#include "fpq/fp_format.h"
#include "fpq/tensor.h"

namespace fpq {

// Round half to even. Both the INT and FP paths use this tie rule.
double RoundHalfEven(double x);

// Uniform integer quantization: code = clip(round(x / scale) + zero_point, qmin, qmax).
struct IntQuantParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;
  std::int32_t qmin = -8;
  std::int32_t qmax = 7;

  void Validate() const;
  // Symmetric sign-magnitude grid with the same spacing as the ExMy format
  // with no exponent bits: scale = maxval / (2^m - 1), codes in [-(2^m-1), 2^m-1].
  static IntQuantParams MatchingUniform(int man_bits, double maxval);
};

// How a tensor is split into independently scaled groups.
enum class GroupAxis : std::uint16_t {
  kTensor = 0,  // one group covering every element
  kRow = 1,     // contiguous runs of group_size along the last axis of each row
};

// Codes plus the metadata needed to reconstruct real values.
//
// FP codes are sign * magnitude index into the group's codebook, and each
// group stores only its clipping value; bias and steps are recomputed on
// dequantize. A group whose clipping value is 0 was all zeros.
struct QuantizedTensor {
  Shape shape;
  std::vector<std::int32_t> codes;
  std::variant<FpFormat, IntQuantParams> format{IntQuantParams{}};
  GroupAxis axis = GroupAxis::kTensor;
  std::size_t group_size = 0;
  std::vector<float> group_maxvals;

  std::size_t groups_per_row() const;
  std::size_t num_groups() const;
  // Group holding the element at flat position i.
  std::size_t GroupOf(std::size_t i) const;
  bool is_fp() const { return std::holds_alternative<FpFormat>(format); }
};

// Output of a min-max FP quantizer: the packed form, the reconstructed
// tensor, and the per-element step S that produced each value.
struct MinMaxResult {
  QuantizedTensor quantized;
  Tensor values;
  TensorD scales;
  // Groups that were entirely zero; their bias is undefined and they
  // reconstruct as zeros.
  std::size_t degenerate_groups = 0;
};

QuantizedTensor IntQuantize(const Tensor& x, const IntQuantParams& params);

// Min-max FP quantization of one tensor:
//   bias   = 2^e - log2(maxval) + log2(2 - 2^-m) - 1
//   S_log  = max(floor(log2|A_clip| + bias), 1)
//   S      = 2^(S_log - m - bias)
//   result = round_half_even(A_clip / S) * S
// maxval is max|A| unless the format pins a clipping value.
MinMaxResult FpMinMaxQuantize(const Tensor& a, const FpFormat& fmt);

// Splits every row of a 2-D [out x in] tensor into contiguous groups of
// group_size along the input axis and quantizes each with its own maxval.
// A group_size larger than the row gives one group per row.
MinMaxResult GroupQuantize(const Tensor& w, const FpFormat& fmt, std::size_t group_size);

// Activation format for online per-token quantization.
struct TokenQuantConfig {
  FpFormat fmt{2, 3};
};

// Per-token quantization of [tokens x features] activations: each row uses
// its own absolute maximum. No calibration state is involved.
MinMaxResult TokenQuantize(const Tensor& acts, const TokenQuantConfig& cfg);

Tensor Dequantize(const QuantizedTensor& q);

}  // namespace fpq

#endif  // FPQ_QUANTIZERS_H_
