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

#ifndef FPQ_FP_FORMAT_H_
#define FPQ_FP_FORMAT_H_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fpq {

// An ExMy datatype: one sign bit, `exp_bits` exponent bits and `man_bits`
// mantissa bits. The clipping value is normally the absolute maximum of the
// data being quantized; `clip_override` pins it instead.
class FpFormat {
 public:
  FpFormat(int exp_bits, int man_bits, std::optional<double> clip_override = std::nullopt);

  // Parses "EeMm" (case-insensitive), e.g. "E2M1". When `total_bits` is
  // given, formats whose e + m + 1 differs from it are rejected.
  static FpFormat Parse(std::string_view text, std::optional<int> total_bits = std::nullopt);

  int exp_bits() const { return exp_bits_; }
  int man_bits() const { return man_bits_; }
  int total_bits() const { return 1 + exp_bits_ + man_bits_; }
  const std::optional<double>& clip_override() const { return clip_override_; }
  bool integer_like() const { return exp_bits_ == 0; }
  std::string name() const;

  // Number of distinct non-negative magnitudes, zero included: 2^(e+m).
  std::int32_t magnitude_count() const { return std::int32_t{1} << (exp_bits_ + man_bits_); }
  // Largest exponent bucket reachable by the min-max quantizer.
  int max_bucket() const { return exp_bits_ == 0 ? 1 : (1 << exp_bits_) - 1; }
  // The largest magnitude at bias 0. For e >= 1 this is the top normal code
  // 2^(2^e - 1) * (2 - 2^-m). With no exponent bits the only exponent code is
  // the subnormal one, whose top value is 2 - 2^(1-m).
  double top_code_value() const;

  bool operator==(const FpFormat& other) const {
    return exp_bits_ == other.exp_bits_ && man_bits_ == other.man_bits_;
  }

 private:
  int exp_bits_;
  int man_bits_;
  std::optional<double> clip_override_;
};

// Direct evaluation of (-1)^sign * 2^(exponent_code - bias) * (1 + sum_i d_i / 2^i)
// where d_i = mantissa_bits[i - 1].
double FpValue(int sign, int exponent_code, std::span<const std::uint8_t> mantissa_bits, double bias);

// Decodes a bit pattern with the min-max quantizer's conventions: exponent
// code 0 is subnormal, 2^(1 - bias) * (mantissa / 2^m); codes >= 1 follow
// FpValue.
double DecodeFields(const FpFormat& fmt, int sign, int exponent_code, std::uint32_t mantissa,
                    double bias);

// Bias that maps the top code onto `maxval`:
//   bias = 2^e - log2(maxval) + log2(2 - 2^-m) - 1
// for e >= 1, and log2((2 - 2^(1-m)) / maxval) for e == 0.
double MinMaxBias(const FpFormat& fmt, double maxval);

// Grid arithmetic of the min-max FP quantizer for one clipping value.
//
// Magnitudes live in exponent buckets k = 1..max_bucket. Bucket k has step
// S_k = 2^(k - m - bias) and integer codes j in [2^m, 2^(m+1)) (bucket 1 also
// holds the subnormal codes 0..2^m - 1). Rounding up at the top of a bucket
// gives j = 2^(m+1), which is the first code of the next bucket. A magnitude
// is identified by index = (k - 1) * 2^m + j, in [0, magnitude_count()).
//
// maxval is rounded to float on construction so grids and quantized tensors
// agree bit-for-bit.
class FpCodebook {
 public:
  FpCodebook(const FpFormat& fmt, double maxval);

  const FpFormat& format() const { return fmt_; }
  double maxval() const { return maxval_; }
  double bias() const { return bias_; }
  // 2^-bias, the bucket-0 step before the 2^(k - m) factor.
  double unit() const { return unit_; }

  // S_log for a positive magnitude: clamp(floor(log2(a) + bias), 1, max_bucket).
  int Bucket(double magnitude) const;
  double BucketScale(int bucket) const;
  // Code range of a bucket, in units of its step.
  std::int64_t MinCode(int bucket) const;
  std::int64_t MaxCode(int bucket) const;

  std::int32_t MagnitudeIndex(int bucket, std::int64_t code) const;
  std::int32_t max_index() const { return fmt_.magnitude_count() - 1; }
  float Magnitude(std::int32_t index) const;

 private:
  FpFormat fmt_;
  double maxval_;
  double bias_;
  double unit_;
};

// The sorted set of distinct representable values for a format and clipping
// value, zero and sign pairs included.
struct ValueGrid {
  std::vector<float> values;

  std::size_t size() const { return values.size(); }
  bool Contains(float v) const;
};

ValueGrid EnumerateGrid(const FpFormat& fmt, double maxval);

// Number of grid points with |v| <= radius.
std::size_t GridDensityNearZero(const ValueGrid& grid, double radius);
std::size_t GridDensityNearZero(const FpFormat& fmt, double maxval, double radius);

}  // namespace fpq

#endif  // FPQ_FP_FORMAT_H_
