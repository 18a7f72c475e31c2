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

#include "fpq/fp_format.h"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>

#include "fpq/errors.h"

namespace fpq {

FpFormat::FpFormat(int exp_bits, int man_bits, std::optional<double> clip_override)
    : exp_bits_(exp_bits), man_bits_(man_bits), clip_override_(clip_override) {
  if (exp_bits < 0 || man_bits < 0) throw ConfigError("exponent and mantissa bits must be >= 0");
  if (exp_bits + man_bits < 1) throw ConfigError("a format needs at least one non-sign bit");
  if (exp_bits > 5) throw ConfigError("at most 5 exponent bits are supported");
  if (man_bits > 10) throw ConfigError("at most 10 mantissa bits are supported");
  if (clip_override && !(std::isfinite(*clip_override) && *clip_override > 0)) {
    throw ConfigError("clipping value must be positive and finite");
  }
}

FpFormat FpFormat::Parse(std::string_view text, std::optional<int> total_bits) {
  auto fail = [&] { return ConfigError("invalid FP format '" + std::string(text) + "', expected EeMm"); };
  if (text.size() < 4 || std::toupper(static_cast<unsigned char>(text[0])) != 'E') throw fail();
  const auto m_pos = text.find_first_of("Mm");
  if (m_pos == std::string_view::npos) throw fail();
  int e = -1, m = -1;
  const auto e_part = text.substr(1, m_pos - 1);
  const auto m_part = text.substr(m_pos + 1);
  if (e_part.empty() || m_part.empty()) throw fail();
  auto [pe, ece] = std::from_chars(e_part.data(), e_part.data() + e_part.size(), e);
  auto [pm, ecm] = std::from_chars(m_part.data(), m_part.data() + m_part.size(), m);
  if (ece != std::errc{} || ecm != std::errc{} || pe != e_part.data() + e_part.size() ||
      pm != m_part.data() + m_part.size()) {
    throw fail();
  }
  if (total_bits && e + m != *total_bits - 1) {
    throw ConfigError("format " + std::string(text) + " has " + std::to_string(e + m + 1) +
                      " bits, expected " + std::to_string(*total_bits));
  }
  return FpFormat(e, m);
}

std::string FpFormat::name() const {
  return "E" + std::to_string(exp_bits_) + "M" + std::to_string(man_bits_);
}

double FpFormat::top_code_value() const {
  const double m = man_bits_;
  if (exp_bits_ == 0) return 2.0 - std::exp2(1.0 - m);
  return std::exp2((1 << exp_bits_) - 1) * (2.0 - std::exp2(-m));
}

double FpValue(int sign, int exponent_code, std::span<const std::uint8_t> mantissa_bits, double bias) {
  double mantissa = 1.0;
  for (std::size_t i = 0; i < mantissa_bits.size(); ++i) {
    mantissa += mantissa_bits[i] * std::exp2(-static_cast<double>(i + 1));
  }
  const double magnitude = std::exp2(exponent_code - bias) * mantissa;
  return sign ? -magnitude : magnitude;
}

double DecodeFields(const FpFormat& fmt, int sign, int exponent_code, std::uint32_t mantissa,
                    double bias) {
  const int m = fmt.man_bits();
  if (exponent_code == 0) {
    const double magnitude = std::exp2(1.0 - bias) * (mantissa / std::exp2(m));
    return sign ? -magnitude : magnitude;
  }
  // d_1 is the most significant mantissa bit.
  std::vector<std::uint8_t> bits(m);
  for (int i = 0; i < m; ++i) bits[i] = (mantissa >> (m - 1 - i)) & 1u;
  return FpValue(sign, exponent_code, bits, bias);
}

double MinMaxBias(const FpFormat& fmt, double maxval) {
  if (fmt.exp_bits() == 0) return std::log2(fmt.top_code_value() / maxval);
  return std::exp2(fmt.exp_bits()) - std::log2(maxval) +
         std::log2(2.0 - std::exp2(-fmt.man_bits())) - 1.0;
}

FpCodebook::FpCodebook(const FpFormat& fmt, double maxval)
    : fmt_(fmt), maxval_(static_cast<float>(maxval)) {
  if (!(std::isfinite(maxval_) && maxval_ > 0)) {
    throw ParameterError("codebook clipping value must be positive and finite");
  }
  bias_ = MinMaxBias(fmt_, maxval_);
  unit_ = maxval_ / fmt_.top_code_value();
}

int FpCodebook::Bucket(double magnitude) const {
  const int kmax = fmt_.max_bucket();
  if (!(magnitude > 0)) return 1;
  int k = static_cast<int>(std::floor(std::log2(magnitude) + bias_));
  k = std::clamp(k, 1, kmax);
  // Bucket k starts at 2^(k - bias) = unit * 2^k; correct log2 rounding at the edges.
  if (k > 1 && magnitude < std::ldexp(unit_, k)) --k;
  if (k < kmax && magnitude >= std::ldexp(unit_, k + 1)) ++k;
  return k;
}

double FpCodebook::BucketScale(int bucket) const { return std::ldexp(unit_, bucket - fmt_.man_bits()); }

std::int64_t FpCodebook::MinCode(int bucket) const {
  return bucket == 1 ? 0 : std::int64_t{1} << fmt_.man_bits();
}

std::int64_t FpCodebook::MaxCode(int bucket) const {
  const int m = fmt_.man_bits();
  if (bucket < fmt_.max_bucket()) return std::int64_t{1} << (m + 1);
  return fmt_.exp_bits() == 0 ? (std::int64_t{1} << m) - 1 : (std::int64_t{1} << (m + 1)) - 1;
}

std::int32_t FpCodebook::MagnitudeIndex(int bucket, std::int64_t code) const {
  return static_cast<std::int32_t>((static_cast<std::int64_t>(bucket - 1) << fmt_.man_bits()) + code);
}

float FpCodebook::Magnitude(std::int32_t index) const {
  if (index < 0 || index > max_index()) {
    throw DecodeError("magnitude index " + std::to_string(index) + " out of range for " + fmt_.name());
  }
  const int m = fmt_.man_bits();
  const int k = std::max(1, static_cast<int>(index >> m));
  const std::int64_t j = index - (static_cast<std::int64_t>(k - 1) << m);
  return static_cast<float>(std::ldexp(static_cast<double>(j) * unit_, k - m));
}

bool ValueGrid::Contains(float v) const { return std::binary_search(values.begin(), values.end(), v); }

ValueGrid EnumerateGrid(const FpFormat& fmt, double maxval) {
  const FpCodebook book(fmt, maxval);
  std::vector<float> mags;
  mags.reserve(book.max_index() + 1);
  for (std::int32_t i = 0; i <= book.max_index(); ++i) mags.push_back(book.Magnitude(i));
  ValueGrid grid;
  grid.values.reserve(2 * mags.size() - 1);
  for (auto it = mags.rbegin(); it != mags.rend() && *it > 0; ++it) grid.values.push_back(-*it);
  grid.values.insert(grid.values.end(), mags.begin(), mags.end());
  return grid;
}

std::size_t GridDensityNearZero(const ValueGrid& grid, double radius) {
  return static_cast<std::size_t>(std::count_if(grid.values.begin(), grid.values.end(),
                                                [&](float v) { return std::abs(v) <= radius; }));
}

std::size_t GridDensityNearZero(const FpFormat& fmt, double maxval, double radius) {
  if (!(radius >= 0)) throw ParameterError("radius must be non-negative");
  return GridDensityNearZero(EnumerateGrid(fmt, maxval), radius);
}

}  // namespace fpq
