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

#ifndef FPQ_QUANTIZED_IO_H_
#define FPQ_QUANTIZED_IO_H_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "fpq/quantizers.h"

namespace fpq {

// Quantized-tensor file (little-endian):
//   "FPQQ" | u16 version (=1)
//   u8 format-name length | format name, e.g. "E2M1"
//   u16 group axis (0 = tensor, 1 = row) | u64 group size
//   u16 rank | u64 dims[rank]
//   u64 group count | f32 group maxvals[group count]
//   u8 code bits | packed codes
//
// Each code is an n-bit sign-magnitude field (sign in the top bit) for an
// ExMy format with n = 1 + e + m. Fields are packed LSB-first into a
// bitstream, so for 4-bit formats the first code of each byte is the low
// nibble. Only FP-quantized tensors are serializable.
inline constexpr char kQuantizedMagic[4] = {'F', 'P', 'Q', 'Q'};
inline constexpr std::uint16_t kQuantizedVersion = 1;

std::vector<std::uint8_t> PackCodes(std::span<const std::int32_t> codes, int bits);
std::vector<std::int32_t> UnpackCodes(std::span<const std::uint8_t> packed, std::size_t count, int bits);

void WriteQuantized(std::ostream& out, const QuantizedTensor& q);
QuantizedTensor ReadQuantized(std::istream& in);
void SaveQuantized(const std::filesystem::path& path, const QuantizedTensor& q);
QuantizedTensor LoadQuantized(const std::filesystem::path& path);

}  // namespace fpq

#endif  // FPQ_QUANTIZED_IO_H_
