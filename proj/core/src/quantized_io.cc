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

#include "fpq/quantized_io.h"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "fpq/errors.h"
#include "fpq/tensor_io.h"

namespace fpq {

std::vector<std::uint8_t> PackCodes(std::span<const std::int32_t> codes, int bits) {
  if (bits < 2 || bits > 16) throw ParameterError("code width must be in [2, 16] bits");
  const std::uint32_t mag_limit = (1u << (bits - 1)) - 1;
  std::vector<std::uint8_t> out((codes.size() * bits + 7) / 8, 0);
  std::size_t bitpos = 0;
  for (std::int32_t c : codes) {
    const std::uint32_t mag = static_cast<std::uint32_t>(c < 0 ? -static_cast<std::int64_t>(c) : c);
    if (mag > mag_limit) throw DecodeError("code " + std::to_string(c) + " does not fit in " +
                                           std::to_string(bits) + " bits");
    const std::uint32_t field = mag | (c < 0 ? 1u << (bits - 1) : 0u);
    for (int b = 0; b < bits; ++b, ++bitpos) {
      if ((field >> b) & 1u) out[bitpos / 8] |= static_cast<std::uint8_t>(1u << (bitpos % 8));
    }
  }
  return out;
}

std::vector<std::int32_t> UnpackCodes(std::span<const std::uint8_t> packed, std::size_t count, int bits) {
  if (bits < 2 || bits > 16) throw ParameterError("code width must be in [2, 16] bits");
  if (packed.size() * 8 < count * bits) throw FormatError("packed code stream too short");
  std::vector<std::int32_t> codes(count);
  std::size_t bitpos = 0;
  for (auto& c : codes) {
    std::uint32_t field = 0;
    for (int b = 0; b < bits; ++b, ++bitpos) {
      field |= ((packed[bitpos / 8] >> (bitpos % 8)) & 1u) << b;
    }
    const std::int32_t mag = static_cast<std::int32_t>(field & ((1u << (bits - 1)) - 1));
    c = (field >> (bits - 1)) & 1u ? -mag : mag;
  }
  return codes;
}

void WriteQuantized(std::ostream& out, const QuantizedTensor& q) {
  const auto* fmt = std::get_if<FpFormat>(&q.format);
  if (!fmt) throw FormatError("only FP-quantized tensors can be written");
  if (q.group_maxvals.size() != q.num_groups()) throw FormatError("group metadata count mismatch");
  std::vector<std::uint8_t> buf(std::begin(kQuantizedMagic), std::end(kQuantizedMagic));
  io::PutU16(buf, kQuantizedVersion);
  const std::string name = fmt->name();
  io::PutU8(buf, static_cast<std::uint8_t>(name.size()));
  buf.insert(buf.end(), name.begin(), name.end());
  io::PutU16(buf, static_cast<std::uint16_t>(q.axis));
  io::PutU64(buf, q.group_size);
  io::PutU16(buf, static_cast<std::uint16_t>(q.shape.size()));
  for (std::size_t d : q.shape) io::PutU64(buf, d);
  io::PutU64(buf, q.group_maxvals.size());
  for (float mv : q.group_maxvals) io::PutF32(buf, mv);
  const int bits = fmt->total_bits();
  io::PutU8(buf, static_cast<std::uint8_t>(bits));
  const auto packed = PackCodes(q.codes, bits);
  buf.insert(buf.end(), packed.begin(), packed.end());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

QuantizedTensor ReadQuantized(std::istream& in) {
  io::Reader r(in);
  char magic[4];
  r.Bytes(magic, 4);
  if (std::memcmp(magic, kQuantizedMagic, 4) != 0) throw FormatError("bad quantized-tensor magic");
  if (r.U16() != kQuantizedVersion) throw FormatError("unsupported quantized-tensor version");
  std::string name(r.U8(), '\0');
  r.Bytes(name.data(), name.size());
  QuantizedTensor q;
  FpFormat fmt = [&] {
    try {
      return FpFormat::Parse(name);
    } catch (const ConfigError& e) {
      throw FormatError(std::string("bad format in header: ") + e.what());
    }
  }();
  q.format = fmt;
  const std::uint16_t axis = r.U16();
  if (axis > 1) throw FormatError("unknown group axis");
  q.axis = static_cast<GroupAxis>(axis);
  q.group_size = r.U64();
  const std::uint16_t rank = r.U16();
  q.shape.resize(rank);
  std::uint64_t count = rank ? 1 : 0;
  for (auto& d : q.shape) {
    d = r.U64();
    if (d != 0 && count > (std::uint64_t{1} << 40) / d) throw FormatError("tensor too large");
    count *= d;
  }
  const std::uint64_t groups = r.U64();
  if (groups != q.num_groups()) throw FormatError("group count inconsistent with shape");
  q.group_maxvals.resize(groups);
  for (auto& mv : q.group_maxvals) mv = r.F32();
  const int bits = r.U8();
  if (bits != fmt.total_bits()) throw FormatError("code width does not match format");
  std::vector<std::uint8_t> packed((count * bits + 7) / 8);
  r.Bytes(packed.data(), packed.size());
  q.codes = UnpackCodes(packed, count, bits);
  return q;
}

void SaveQuantized(const std::filesystem::path& path, const QuantizedTensor& q) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  WriteQuantized(out, q);
  if (!out) throw FormatError("write failed: " + path.string());
}

QuantizedTensor LoadQuantized(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return ReadQuantized(in);
}

}  // namespace fpq
