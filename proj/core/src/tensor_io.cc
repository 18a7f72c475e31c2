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

#include "fpq/tensor_io.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace fpq {
namespace io {

void PutU8(std::vector<std::uint8_t>& buf, std::uint8_t v) { buf.push_back(v); }

void PutU16(std::vector<std::uint8_t>& buf, std::uint16_t v) {
  buf.push_back(static_cast<std::uint8_t>(v & 0xFF));
  buf.push_back(static_cast<std::uint8_t>(v >> 8));
}

void PutU64(std::vector<std::uint8_t>& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void PutF32(std::vector<std::uint8_t>& buf, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xFF));
}

void Reader::Bytes(void* dst, std::size_t n) {
  in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError("unexpected end of file");
}

std::uint8_t Reader::U8() {
  std::uint8_t b;
  Bytes(&b, 1);
  return b;
}

std::uint16_t Reader::U16() {
  std::uint8_t b[2];
  Bytes(b, 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint64_t Reader::U64() {
  std::uint8_t b[8];
  Bytes(b, 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

float Reader::F32() {
  std::uint8_t b[4];
  Bytes(b, 4);
  const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                             (static_cast<std::uint32_t>(b[2]) << 16) |
                             (static_cast<std::uint32_t>(b[3]) << 24);
  return std::bit_cast<float>(bits);
}

void WriteFile(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

}  // namespace io

void WriteTensor(std::ostream& out, const Tensor& tensor) {
  std::vector<std::uint8_t> buf;
  buf.reserve(8 + 8 * tensor.rank() + 4 * tensor.size());
  buf.insert(buf.end(), std::begin(kTensorMagic), std::end(kTensorMagic));
  io::PutU16(buf, kTensorVersion);
  io::PutU16(buf, static_cast<std::uint16_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) io::PutU64(buf, d);
  for (float v : tensor.data()) io::PutF32(buf, v);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Tensor ReadTensor(std::istream& in) {
  io::Reader r(in);
  char magic[4];
  r.Bytes(magic, 4);
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic");
  const std::uint16_t version = r.U16();
  if (version != kTensorVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(version));
  }
  const std::uint16_t rank = r.U16();
  if (rank == 0) throw FormatError("tensor rank must be at least 1");
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    d = r.U64();
    if (d != 0 && count > (std::uint64_t{1} << 40) / d) throw FormatError("tensor too large");
    count *= d;
  }
  std::vector<float> data(count);
  for (auto& v : data) v = r.F32();
  return Tensor(std::move(shape), std::move(data));
}

void SaveTensor(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  WriteTensor(out, tensor);
  if (!out) throw FormatError("write failed: " + path.string());
}

Tensor LoadTensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return ReadTensor(in);
}

}  // namespace fpq
