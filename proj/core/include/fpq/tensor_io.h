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

#ifndef FPQ_TENSOR_IO_H_
#define FPQ_TENSOR_IO_H_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpq/tensor.h"

namespace fpq {

// Malformed or unreadable container file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor container layout (all integers little-endian):
//   "FPQT" | u16 version (=1) | u16 rank | u64 dims[rank] | f32 payload
inline constexpr char kTensorMagic[4] = {'F', 'P', 'Q', 'T'};
inline constexpr std::uint16_t kTensorVersion = 1;

void WriteTensor(std::ostream& out, const Tensor& tensor);
Tensor ReadTensor(std::istream& in);
void SaveTensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor LoadTensor(const std::filesystem::path& path);

namespace io {

// Little-endian primitives shared by the container formats.
void PutU8(std::vector<std::uint8_t>& buf, std::uint8_t v);
void PutU16(std::vector<std::uint8_t>& buf, std::uint16_t v);
void PutU64(std::vector<std::uint8_t>& buf, std::uint64_t v);
void PutF32(std::vector<std::uint8_t>& buf, float v);

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}
  void Bytes(void* dst, std::size_t n);
  std::uint8_t U8();
  std::uint16_t U16();
  std::uint64_t U64();
  float F32();

 private:
  std::istream& in_;
};

void WriteFile(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace io
}  // namespace fpq

#endif  // FPQ_TENSOR_IO_H_
