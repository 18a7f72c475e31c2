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

#ifndef FPQ_RNG_H_
#define FPQ_RNG_H_

#include <cstdint>
#include <random>

#include "fpq/tensor.h"

namespace fpq {

// Seeded generator: std::mt19937_64, whose output sequence is fixed by the
// C++ standard. Distributions are implemented here rather than taken from
// <random>, whose distribution algorithms are implementation-defined.
// Normal deviates use the Box-Muller transform (one deviate per call).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t NextU64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double Uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }

  // Uniform integer in [0, n). Uses rejection to avoid modulo bias.
  std::uint64_t UniformInt(std::uint64_t n);

  double Normal();
  double Normal(double mean, double stddev) { return mean + stddev * Normal(); }

  bool Bernoulli(double p) { return Uniform() < p; }

  // Derives an independent child seed; used to give each sample or layer its
  // own stream without sharing state.
  std::uint64_t Fork() { return engine_() ^ 0x9E3779B97F4A7C15ull; }

  Tensor NormalTensor(Shape shape, double mean = 0.0, double stddev = 1.0);

 private:
  std::mt19937_64 engine_;
};

}  // namespace fpq

#endif  // FPQ_RNG_H_
