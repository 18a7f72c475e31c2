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

#include <benchmark/benchmark.h>

#include "fpq/adaround.h"
#include "fpq/quantizers.h"
#include "fpq/rng.h"
#include "fpq/toy_dit.h"

namespace fpq {
namespace {

const FpFormat kFormats[] = {FpFormat(0, 3), FpFormat(1, 2), FpFormat(2, 1), FpFormat(3, 0)};

void BM_FpMinMaxQuantize(benchmark::State& state) {
  const FpFormat& fmt = kFormats[state.range(0)];
  const Tensor t = Rng(1).NormalTensor({static_cast<std::size_t>(state.range(1))});
  for (auto _ : state) benchmark::DoNotOptimize(FpMinMaxQuantize(t, fmt));
  state.SetItemsProcessed(state.iterations() * state.range(1));
  state.SetLabel(fmt.name());
}
BENCHMARK(BM_FpMinMaxQuantize)->ArgsProduct({{0, 1, 2, 3}, {1 << 12, 1 << 16}});

void BM_GroupQuantize(benchmark::State& state) {
  const Tensor w = Rng(2).NormalTensor({256, 1024});
  for (auto _ : state) benchmark::DoNotOptimize(GroupQuantize(w, FpFormat(2, 1), state.range(0)));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(w.size()));
}
BENCHMARK(BM_GroupQuantize)->Arg(16)->Arg(128);

void BM_TokenQuantize(benchmark::State& state) {
  const Tensor acts = Rng(3).NormalTensor({256, 512});
  for (auto _ : state) benchmark::DoNotOptimize(TokenQuantize(acts, {FpFormat(3, 4)}));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(acts.size()));
}
BENCHMARK(BM_TokenQuantize);

void BM_MatmulTransposed(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  const Tensor a = rng.NormalTensor({n, n});
  const Tensor b = rng.NormalTensor({n, n});
  for (auto _ : state) benchmark::DoNotOptimize(MatmulTransposed(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_MatmulTransposed)->Arg(64)->Arg(256);

void BM_MaskGradient(benchmark::State& state) {
  const auto variant = static_cast<RoundingVariant>(state.range(0));
  const Tensor w = Rng(5).NormalTensor({256, 256}, 0.0, 0.05);
  const RoundingMask mask = RoundingMask::WarmStart(w, GroupQuantize(w, FpFormat(2, 1), 128), variant);
  const TensorD wg(w.shape(), 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(MaskGradient(mask, wg, 0.01, 10.0));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(w.size()));
  state.SetLabel(std::string(VariantName(variant)));
}
BENCHMARK(BM_MaskGradient)->Arg(0)->Arg(1);

void BM_CalibrateLayer(benchmark::State& state) {
  const SyntheticLayer layer = MakeSyntheticLayer({}, 0);
  const MinMaxResult rtn = GroupQuantize(layer.weight, FpFormat(2, 1), 16);
  CalibrationConfig c;
  c.iters = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(CalibrateLayer(layer.weight, rtn, layer.inputs, c));
}
BENCHMARK(BM_CalibrateLayer)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_BlockForward(benchmark::State& state) {
  const ToyDiT m = ToyDiT::Create({}, 0);
  Rng rng(6);
  const Tensor x = rng.NormalTensor({m.config.token_count, m.config.embed_dim});
  const Tensor cond = rng.NormalTensor({m.config.cond_tokens, m.config.embed_dim});
  ForwardOptions opts;
  if (state.range(0)) opts.act_fmt = FpFormat(3, 4);
  for (auto _ : state) benchmark::DoNotOptimize(Forward(m, 0, x, 500, cond, opts));
  state.SetLabel(state.range(0) ? "E3M4 activations" : "full precision");
}
BENCHMARK(BM_BlockForward)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

}  // namespace
}  // namespace fpq

BENCHMARK_MAIN();
