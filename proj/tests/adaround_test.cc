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

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "fpq/adaround.h"
#include "fpq/errors.h"
#include "fpq/quantizers.h"
#include "fpq/rng.h"
#include "fpq/toy_dit.h"

namespace fpq {
namespace {

// Independent gate: clip(sigmoid(v) * 1.2 - 0.1, 0, 1).
double OracleGate(double v) {
  const double s = 1.0 / (1.0 + std::exp(-v));
  return std::min(1.0, std::max(0.0, s * 1.2 - 0.1));
}

struct Layer {
  Tensor w;
  Tensor x;
  MinMaxResult rtn;
};

Layer RandomLayer(std::uint64_t seed, std::size_t out = 4, std::size_t in = 4, std::size_t rows = 16) {
  Rng rng(seed);
  Layer l;
  l.w = rng.NormalTensor({out, in}, 0.0, 0.3);
  l.x = rng.NormalTensor({rows, in});
  l.rtn = FpMinMaxQuantize(l.w, FpFormat(2, 1));
  return l;
}

// Independent loss: soft weight from the mask state, then the mean squared
// output error over input rows by direct summation.
double OracleLoss(const Layer& l, const RoundingMask& mask, double lambda, double beta) {
  const std::size_t out = l.w.rows(), in = l.w.cols();
  std::vector<double> wt(mask.size(), 0.0);
  double reg = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.scales()[i] == 0.0) continue;
    const double s = mask.scales()[i];
    const double v = mask.v()[i];
    const double h = mask.variant() == RoundingVariant::kScaleAware ? OracleGate(v / s) : OracleGate(v);
    const double code = std::min(mask.upper()[i], std::max(mask.lower()[i], mask.floors()[i] + h));
    wt[i] = s * code;
    reg += 1.0 - std::pow(std::abs(2.0 * h - 1.0), beta);
  }
  double rec = 0.0;
  for (std::size_t n = 0; n < l.x.rows(); ++n) {
    for (std::size_t o = 0; o < out; ++o) {
      double e = 0.0;
      for (std::size_t c = 0; c < in; ++c) e += (l.w(o, c) - wt[o * in + c]) * l.x(n, c);
      rec += e * e;
    }
  }
  return rec / static_cast<double>(l.x.rows()) + lambda * reg;
}

TEST(GateTest, RectifiedSigmoidMatchesOracleAndInverts) {
  for (double v = -8.0; v <= 8.0; v += 0.125) EXPECT_NEAR(RectifiedSigmoid(v), OracleGate(v), 1e-15) << v;
  for (double h = 0.0; h <= 1.0; h += 1.0 / 64) EXPECT_NEAR(RectifiedSigmoid(InverseRectifiedSigmoid(h)), h, 1e-12);
  EXPECT_TRUE(std::isfinite(InverseRectifiedSigmoid(0.0)));
  EXPECT_TRUE(std::isfinite(InverseRectifiedSigmoid(1.0)));
  EXPECT_THROW(InverseRectifiedSigmoid(1.5), ParameterError);
  EXPECT_EQ(RectifiedSigmoidGrad(20.0), 0.0);
  EXPECT_EQ(RectifiedSigmoidGrad(-20.0), 0.0);
}

TEST(GateTest, ScaleAwareGateIsGateOfRatio) {
  // Exact for power-of-two steps, to rounding otherwise.
  for (double v = -5.0; v <= 5.0; v += 0.1) {
    for (int e = -12; e <= 4; e += 4) {
      const double s = std::ldexp(1.0, e);
      EXPECT_EQ(ScaleAwareGate(s * v, s), RectifiedSigmoid(v));
      EXPECT_EQ(ScaleAwareGateGrad(s * v, s), RectifiedSigmoidGrad(v) / s);
    }
    for (double s : {0.37, 3.1e-3, 12.7}) EXPECT_NEAR(ScaleAwareGate(s * v, s), RectifiedSigmoid(v), 1e-15);
  }
  EXPECT_THROW(ScaleAwareGate(1.0, 0.0), ParameterError);
  EXPECT_THROW(ScaleAwareGate(1.0, -1.0), ParameterError);
}

TEST(RoundingMaskTest, WarmStartReproducesWeight) {
  for (auto variant : {RoundingVariant::kOriginal, RoundingVariant::kScaleAware}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Layer l = RandomLayer(seed, 8, 24);
      const RoundingMask mask = RoundingMask::WarmStart(l.w, l.rtn, variant);
      const TensorD soft = SoftQuantizedWeight(mask);
      for (std::size_t i = 0; i < l.w.size(); ++i) EXPECT_NEAR(soft[i], l.w[i], 1e-6 * std::abs(l.w[i]) + 1e-12);
    }
  }
}

TEST(RoundingMaskTest, NearestMaskEqualsRoundToNearest) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Tensor w = HeavyTailedTensor({16, 64}, 0.1, 0.05, 8.0, seed);
    for (const auto& fmt : {FpFormat(2, 1), FpFormat(3, 0), FpFormat(1, 2), FpFormat(3, 4)}) {
      for (std::size_t gs : {std::size_t{0}, std::size_t{16}}) {
        const MinMaxResult rtn = gs ? GroupQuantize(w, fmt, gs) : FpMinMaxQuantize(w, fmt);
        const RoundingMask mask = RoundingMask::Nearest(w, rtn, RoundingVariant::kScaleAware);
        const MinMaxResult got = ApplyMask(mask, rtn);
        EXPECT_EQ(got.values, rtn.values) << fmt.name() << " gs " << gs;
        EXPECT_EQ(got.quantized.codes, rtn.quantized.codes) << fmt.name() << " gs " << gs;
      }
    }
  }
}

TEST(RoundingMaskTest, AnyHardMaskLandsOnTheGrid) {
  const Tensor w = HeavyTailedTensor({8, 32}, 0.1, 0.05, 8.0, 3);
  const FpFormat fmt(2, 1);
  const MinMaxResult rtn = GroupQuantize(w, fmt, 16);
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    RoundingMask mask = RoundingMask::WarmStart(w, rtn, RoundingVariant::kOriginal);
    std::vector<std::uint8_t> gates(mask.size());
    for (auto& g : gates) g = static_cast<std::uint8_t>(rng.UniformInt(2));
    mask.SetHard(gates);
    const MinMaxResult q = ApplyMask(mask, rtn);
    EXPECT_EQ(Dequantize(q.quantized), q.values);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const std::size_t g = rtn.quantized.GroupOf(i);
      EXPECT_TRUE(EnumerateGrid(fmt, rtn.quantized.group_maxvals[g]).Contains(q.values[i])) << i;
      // Either neighbour of the weight, never further.
      EXPECT_LE(std::abs(q.values[i] - w[i]), mask.scales()[i] * (1 + 1e-9) + 1e-7);
    }
    EXPECT_EQ(RoundingRegularizer(mask, 2.0), 0.0);
  }
  RoundingMask soft = RoundingMask::WarmStart(w, rtn, RoundingVariant::kOriginal);
  EXPECT_THROW(ApplyMask(soft, rtn), ParameterError);
  EXPECT_THROW(soft.SetHard(std::vector<std::uint8_t>(3)), DimensionError);
}

TEST(RoundingMaskTest, AllZeroGroupsAreFrozen) {
  Tensor w({2, 8});
  for (std::size_t c = 0; c < 8; ++c) w(1, c) = 0.1f * static_cast<float>(c + 1);
  const MinMaxResult rtn = GroupQuantize(w, FpFormat(2, 1), 8);
  RoundingMask mask = RoundingMask::WarmStart(w, rtn, RoundingVariant::kScaleAware);
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_TRUE(mask.frozen(c));
    EXPECT_EQ(mask.GateGrad(c), 0.0);
  }
  mask.Finalize();
  const MinMaxResult q = ApplyMask(mask, rtn);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(q.values[c], 0.0f);
}

TEST(LossTest, MatchesDirectSummation) {
  for (auto variant : {RoundingVariant::kOriginal, RoundingVariant::kScaleAware}) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const Layer l = RandomLayer(seed, 6, 10, 20);
      RoundingMask mask = RoundingMask::WarmStart(l.w, l.rtn, variant);
      Rng rng(seed + 50);
      for (std::size_t i = 0; i < mask.size(); ++i) {
        const double jitter = rng.Normal(0.0, 0.5);
        mask.v()[i] += variant == RoundingVariant::kScaleAware ? jitter * mask.scales()[i] : jitter;
      }
      const LayerObjective obj(l.w, l.x);
      const LossTerms t = ReconstructionLoss(obj, mask, 0.01, 4.0);
      const double want = OracleLoss(l, mask, 0.01, 4.0);
      EXPECT_NEAR(t.total, want, 1e-10 * std::max(1.0, want));
      EXPECT_NEAR(t.total, t.reconstruction + 0.01 * t.regularizer, 1e-15);
    }
  }
}

TEST(LossTest, WarmStartHasNoReconstructionError) {
  const Layer l = RandomLayer(2, 8, 16, 32);
  const RoundingMask mask = RoundingMask::WarmStart(l.w, l.rtn, RoundingVariant::kScaleAware);
  const LossTerms t = ReconstructionLoss(LayerObjective(l.w, l.x), mask, 0.01, 2.0);
  EXPECT_LT(t.reconstruction, 1e-12);
  EXPECT_GT(t.regularizer, 0.0);
}

// Central differences of the full loss in each mask variable, skipping
// elements sitting within reach of a clip kink.
void CheckGradient(RoundingVariant variant, std::uint64_t seed) {
  const Layer l = RandomLayer(seed);
  RoundingMask mask = RoundingMask::WarmStart(l.w, l.rtn, variant);
  Rng rng(seed + 7);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double jitter = rng.Normal(0.0, 0.4);
    mask.v()[i] += variant == RoundingVariant::kScaleAware ? jitter * mask.scales()[i] : jitter;
  }
  const double lambda = 0.05, beta = 3.0;
  const LayerObjective obj(l.w, l.x);
  const TensorD g = LossGradient(obj, mask, lambda, beta);
  std::size_t checked = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double unit = variant == RoundingVariant::kScaleAware ? mask.scales()[i] : 1.0;
    const double h = mask.Gate(i);
    const double raw = mask.floors()[i] + h;
    if (h < 1e-3 || h > 1 - 1e-3 || raw < mask.lower()[i] + 1e-3 || raw > mask.upper()[i] - 1e-3 ||
        std::abs(2 * h - 1) < 1e-3) {
      continue;
    }
    const double step = 1e-6 * unit;
    const double v0 = mask.v()[i];
    mask.v()[i] = v0 + step;
    const double up = ReconstructionLoss(obj, mask, lambda, beta).total;
    mask.v()[i] = v0 - step;
    const double dn = ReconstructionLoss(obj, mask, lambda, beta).total;
    mask.v()[i] = v0;
    const double fd = (up - dn) / (2 * step);
    EXPECT_NEAR(g[i], fd, 1e-4 * std::max(std::abs(fd), 1e-3 / unit)) << VariantName(variant) << " " << i;
    ++checked;
  }
  EXPECT_GE(checked, mask.size() / 2);
}

TEST(LossTest, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    CheckGradient(RoundingVariant::kOriginal, seed);
    CheckGradient(RoundingVariant::kScaleAware, seed);
  }
}

// Two elements in buckets whose steps differ by 4x, with the same gate
// position and the same downstream error signal.
struct PairedElements {
  Tensor w = Tensor::FromRows({{6.0f, 0.65f, 4.6f, 0.0f}});
  MinMaxResult rtn = FpMinMaxQuantize(w, FpFormat(2, 1));
  static constexpr std::size_t kSmall = 1, kLarge = 2;

  RoundingMask Mask(RoundingVariant variant, double u) const {
    RoundingMask m = RoundingMask::WarmStart(w, rtn, variant);
    for (std::size_t i : {kSmall, kLarge}) m.v()[i] = variant == RoundingVariant::kScaleAware ? m.scales()[i] * u : u;
    return m;
  }
};

TEST(ScaleDependenceTest, OriginalGradientScalesWithStep) {
  const PairedElements p;
  for (double u : {-1.0, 0.0, 0.3, 1.2}) {
    const RoundingMask m = p.Mask(RoundingVariant::kOriginal, u);
    ASSERT_EQ(m.scales()[p.kLarge], 4.0 * m.scales()[p.kSmall]);
    const TensorD wg = TensorD::FromRows({{0.0, 0.7, 0.7, 0.0}});
    const TensorD g = MaskGradient(m, wg, 0.0, 2.0);
    ASSERT_NE(g[p.kSmall], 0.0);
    EXPECT_NEAR(g[p.kLarge] / g[p.kSmall], 4.0, 1e-10);
    EXPECT_NEAR(g[p.kLarge] / g[p.kSmall], m.scales()[p.kLarge] / m.scales()[p.kSmall], 1e-10);
  }
}

TEST(ScaleDependenceTest, ScaleAwareGradientIsStepIndependent) {
  const PairedElements p;
  for (double u : {-1.0, 0.0, 0.3, 1.2}) {
    const RoundingMask m = p.Mask(RoundingVariant::kScaleAware, u);
    ASSERT_EQ(m.scales()[p.kLarge], 4.0 * m.scales()[p.kSmall]);
    const TensorD wg = TensorD::FromRows({{0.0, 0.7, 0.7, 0.0}});
    const TensorD g = MaskGradient(m, wg, 0.0, 2.0);
    ASSERT_NE(g[p.kSmall], 0.0);
    EXPECT_NEAR(g[p.kLarge], g[p.kSmall], 1e-10 * std::abs(g[p.kSmall]));
    // And it equals the error signal times the unscaled gate slope.
    EXPECT_NEAR(g[p.kSmall], 0.7 * RectifiedSigmoidGrad(u), 1e-12);
  }
}

TEST(BetaScheduleTest, WarmupThenLinearDecay) {
  const BetaSchedule b;
  EXPECT_FALSE(b.RegularizerActive(0, 100));
  EXPECT_FALSE(b.RegularizerActive(19, 100));
  EXPECT_TRUE(b.RegularizerActive(20, 100));
  EXPECT_EQ(b.At(0, 100), 20.0);
  EXPECT_EQ(b.At(20, 100), 20.0);
  EXPECT_NEAR(b.At(99, 100), 2.0, 1e-12);
  for (int i = 21; i < 100; ++i) EXPECT_LT(b.At(i, 100), b.At(i - 1, 100));
}

TEST(CalibrationConfigTest, ValidateAndParse) {
  CalibrationConfig c;
  EXPECT_NO_THROW(c.Validate());
  c.lr = 0.0;
  EXPECT_THROW(c.Validate(), ConfigError);
  c = {};
  c.iters = -1;
  EXPECT_THROW(c.Validate(), ConfigError);
  c = {};
  c.lambda = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(c.Validate(), ConfigError);
  c = {};
  c.beta.warmup = 1.5;
  EXPECT_THROW(c.Validate(), ConfigError);
  EXPECT_EQ(ParseVariant("original"), RoundingVariant::kOriginal);
  EXPECT_EQ(ParseVariant(VariantName(RoundingVariant::kScaleAware)), RoundingVariant::kScaleAware);
  EXPECT_THROW(ParseVariant("fancy"), ConfigError);
}

TEST(CalibrateTest, NeverWorseThanRoundToNearest) {
  for (auto variant : {RoundingVariant::kOriginal, RoundingVariant::kScaleAware}) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      const Layer l = RandomLayer(seed, 8, 16, 32);
      CalibrationConfig c;
      c.variant = variant;
      c.iters = 200;
      c.lr = seed % 2 ? 5.0 : 1e-2;
      const CalibrationResult r = CalibrateLayer(l.w, l.rtn, l.x, c);
      EXPECT_LE(r.report.final_hard_loss, r.report.rtn_loss);
      const MinMaxResult q = ApplyMask(r.masks[0], l.rtn);
      const double actual = LayerObjective(l.w, l.x).Reconstruction(q.values.Cast<double>());
      // The report evaluates in double; packed values are floats.
      EXPECT_NEAR(actual, r.report.final_hard_loss, 1e-6 * std::max(actual, 1e-12));
      EXPECT_EQ(r.report.loss_history.size(), 200u);
    }
  }
}

TEST(CalibrateTest, OnGridLayerKeepsZeroLoss) {
  const Layer l = RandomLayer(4, 8, 16, 32);
  const Tensor on_grid = l.rtn.values;
  const MinMaxResult rtn = FpMinMaxQuantize(on_grid, FpFormat(2, 1));
  ASSERT_EQ(rtn.values, on_grid);
  CalibrationConfig c;
  c.iters = 300;
  const CalibrationResult r = CalibrateLayer(on_grid, rtn, l.x, c);
  EXPECT_LT(r.report.rtn_loss, 1e-12);
  EXPECT_EQ(r.report.final_hard_loss, r.report.rtn_loss);
  EXPECT_EQ(ApplyMask(r.masks[0], rtn).values, on_grid);
}

// Reports the true loss but steers every gate toward the far neighbour.
class MisleadingObjective final : public ReconstructionObjective {
 public:
  MisleadingObjective(const LayerObjective& inner, const RoundingMask& nearest)
      : inner_(inner), push_(nearest.shape()) {
    for (std::size_t i = 0; i < push_.size(); ++i) push_[i] = nearest.Gate(i) > 0.5 ? 1.0 : -1.0;
  }
  std::size_t num_layers() const override { return 1; }
  double Evaluate(std::span<const TensorD> w, std::vector<TensorD>* grads) const override {
    const double v = inner_.Evaluate(w, grads);
    if (grads) (*grads)[0] = push_;
    return v;
  }

 private:
  const LayerObjective& inner_;
  TensorD push_;
};

class NanObjective final : public ReconstructionObjective {
 public:
  explicit NanObjective(const LayerObjective& inner) : inner_(inner) {}
  std::size_t num_layers() const override { return 1; }
  double Evaluate(std::span<const TensorD> w, std::vector<TensorD>* grads) const override {
    const double v = inner_.Evaluate(w, grads);
    return ++calls_ > 3 ? std::numeric_limits<double>::quiet_NaN() : v;
  }

 private:
  const LayerObjective& inner_;
  mutable int calls_ = 0;
};

TEST(CalibrateTest, FallsBackWhenWorseOrDiverged) {
  const Layer l = RandomLayer(6, 8, 16, 32);
  const LayerObjective inner(l.w, l.x);
  CalibrationConfig c;
  c.iters = 100;
  c.lr = 1.0;
  c.variant = RoundingVariant::kOriginal;
  auto masks = [&] {
    return std::pair{std::vector{RoundingMask::WarmStart(l.w, l.rtn, c.variant)},
                     std::vector{RoundingMask::Nearest(l.w, l.rtn, c.variant)}};
  };
  {
    auto [warm, nearest] = masks();
    const MisleadingObjective misleading(inner, nearest[0]);
    const CalibrationResult r = Calibrate(misleading, warm, nearest, c);
    EXPECT_TRUE(r.report.fell_back);
    EXPECT_FALSE(r.report.diverged);
    EXPECT_EQ(r.report.final_hard_loss, r.report.rtn_loss);
    EXPECT_EQ(ApplyMask(r.masks[0], l.rtn).values, l.rtn.values);
  }
  {
    auto [warm, nearest] = masks();
    const CalibrationResult r = Calibrate(NanObjective(inner), warm, nearest, c);
    EXPECT_TRUE(r.report.fell_back);
    EXPECT_TRUE(r.report.diverged);
    EXPECT_FALSE(r.report.diagnostic.empty());
    EXPECT_EQ(ApplyMask(r.masks[0], l.rtn).values, l.rtn.values);
  }
}

TEST(CalibrateTest, ScaleAwareNotWorseAtEqualBudget) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const SyntheticLayer s = MakeSyntheticLayer({}, seed);
    const MinMaxResult rtn = GroupQuantize(s.weight, FpFormat(2, 1), 16);
    CalibrationConfig c;
    c.iters = 500;
    c.lr = 2.0;
    c.variant = RoundingVariant::kOriginal;
    const double orig = CalibrateLayer(s.weight, rtn, s.inputs, c).report.final_hard_loss;
    c.variant = RoundingVariant::kScaleAware;
    const double aware = CalibrateLayer(s.weight, rtn, s.inputs, c).report.final_hard_loss;
    EXPECT_LE(aware, orig) << "seed " << seed;
  }
}

TEST(CalibrateTest, Deterministic) {
  const Layer l = RandomLayer(8, 8, 16, 32);
  CalibrationConfig c;
  c.iters = 150;
  const CalibrationResult a = CalibrateLayer(l.w, l.rtn, l.x, c);
  const CalibrationResult b = CalibrateLayer(l.w, l.rtn, l.x, c);
  EXPECT_EQ(a.report.loss_history, b.report.loss_history);
  EXPECT_EQ(a.masks[0].v(), b.masks[0].v());
}

TEST(LayerObjectiveTest, RejectsBadShapes) {
  EXPECT_THROW(LayerObjective(Tensor({2, 3}), Tensor({4, 2})), DimensionError);
  EXPECT_THROW(LayerObjective(Tensor({2, 3}), Tensor({0, 3})), ParameterError);
  EXPECT_THROW(CalibrationBatch{}.Stacked(), ParameterError);
}

}  // namespace
}  // namespace fpq
