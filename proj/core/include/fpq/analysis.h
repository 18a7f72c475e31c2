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

#ifndef FPQ_ANALYSIS_H_
#define FPQ_ANALYSIS_H_

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fpq/adaround.h"
#include "fpq/fp_format.h"
#include "fpq/tensor.h"
#include "fpq/toy_dit.h"

namespace fpq {

// Numbers in CSV/JSON artifacts: printf "%.9g" in the C locale.
std::string FormatNumber(double v);

// ---- Activation statistics ----

// Box-plot summary. Quartiles interpolate linearly between order
// statistics; whiskers are the most extreme data within 1.5 IQR of the box.
struct BoxStats {
  double min = 0.0;
  double whisker_low = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double whisker_high = 0.0;
  double max = 0.0;

  double iqr() const { return q3 - q1; }
};

BoxStats ComputeBoxStats(std::span<const double> values);
// Quantile with linear interpolation on sorted data, p in [0, 1].
double SortedQuantile(std::span<const double> sorted, double p);

struct ActivationStats {
  std::vector<int> timesteps;
  // [steps x tokens] absolute maximum of every token at every step.
  Tensor token_absmax;
  // Box statistics over all activation values of each step.
  std::vector<BoxStats> per_step;
  // Per-channel minimum and maximum over every step and token.
  std::vector<float> channel_min;
  std::vector<float> channel_max;
};

// Accumulates [tokens x channels] activations step by step. Observing a
// step more than once (several samples) widens its statistics.
class ActivationStatsCollector {
 public:
  explicit ActivationStatsCollector(std::vector<int> timesteps);

  void Observe(std::size_t step, const Tensor& acts);
  ActivationStats Finish() const;

 private:
  std::vector<int> timesteps_;
  std::size_t tokens_ = 0;
  std::size_t channels_ = 0;
  std::vector<std::vector<double>> values_;
  std::vector<std::vector<float>> absmax_;
  std::vector<float> cmin_;
  std::vector<float> cmax_;
};

// Hooks the input of every linear layer over one trajectory of the
// full-precision model.
std::map<LayerKey, ActivationStats> CollectActivationStats(const ToyDiT& model, const Trajectory& trajectory);

// CSV with header block,role,step,timestep,min,whisker_low,q1,median,q3,whisker_high,max.
std::string BoxStatsCsv(const std::map<LayerKey, ActivationStats>& stats);
// CSV with header block,role,step,timestep,token,absmax.
std::string TokenAbsmaxCsv(const std::map<LayerKey, ActivationStats>& stats);

// ---- Token-wise vs static activation quantization ----

// Activations with token-dependent ranges: token absmax is log-spaced over
// [absmax_lo, absmax_hi] and scaled per step by 1 + drift * sin(step / 3).
struct TokenActivationConfig {
  std::size_t tokens = 16;
  std::size_t channels = 64;
  std::size_t steps = 20;
  double absmax_lo = 1.0;
  double absmax_hi = 100.0;
  double drift = 0.5;
};

std::vector<Tensor> SyntheticTokenActivations(const TokenActivationConfig& config, std::uint64_t seed);

struct TokenVsStatic {
  double token_mse = 0.0;
  double static_mse = 0.0;
  // Mean over (step, token) of that token's MSE divided by its mean square.
  double token_relative = 0.0;
  double static_relative = 0.0;
};

// Per-token quantization against one per-tensor maxval held fixed across
// steps (the maximum over all steps).
TokenVsStatic CompareTokenVsStatic(std::span<const Tensor> steps, const FpFormat& fmt);

// ---- Model size and bit operations ----

struct CostLayer {
  std::string name;
  std::uint64_t rows = 0;
  std::uint64_t in_features = 0;
  // Multiply-accumulates per forward pass.
  std::uint64_t macs = 0;
  bool quantized = true;

  std::uint64_t params() const { return rows * in_features; }
};

struct CostManifest {
  std::vector<CostLayer> layers;
};

// "WxAy", e.g. "W4A8".
struct PrecisionSpec {
  int weight_bits = 16;
  int act_bits = 16;

  static PrecisionSpec Parse(const std::string& text);
  std::string name() const;
};

struct CostReport {
  double model_size_bytes = 0.0;
  double bops = 0.0;
  std::uint64_t groups = 0;
};

// size = sum_q params * b_w / 8 + groups * scale_bits / 8 + sum_u params * 16 / 8
// bops = sum_q MACs * b_w * b_a + sum_u MACs * 16 * 16
// group_size 0 means no group scales.
CostReport ComputeCost(const CostManifest& manifest, const PrecisionSpec& precision, std::size_t group_size,
                       int scale_bits);

// PixArt-alpha scale, fitted to the published 16- and 8-bit rows. With
// `fitted_unquantized` false every layer is quantized.
CostManifest PixArtAlphaCostManifest(bool fitted_unquantized);
// Linear layers of the toy model (quantized) plus the AdaLN MLP (unquantized).
CostManifest ToyDiTCostManifest(const ToyDiTConfig& config);

// CSV with header precision,group_size,scale_bits,model_size_bytes,model_size_mb,bops,groups.
std::string CostCsv(const std::vector<std::pair<PrecisionSpec, CostReport>>& rows, std::size_t group_size,
                    int scale_bits);

// ---- Calibration budget sweep ----

struct SweepConfig {
  std::vector<RoundingVariant> variants{RoundingVariant::kOriginal, RoundingVariant::kScaleAware};
  std::vector<int> budgets{250, 500, 1000, 2000};
  CalibrationConfig base;
  std::size_t jobs = 1;
};

struct SweepRow {
  RoundingVariant variant = RoundingVariant::kScaleAware;
  int iters = 0;
  double final_hard_loss = 0.0;
  double rtn_loss = 0.0;
  bool fell_back = false;
};

// Runs CalibrateLayer for every (variant, budget) pair. Rows come back in
// variant-major grid order however the jobs are scheduled.
std::vector<SweepRow> BudgetSweep(const Tensor& w, const MinMaxResult& rtn, const Tensor& inputs,
                                  const SweepConfig& config);

// Lowest final loss of a variant across the sweep.
std::optional<double> BestLoss(std::span<const SweepRow> rows, RoundingVariant variant);
// Smallest swept budget at which a variant's final loss is <= target.
std::optional<int> BudgetToReach(std::span<const SweepRow> rows, RoundingVariant variant, double target);

// CSV with header variant,iters,final_hard_loss,rtn_loss,fell_back.
std::string SweepCsv(std::span<const SweepRow> rows);

// ---- Grid report ----

inline constexpr double kDensityRadii[] = {1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0 / 2};

// CSV with header format,maxval,kind,x,y. "value" rows hold grid index x and
// value y; "density" rows hold radius fraction x and point count y.
std::string GridReportCsv(std::span<const FpFormat> formats, double maxval);

// ---- JSON ----

std::string CalibrationReportJson(const CalibrationReport& report);

}  // namespace fpq

#endif  // FPQ_ANALYSIS_H_
