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

#ifndef FPQ_TOY_DIT_H_
#define FPQ_TOY_DIT_H_

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fpq/adaround.h"
#include "fpq/fp_format.h"
#include "fpq/quantizers.h"
#include "fpq/tensor.h"

namespace fpq {

// Weight layers of one block. Every layer is a bias-free [out x in] linear map.
enum class LayerRole : std::uint8_t {
  kSelfQ,
  kSelfK,
  kSelfV,
  kSelfOut,
  kCrossQ,
  kCrossK,
  kCrossV,
  kCrossOut,
  kFf1,  // feeds the GELU
  kFf2,
};
inline constexpr std::size_t kNumRoles = 10;
inline constexpr std::array<LayerRole, kNumRoles> kAllRoles = {
    LayerRole::kSelfQ,  LayerRole::kSelfK,  LayerRole::kSelfV,  LayerRole::kSelfOut, LayerRole::kCrossQ,
    LayerRole::kCrossK, LayerRole::kCrossV, LayerRole::kCrossOut, LayerRole::kFf1,   LayerRole::kFf2,
};

std::string_view RoleName(LayerRole role);
LayerRole ParseRole(std::string_view name);
constexpr std::size_t RoleIndex(LayerRole role) { return static_cast<std::size_t>(role); }

// Rows of the per-block modulation table.
enum ModRow : std::size_t {
  kShiftSelf = 0,
  kScaleSelf,
  kGateSelf,
  kShiftCross,
  kScaleCross,
  kShiftFf,
  kScaleFf,
  kGateFf,
  kNumModRows,
};

enum class WeightInit {
  kHeavyTailed,  // Gaussian plus sparse large outliers
  kGaussian,
};

struct ToyDiTConfig {
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t token_count = 16;
  std::size_t num_blocks = 2;
  std::size_t ff_expansion = 4;
  std::size_t cond_tokens = 8;
  std::size_t time_freq_dim = 32;
  WeightInit init = WeightInit::kHeavyTailed;
  double outlier_prob = 0.01;
  double outlier_scale = 16.0;

  std::size_t ff_dim() const { return ff_expansion * embed_dim; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  void Validate() const;
};

struct ToyDiTBlock {
  std::array<Tensor, kNumRoles> weights;
  // Per-block learned offsets added to the shared AdaLN output, [kNumModRows x D].
  Tensor mod_table;

  Tensor& weight(LayerRole role) { return weights[RoleIndex(role)]; }
  const Tensor& weight(LayerRole role) const { return weights[RoleIndex(role)]; }
};

// The AdaLN-single MLP shared by all blocks:
//   sinusoidal(t) -> Linear + bias -> SiLU -> Linear + bias -> [kNumModRows x D].
struct AdaLnMlp {
  Tensor w1;  // [D x freq]
  Tensor b1;  // [D]
  Tensor w2;  // [kNumModRows*D x D]
  Tensor b2;  // [kNumModRows*D]
};

struct ToyDiT {
  ToyDiTConfig config;
  AdaLnMlp adaln;
  std::vector<ToyDiTBlock> blocks;

  static ToyDiT Create(const ToyDiTConfig& config, std::uint64_t seed);
};

// Standard sinusoidal embedding of an integer timestep: [cos(t f_i), sin(t f_i)]
// with f_i = 10000^(-i / (dim/2)).
Tensor TimestepEmbedding(int timestep, std::size_t dim);
// Shared AdaLN output for a timestep, [kNumModRows x D].
Tensor SharedModulation(const ToyDiT& model, int timestep);
// Modulation used by one block: shared output plus the block's table.
Tensor BlockModulation(const ToyDiT& model, std::size_t block, int timestep);

// Called with the input of each linear layer before any activation
// quantization is applied.
using LayerObserver = std::function<void(std::size_t block, LayerRole role, const Tensor& input)>;

struct ForwardOptions {
  const LayerObserver* observer = nullptr;
  // When set, every linear layer's input is token-quantized with this format.
  std::optional<FpFormat> act_fmt;
};

// One block: AdaLN -> self-attention -> gated residual -> AdaLN ->
// cross-attention(cond) -> residual -> AdaLN -> ff1 -> GELU -> ff2 -> gated
// residual. AdaLN(x) = LayerNorm(x) * (1 + scale) + shift.
Tensor BlockForward(const ToyDiTBlock& block, const ToyDiTConfig& config, const Tensor& modulation,
                    const Tensor& latents, const Tensor& cond, const ForwardOptions& options = {},
                    std::size_t block_index = 0);
// A single block of a model at a timestep.
Tensor Forward(const ToyDiT& model, std::size_t block, const Tensor& latents, int timestep, const Tensor& cond,
               const ForwardOptions& options = {});
// All blocks in sequence.
Tensor ModelForward(const ToyDiT& model, const Tensor& latents, int timestep, const Tensor& cond,
                    const ForwardOptions& options = {});

// Double-precision block forward without activation quantization, and its
// reverse pass: BlockBackwardD returns the output and fills `grads` with
// dLoss/dW given dLoss/dOutput = loss_grad(output).
TensorD BlockForwardD(const std::array<TensorD, kNumRoles>& weights, const ToyDiTConfig& config,
                      const TensorD& modulation, const TensorD& latents, const TensorD& cond);
TensorD BlockBackwardD(const std::array<TensorD, kNumRoles>& weights, const ToyDiTConfig& config,
                       const TensorD& modulation, const TensorD& latents, const TensorD& cond,
                       const std::function<TensorD(const TensorD&)>& loss_grad,
                       std::array<TensorD, kNumRoles>& grads);

// Synthetic sampling trajectory. Latent at step i is
//   sqrt(abar_i) * clean + sqrt(1 - abar_i) * noise_i
// with a cosine abar schedule over `train_timesteps`; clean rows carry
// log-normal token-dependent scales so per-token ranges differ.
struct TrajectoryConfig {
  std::size_t steps = 20;
  int train_timesteps = 1000;
  double token_scale_sigma = 0.75;

  void Validate() const;
};

struct Trajectory {
  std::vector<int> timesteps;
  std::vector<Tensor> latents;
  Tensor cond;
};

Trajectory MakeTrajectory(const ToyDiTConfig& config, const TrajectoryConfig& traj, std::uint64_t seed);
double AlphaBar(int timestep, int train_timesteps);

// Inputs captured at one block boundary, one entry per (sample, step).
struct BlockCalibrationSample {
  Tensor latents;
  Tensor modulation;
  Tensor cond;
};

struct LayerKey {
  std::size_t block;
  LayerRole role;
  auto operator<=>(const LayerKey&) const = default;
};

struct CalibrationSet {
  std::map<LayerKey, CalibrationBatch> layers;
  std::vector<std::vector<BlockCalibrationSample>> blocks;
};

struct CaptureFilter {
  // Empty means every (block, role).
  std::vector<LayerKey> layers;
  bool capture_layers = true;
  bool capture_blocks = true;

  bool Wants(const LayerKey& key) const;
};

// Runs the full-precision model over n_samples trajectories (seeds forked
// from `seed`) and captures every target's inputs at every step.
CalibrationSet BuildCalibrationSet(const ToyDiT& model, std::size_t n_samples, const TrajectoryConfig& traj,
                                   std::uint64_t seed, const CaptureFilter& filter = {});

// Role -> format. Roles without an override use the unified format.
struct FormatAssignment {
  FpFormat unified{2, 1};
  std::map<LayerRole, FpFormat> overrides;

  // Unified E2M1 with E3M0 on ff1.
  static FormatAssignment Default();
  static FormatAssignment Unified(const FpFormat& fmt);
  FpFormat For(LayerRole role) const;
};

enum class CalibMode { kLayer, kBlock };

struct QuantizeModelConfig {
  FormatAssignment assignment = FormatAssignment::Default();
  // 0 quantizes each weight tensor with one maxval.
  std::size_t group_size = 128;
  bool calibrate = true;
  CalibMode mode = CalibMode::kLayer;
  CalibrationConfig adaround;
  // Activation format applied by QuantizedForward; empty keeps activations in full precision.
  std::optional<FpFormat> act_fmt;
};

struct LayerQuantization {
  LayerKey key;
  FpFormat format{2, 1};
  MinMaxResult result;
  std::optional<CalibrationReport> report;
};

// Block-level check after layer-wise calibration, on the calibration set.
struct BlockSafeguard {
  std::size_t block = 0;
  double rtn_loss = 0.0;
  double calibrated_loss = 0.0;
  bool reverted = false;
};

struct QuantizedModel {
  // Same architecture with every weight replaced by its dequantized value.
  ToyDiT model;
  std::vector<LayerQuantization> layers;
  // Reports of block-wise jobs, one per block, when mode == kBlock.
  std::vector<CalibrationReport> block_reports;
  // One per block when mode == kLayer and block samples were captured.
  std::vector<BlockSafeguard> block_checks;
  std::optional<FpFormat> act_fmt;
};

// Quantizes every weight layer: min-max FP per tensor or per group, then
// AdaRound against `calib` when enabled. Layer-wise calibration reverts a
// block to round-to-nearest when its block loss on `calib` got worse.
// `calib` may be null when calibration is off.
QuantizedModel QuantizeModel(const ToyDiT& model, const QuantizeModelConfig& config, const CalibrationSet* calib);

ForwardOptions QuantizedForwardOptions(const QuantizedModel& q);

// Mean squared error of each block's output against the full-precision
// block, both fed the full-precision block input. One value per block.
std::vector<double> BlockOutputMse(const ToyDiT& reference, const QuantizedModel& quantized,
                                   const CalibrationSet& eval);

// Block-wise objective: (1/R) * sum over samples of ||out_fp - out_q||^2,
// R the total number of output rows, gradients via BlockBackwardD.
class BlockObjective final : public ReconstructionObjective {
 public:
  BlockObjective(const ToyDiTBlock& block, const ToyDiTConfig& config,
                 std::vector<BlockCalibrationSample> samples);

  std::size_t num_layers() const override { return kNumRoles; }
  double Evaluate(std::span<const TensorD> weights, std::vector<TensorD>* grads) const override;

 private:
  ToyDiTConfig config_;
  std::vector<BlockCalibrationSample> samples_;
  std::vector<TensorD> mods_;
  std::vector<TensorD> latents_;
  std::vector<TensorD> conds_;
  std::vector<TensorD> targets_;
  std::size_t rows_ = 0;
};

// Synthetic single-layer calibration problem: a heavy-tailed [out x in]
// weight and `rows` input vectors drawn from N(0, C) with AR(1) covariance
// C_ij = rho^|i-j|.
struct SyntheticLayerConfig {
  std::size_t out_features = 16;
  std::size_t in_features = 16;
  std::size_t rows = 64;
  double weight_std = 0.1;
  double outlier_prob = 0.05;
  double outlier_scale = 8.0;
  double input_correlation = 0.9;
};

struct SyntheticLayer {
  Tensor weight;
  Tensor inputs;
};

SyntheticLayer MakeSyntheticLayer(const SyntheticLayerConfig& config, std::uint64_t seed);
// Gaussian weights with a fraction of entries multiplied by outlier_scale.
Tensor HeavyTailedTensor(Shape shape, double stddev, double outlier_prob, double outlier_scale,
                         std::uint64_t seed);

// Checkpoint directory: manifest.json plus one tensor container per weight.
void SaveModel(const std::filesystem::path& dir, const ToyDiT& model);
ToyDiT LoadModel(const std::filesystem::path& dir);

}  // namespace fpq

#endif  // FPQ_TOY_DIT_H_
