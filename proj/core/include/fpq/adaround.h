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

#ifndef FPQ_ADAROUND_H_
#define FPQ_ADAROUND_H_

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fpq/quantizers.h"
#include "fpq/tensor.h"

namespace fpq {

// Stretch constants of the rectified sigmoid gate.
inline constexpr double kGateZeta = 1.1;
inline constexpr double kGateGamma = -0.1;

enum class RoundingVariant {
  kOriginal,    // gate h(V)
  kScaleAware,  // gate h'(V') = h(V' / S)
};

std::string_view VariantName(RoundingVariant variant);
RoundingVariant ParseVariant(std::string_view name);

// h(V) = clip(sigmoid(V) * (zeta - gamma) + gamma, 0, 1).
double RectifiedSigmoid(double v);
// dh/dV, zero wherever the outer clip is active.
double RectifiedSigmoidGrad(double v);
// Inverse of h on [0, 1]; finite at both ends because of the stretch.
double InverseRectifiedSigmoid(double h);

// h'(V', S) = h(V' / S). Throws ParameterError unless S > 0.
double ScaleAwareGate(double v_prime, double scale);
// dh'/dV' = h_grad(V' / S) / S.
double ScaleAwareGateGrad(double v_prime, double scale);

// Calibration inputs captured at one layer or block boundary, one tensor per
// (sample, timestep) pair. Layer batches hold [tokens x in_features] tensors.
struct CalibrationBatch {
  std::vector<Tensor> samples;

  std::size_t size() const { return samples.size(); }
  // All samples stacked along the row axis.
  Tensor Stacked() const;
};

// The continuous rounding variable for one weight tensor, with the frozen
// per-element step S, floor(W / S), and the integer clip bounds of each
// element's exponent bucket.
class RoundingMask {
 public:
  // Warm start: the gate equals frac(W / S), so the soft weight starts at W.
  static RoundingMask WarmStart(const Tensor& w, const MinMaxResult& rtn, RoundingVariant variant);
  // Binary mask that reproduces round-to-nearest.
  static RoundingMask Nearest(const Tensor& w, const MinMaxResult& rtn, RoundingVariant variant);

  RoundingVariant variant() const { return variant_; }
  std::size_t size() const { return v_.size(); }
  const Shape& shape() const { return v_.shape(); }

  TensorD& v() { return v_; }
  const TensorD& v() const { return v_; }
  const TensorD& scales() const { return scales_; }
  const TensorD& floors() const { return floors_; }
  const TensorD& lower() const { return lower_; }
  const TensorD& upper() const { return upper_; }
  // Exponent bucket of each element under its group's codebook.
  const std::vector<int>& buckets() const { return buckets_; }
  int man_bits() const { return man_bits_; }

  // Gate value in [0, 1]; after Finalize() exactly 0 or 1.
  double Gate(std::size_t i) const;
  // d gate / d variable (V or V'); zero after Finalize() and for frozen elements.
  double GateGrad(std::size_t i) const;
  TensorD Gates() const;

  // Elements with S == 0 (all-zero groups) never move.
  bool frozen(std::size_t i) const { return scales_[i] == 0.0; }

  // Thresholds every gate at 0.5.
  void Finalize();
  bool finalized() const { return finalized_; }
  // Sets a binary state directly (used for round-to-nearest fallbacks).
  void SetHard(std::span<const std::uint8_t> gates);

 private:
  RoundingMask(const Tensor& w, const MinMaxResult& rtn, RoundingVariant variant);

  RoundingVariant variant_;
  TensorD v_;
  TensorD scales_;
  TensorD floors_;
  TensorD lower_;
  TensorD upper_;
  std::vector<int> buckets_;
  int man_bits_ = 0;
  std::vector<std::uint8_t> hard_;
  bool finalized_ = false;
};

// W~ = S * clip(floor(W / S) + gate, lower, upper).
TensorD SoftQuantizedWeight(const RoundingMask& mask);

// Packs a finalized mask into codes and values, reusing the group metadata
// of the round-to-nearest result it was built from.
MinMaxResult ApplyMask(const RoundingMask& mask, const MinMaxResult& rtn);

// f_reg = sum(1 - |2h - 1|^beta).
double RoundingRegularizer(const RoundingMask& mask, double beta);

// Chain rule from dLoss/dW~ to the mask variable, plus lambda * d f_reg.
// Elements outside their clip bounds receive no reconstruction gradient.
TensorD MaskGradient(const RoundingMask& mask, const TensorD& weight_grad, double lambda, double beta);

struct LossTerms {
  double reconstruction = 0.0;
  double regularizer = 0.0;
  double total = 0.0;
};

// A differentiable reconstruction term over one or more layers' soft weights.
class ReconstructionObjective {
 public:
  virtual ~ReconstructionObjective() = default;
  virtual std::size_t num_layers() const = 0;
  // Returns the reconstruction term; fills dTerm/dW~ per layer when grads is set.
  virtual double Evaluate(std::span<const TensorD> weights, std::vector<TensorD>* grads) const = 0;
};

// Layer-wise term (1/N) * sum_n ||W x_n - W~ x_n||^2 over N input rows,
// evaluated through the input Gram matrix.
class LayerObjective final : public ReconstructionObjective {
 public:
  LayerObjective(const Tensor& w, const Tensor& inputs);
  LayerObjective(const Tensor& w, const CalibrationBatch& batch) : LayerObjective(w, batch.Stacked()) {}

  std::size_t num_layers() const override { return 1; }
  double Evaluate(std::span<const TensorD> weights, std::vector<TensorD>* grads) const override;

  double Reconstruction(const TensorD& w_tilde) const;
  std::size_t input_rows() const { return rows_; }

 private:
  TensorD w_;
  TensorD gram_;
  std::size_t rows_;
};

LossTerms ReconstructionLoss(const LayerObjective& objective, const RoundingMask& mask, double lambda,
                             double beta);
TensorD LossGradient(const LayerObjective& objective, const RoundingMask& mask, double lambda,
                     double beta);

// Regularizer schedule: off for the first `warmup` fraction of iterations,
// then beta decays linearly from `start` to `end`.
struct BetaSchedule {
  double start = 20.0;
  double end = 2.0;
  double warmup = 0.2;

  bool RegularizerActive(int iter, int total) const;
  double At(int iter, int total) const;
};

struct CalibrationConfig {
  RoundingVariant variant = RoundingVariant::kScaleAware;
  int iters = 2500;
  double lr = 1e-2;
  double lambda = 0.01;
  BetaSchedule beta;
  std::uint64_t seed = 0;
  bool record_history = true;

  void Validate() const;
};

struct CalibrationReport {
  std::string target;
  RoundingVariant variant = RoundingVariant::kScaleAware;
  int iters = 0;
  double lr = 0.0;
  double lambda = 0.0;
  BetaSchedule beta;
  std::vector<double> loss_history;
  double rtn_loss = 0.0;
  double final_hard_loss = 0.0;
  bool fell_back = false;
  bool diverged = false;
  std::string diagnostic;
};

struct CalibrationResult {
  std::vector<RoundingMask> masks;
  CalibrationReport report;
};

// Plain gradient descent on the mask variables of every layer in the
// objective, followed by hard thresholding. If the hard loss exceeds the
// round-to-nearest loss, or the loss turns NaN, the round-to-nearest masks are
// returned instead and the report says so.
CalibrationResult Calibrate(const ReconstructionObjective& objective, std::vector<RoundingMask> warm,
                            std::vector<RoundingMask> nearest, const CalibrationConfig& config);

// Layer-wise convenience wrapper.
CalibrationResult CalibrateLayer(const Tensor& w, const MinMaxResult& rtn, const Tensor& inputs,
                                 const CalibrationConfig& config);

}  // namespace fpq

#endif  // FPQ_ADAROUND_H_
