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

#include "fpq/adaround.h"

#include <algorithm>
#include <cmath>
#include <optional>

#include "fpq/errors.h"

namespace fpq {

namespace {

constexpr double kGateSpan = kGateZeta - kGateGamma;

double Sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

void RequireScale(double scale) {
  if (!(scale > 0 && std::isfinite(scale))) throw ParameterError("gate scale must be positive");
}

}  // namespace

std::string_view VariantName(RoundingVariant variant) {
  return variant == RoundingVariant::kOriginal ? "original" : "scale-aware";
}

RoundingVariant ParseVariant(std::string_view name) {
  if (name == "original") return RoundingVariant::kOriginal;
  if (name == "scale-aware" || name == "scale_aware") return RoundingVariant::kScaleAware;
  throw ConfigError("unknown rounding variant '" + std::string(name) + "'");
}

double RectifiedSigmoid(double v) { return std::clamp(Sigmoid(v) * kGateSpan + kGateGamma, 0.0, 1.0); }

double RectifiedSigmoidGrad(double v) {
  const double s = Sigmoid(v);
  const double raw = s * kGateSpan + kGateGamma;
  if (raw <= 0.0 || raw >= 1.0) return 0.0;
  return kGateSpan * s * (1.0 - s);
}

double InverseRectifiedSigmoid(double h) {
  if (!(h >= 0.0 && h <= 1.0)) throw ParameterError("gate value must lie in [0, 1]");
  const double p = (h - kGateGamma) / kGateSpan;
  return std::log(p / (1.0 - p));
}

double ScaleAwareGate(double v_prime, double scale) {
  RequireScale(scale);
  return RectifiedSigmoid(v_prime / scale);
}

double ScaleAwareGateGrad(double v_prime, double scale) {
  RequireScale(scale);
  return RectifiedSigmoidGrad(v_prime / scale) / scale;
}

Tensor CalibrationBatch::Stacked() const {
  if (samples.empty()) throw ParameterError("calibration batch is empty");
  return ConcatRows<float>(samples);
}

RoundingMask::RoundingMask(const Tensor& w, const MinMaxResult& rtn, RoundingVariant variant)
    : variant_(variant),
      v_(w.shape()),
      scales_(rtn.scales),
      floors_(w.shape()),
      lower_(w.shape()),
      upper_(w.shape()),
      buckets_(w.size(), 1) {
  const auto* fmt = std::get_if<FpFormat>(&rtn.quantized.format);
  if (!fmt) throw ParameterError("rounding masks need an FP min-max result");
  if (rtn.quantized.shape != w.shape() || rtn.scales.shape() != w.shape()) {
    throw DimensionError("weight and quantization result shapes differ");
  }
  man_bits_ = fmt->man_bits();
  std::vector<std::optional<FpCodebook>> books(rtn.quantized.group_maxvals.size());
  for (std::size_t g = 0; g < books.size(); ++g) {
    if (rtn.quantized.group_maxvals[g] > 0) books[g].emplace(*fmt, rtn.quantized.group_maxvals[g]);
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    const auto& book = books.at(rtn.quantized.GroupOf(i));
    if (!book || scales_[i] == 0.0) {
      scales_[i] = 0.0;
      continue;
    }
    const double x = std::clamp<double>(w[i], -book->maxval(), book->maxval());
    const int k = book->Bucket(std::abs(x));
    buckets_[i] = k;
    const double lo = static_cast<double>(book->MinCode(k));
    const double hi = static_cast<double>(book->MaxCode(k));
    const bool negative = x < 0;
    lower_[i] = negative ? -hi : lo;
    upper_[i] = negative ? -lo : hi;
    const double ratio = x / scales_[i];
    const double fl = std::clamp(std::floor(ratio), lower_[i], upper_[i]);
    floors_[i] = fl;
    const double frac = std::clamp(ratio - fl, 0.0, 1.0);
    const double v = InverseRectifiedSigmoid(frac);
    v_[i] = variant_ == RoundingVariant::kScaleAware ? v * scales_[i] : v;
  }
}

RoundingMask RoundingMask::WarmStart(const Tensor& w, const MinMaxResult& rtn, RoundingVariant variant) {
  return RoundingMask(w, rtn, variant);
}

RoundingMask RoundingMask::Nearest(const Tensor& w, const MinMaxResult& rtn, RoundingVariant variant) {
  RoundingMask mask(w, rtn, variant);
  std::vector<std::uint8_t> gates(w.size(), 0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (mask.frozen(i)) continue;
    const double code = std::round(rtn.values[i] / mask.scales_[i]);
    gates[i] = code - mask.floors_[i] >= 0.5 ? 1 : 0;
  }
  mask.SetHard(gates);
  return mask;
}

double RoundingMask::Gate(std::size_t i) const {
  if (finalized_) return hard_[i];
  if (frozen(i)) return 0.0;
  return variant_ == RoundingVariant::kScaleAware ? ScaleAwareGate(v_[i], scales_[i]) : RectifiedSigmoid(v_[i]);
}

double RoundingMask::GateGrad(std::size_t i) const {
  if (finalized_ || frozen(i)) return 0.0;
  return variant_ == RoundingVariant::kScaleAware ? ScaleAwareGateGrad(v_[i], scales_[i])
                                                  : RectifiedSigmoidGrad(v_[i]);
}

TensorD RoundingMask::Gates() const {
  TensorD out(v_.shape());
  for (std::size_t i = 0; i < size(); ++i) out[i] = Gate(i);
  return out;
}

void RoundingMask::Finalize() {
  std::vector<std::uint8_t> gates(size());
  for (std::size_t i = 0; i < size(); ++i) gates[i] = !frozen(i) && Gate(i) >= 0.5;
  SetHard(gates);
}

void RoundingMask::SetHard(std::span<const std::uint8_t> gates) {
  if (gates.size() != size()) throw DimensionError("hard gate count does not match mask");
  hard_.assign(gates.begin(), gates.end());
  for (std::size_t i = 0; i < size(); ++i) {
    if (frozen(i)) hard_[i] = 0;
  }
  finalized_ = true;
}

TensorD SoftQuantizedWeight(const RoundingMask& mask) {
  TensorD out(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.frozen(i)) continue;
    const double code = std::clamp(mask.floors()[i] + mask.Gate(i), mask.lower()[i], mask.upper()[i]);
    out[i] = mask.scales()[i] * code;
  }
  return out;
}

MinMaxResult ApplyMask(const RoundingMask& mask, const MinMaxResult& rtn) {
  if (!mask.finalized()) throw ParameterError("mask must be finalized before packing");
  if (mask.shape() != rtn.quantized.shape) throw DimensionError("mask and result shapes differ");
  MinMaxResult out = rtn;
  const int m = mask.man_bits();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.frozen(i)) {
      out.quantized.codes[i] = 0;
      out.values[i] = 0.0f;
      continue;
    }
    const double code = std::clamp(mask.floors()[i] + mask.Gate(i), mask.lower()[i], mask.upper()[i]);
    const auto j = static_cast<std::int64_t>(std::abs(code));
    const std::int32_t index =
        j == 0 ? 0 : static_cast<std::int32_t>((static_cast<std::int64_t>(mask.buckets()[i] - 1) << m) + j);
    const float mag = static_cast<float>(mask.scales()[i] * static_cast<double>(j));
    const bool negative = code < 0;
    out.quantized.codes[i] = negative ? -index : index;
    out.values[i] = negative ? -mag : mag;
  }
  return out;
}

double RoundingRegularizer(const RoundingMask& mask, double beta) {
  double total = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.frozen(i)) continue;
    total += 1.0 - std::pow(std::abs(2.0 * mask.Gate(i) - 1.0), beta);
  }
  return total;
}

TensorD MaskGradient(const RoundingMask& mask, const TensorD& weight_grad, double lambda, double beta) {
  if (weight_grad.shape() != mask.shape()) throw DimensionError("weight gradient shape does not match mask");
  TensorD grad(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double dgate = mask.GateGrad(i);
    if (dgate == 0.0) continue;
    const double raw = mask.floors()[i] + mask.Gate(i);
    double g = 0.0;
    if (raw >= mask.lower()[i] && raw <= mask.upper()[i]) g = weight_grad[i] * mask.scales()[i] * dgate;
    if (lambda != 0.0) {
      const double t = 2.0 * mask.Gate(i) - 1.0;
      if (t != 0.0) {
        const double sign = t > 0 ? 1.0 : -1.0;
        g += lambda * (-beta * std::pow(std::abs(t), beta - 1.0) * sign * 2.0) * dgate;
      }
    }
    grad[i] = g;
  }
  return grad;
}

LayerObjective::LayerObjective(const Tensor& w, const Tensor& inputs) : w_(w.Cast<double>()) {
  if (w.rank() != 2) throw DimensionError("layer objective expects a 2-D [out x in] weight");
  if (inputs.rank() != 2 || inputs.cols() != w.cols()) {
    throw DimensionError("calibration inputs must be [N x " + std::to_string(w.cols()) + "], got " +
                         ShapeToString(inputs.shape()));
  }
  rows_ = inputs.rows();
  if (rows_ == 0) throw ParameterError("layer objective needs at least one input row");
  const std::size_t in = w.cols();
  gram_ = TensorD({in, in});
  for (std::size_t n = 0; n < rows_; ++n) {
    const auto x = inputs.row(n);
    for (std::size_t a = 0; a < in; ++a) {
      const double xa = x[a];
      if (xa == 0.0) continue;
      for (std::size_t b = a; b < in; ++b) gram_(a, b) += xa * x[b];
    }
  }
  const double inv = 1.0 / static_cast<double>(rows_);
  for (std::size_t a = 0; a < in; ++a) {
    for (std::size_t b = a; b < in; ++b) {
      gram_(a, b) *= inv;
      gram_(b, a) = gram_(a, b);
    }
  }
}

double LayerObjective::Evaluate(std::span<const TensorD> weights, std::vector<TensorD>* grads) const {
  if (weights.size() != 1) throw DimensionError("layer objective takes exactly one weight");
  if (weights[0].shape() != w_.shape()) throw DimensionError("soft weight shape does not match layer");
  const TensorD err = Subtract(w_, weights[0]);
  const TensorD eg = Matmul(err, gram_);
  double total = 0.0;
  for (std::size_t i = 0; i < err.size(); ++i) total += err[i] * eg[i];
  if (grads) {
    grads->assign(1, Scale(eg, -2.0));
  }
  return total;
}

double LayerObjective::Reconstruction(const TensorD& w_tilde) const {
  return Evaluate(std::span<const TensorD>(&w_tilde, 1), nullptr);
}

LossTerms ReconstructionLoss(const LayerObjective& objective, const RoundingMask& mask, double lambda,
                             double beta) {
  LossTerms t;
  t.reconstruction = objective.Reconstruction(SoftQuantizedWeight(mask));
  t.regularizer = RoundingRegularizer(mask, beta);
  t.total = t.reconstruction + lambda * t.regularizer;
  return t;
}

TensorD LossGradient(const LayerObjective& objective, const RoundingMask& mask, double lambda, double beta) {
  const TensorD soft = SoftQuantizedWeight(mask);
  std::vector<TensorD> grads;
  objective.Evaluate(std::span<const TensorD>(&soft, 1), &grads);
  return MaskGradient(mask, grads[0], lambda, beta);
}

bool BetaSchedule::RegularizerActive(int iter, int total) const {
  return static_cast<double>(iter) >= warmup * static_cast<double>(total);
}

double BetaSchedule::At(int iter, int total) const {
  const double w = warmup * static_cast<double>(total);
  if (static_cast<double>(iter) < w) return start;
  const double span = static_cast<double>(total) - w - 1.0;
  if (span <= 0.0) return end;
  const double frac = std::min(1.0, (static_cast<double>(iter) - w) / span);
  return start + (end - start) * frac;
}

void CalibrationConfig::Validate() const {
  if (iters < 0) throw ConfigError("iters must be >= 0");
  if (!(lr > 0 && std::isfinite(lr))) throw ConfigError("lr must be positive");
  if (!(lambda >= 0 && std::isfinite(lambda))) throw ConfigError("lambda must be >= 0");
  if (!(beta.start > 0 && beta.end > 0)) throw ConfigError("beta bounds must be positive");
  if (!(beta.warmup >= 0 && beta.warmup <= 1)) throw ConfigError("warmup must lie in [0, 1]");
}

namespace {

std::vector<TensorD> SoftWeights(const std::vector<RoundingMask>& masks) {
  std::vector<TensorD> out;
  out.reserve(masks.size());
  for (const auto& m : masks) out.push_back(SoftQuantizedWeight(m));
  return out;
}

}  // namespace

CalibrationResult Calibrate(const ReconstructionObjective& objective, std::vector<RoundingMask> warm,
                            std::vector<RoundingMask> nearest, const CalibrationConfig& config) {
  config.Validate();
  const std::size_t layers = objective.num_layers();
  if (warm.size() != layers || nearest.size() != layers) {
    throw DimensionError("mask count does not match the objective's layer count");
  }
  CalibrationResult result;
  auto& rep = result.report;
  rep.variant = config.variant;
  rep.iters = config.iters;
  rep.lr = config.lr;
  rep.lambda = config.lambda;
  rep.beta = config.beta;
  rep.rtn_loss = objective.Evaluate(SoftWeights(nearest), nullptr);

  std::vector<TensorD> grads;
  for (int it = 0; it < config.iters; ++it) {
    const double beta = config.beta.At(it, config.iters);
    const double lambda = config.beta.RegularizerActive(it, config.iters) ? config.lambda : 0.0;
    const std::vector<TensorD> soft = SoftWeights(warm);
    double loss = objective.Evaluate(soft, &grads);
    if (lambda > 0) {
      for (const auto& m : warm) loss += lambda * RoundingRegularizer(m, beta);
    }
    if (config.record_history) rep.loss_history.push_back(loss);
    if (!std::isfinite(loss)) {
      rep.diverged = true;
      rep.diagnostic = "loss became non-finite at iteration " + std::to_string(it);
      break;
    }
    for (std::size_t l = 0; l < layers; ++l) {
      const TensorD g = MaskGradient(warm[l], grads[l], lambda, beta);
      auto v = warm[l].v().data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= config.lr * g[i];
    }
  }

  if (!rep.diverged) {
    for (auto& m : warm) m.Finalize();
    rep.final_hard_loss = objective.Evaluate(SoftWeights(warm), nullptr);
    if (!std::isfinite(rep.final_hard_loss)) {
      rep.diverged = true;
      rep.diagnostic = "hard-rounded loss is non-finite";
    }
  }
  if (rep.diverged || rep.final_hard_loss > rep.rtn_loss) {
    if (!rep.diverged) {
      rep.diagnostic = "hard-rounded loss exceeded round-to-nearest; kept round-to-nearest";
    }
    rep.fell_back = true;
    rep.final_hard_loss = rep.rtn_loss;
    result.masks = std::move(nearest);
  } else {
    result.masks = std::move(warm);
  }
  return result;
}

CalibrationResult CalibrateLayer(const Tensor& w, const MinMaxResult& rtn, const Tensor& inputs,
                                 const CalibrationConfig& config) {
  const LayerObjective objective(w, inputs);
  std::vector<RoundingMask> warm{RoundingMask::WarmStart(w, rtn, config.variant)};
  std::vector<RoundingMask> nearest{RoundingMask::Nearest(w, rtn, config.variant)};
  return Calibrate(objective, std::move(warm), std::move(nearest), config);
}

}  // namespace fpq
