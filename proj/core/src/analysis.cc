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

#include "fpq/analysis.h"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <exception>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "fpq/errors.h"
#include "fpq/quantizers.h"
#include "fpq/rng.h"

namespace fpq {

std::string FormatNumber(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

double SortedQuantile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ParameterError("quantile of an empty sample");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

BoxStats ComputeBoxStats(std::span<const double> values) {
  if (values.empty()) throw ParameterError("box statistics of an empty sample");
  std::vector<double> s(values.begin(), values.end());
  std::sort(s.begin(), s.end());
  BoxStats b;
  b.min = s.front();
  b.max = s.back();
  b.q1 = SortedQuantile(s, 0.25);
  b.median = SortedQuantile(s, 0.5);
  b.q3 = SortedQuantile(s, 0.75);
  const double lo_fence = b.q1 - 1.5 * b.iqr();
  const double hi_fence = b.q3 + 1.5 * b.iqr();
  b.whisker_low = *std::lower_bound(s.begin(), s.end(), lo_fence);
  b.whisker_high = *(std::upper_bound(s.begin(), s.end(), hi_fence) - 1);
  return b;
}

ActivationStatsCollector::ActivationStatsCollector(std::vector<int> timesteps)
    : timesteps_(std::move(timesteps)), values_(timesteps_.size()), absmax_(timesteps_.size()) {}

void ActivationStatsCollector::Observe(std::size_t step, const Tensor& acts) {
  if (step >= timesteps_.size()) throw ParameterError("step index out of range");
  if (acts.rank() != 2) throw DimensionError("activations must be [tokens x channels]");
  if (channels_ == 0) {
    tokens_ = acts.rows();
    channels_ = acts.cols();
    cmin_.assign(channels_, INFINITY);
    cmax_.assign(channels_, -INFINITY);
  } else if (acts.rows() != tokens_ || acts.cols() != channels_) {
    throw DimensionError("activation shape changed between observations");
  }
  auto& am = absmax_[step];
  if (am.empty()) am.assign(tokens_, 0.0f);
  auto& vals = values_[step];
  for (std::size_t r = 0; r < tokens_; ++r) {
    for (std::size_t c = 0; c < channels_; ++c) {
      const float v = acts(r, c);
      vals.push_back(v);
      am[r] = std::max(am[r], std::abs(v));
      cmin_[c] = std::min(cmin_[c], v);
      cmax_[c] = std::max(cmax_[c], v);
    }
  }
}

ActivationStats ActivationStatsCollector::Finish() const {
  ActivationStats s;
  s.timesteps = timesteps_;
  s.token_absmax = Tensor({timesteps_.size(), tokens_});
  for (std::size_t i = 0; i < timesteps_.size(); ++i) {
    if (values_[i].empty()) throw ParameterError("no activations observed at step " + std::to_string(i));
    for (std::size_t r = 0; r < tokens_; ++r) s.token_absmax(i, r) = absmax_[i][r];
    s.per_step.push_back(ComputeBoxStats(values_[i]));
  }
  s.channel_min = cmin_;
  s.channel_max = cmax_;
  return s;
}

std::map<LayerKey, ActivationStats> CollectActivationStats(const ToyDiT& model, const Trajectory& trajectory) {
  std::map<LayerKey, ActivationStatsCollector> collectors;
  std::size_t step = 0;
  const LayerObserver observer = [&](std::size_t block, LayerRole role, const Tensor& input) {
    auto it = collectors.try_emplace(LayerKey{block, role}, trajectory.timesteps).first;
    it->second.Observe(step, input);
  };
  ForwardOptions opts;
  opts.observer = &observer;
  for (step = 0; step < trajectory.timesteps.size(); ++step) {
    ModelForward(model, trajectory.latents[step], trajectory.timesteps[step], trajectory.cond, opts);
  }
  std::map<LayerKey, ActivationStats> out;
  for (const auto& [key, c] : collectors) out.emplace(key, c.Finish());
  return out;
}

std::string BoxStatsCsv(const std::map<LayerKey, ActivationStats>& stats) {
  std::ostringstream os;
  os << "block,role,step,timestep,min,whisker_low,q1,median,q3,whisker_high,max\n";
  for (const auto& [key, s] : stats) {
    for (std::size_t i = 0; i < s.per_step.size(); ++i) {
      const BoxStats& b = s.per_step[i];
      os << key.block << ',' << RoleName(key.role) << ',' << i << ',' << s.timesteps[i];
      for (double v : {b.min, b.whisker_low, b.q1, b.median, b.q3, b.whisker_high, b.max}) {
        os << ',' << FormatNumber(v);
      }
      os << '\n';
    }
  }
  return os.str();
}

std::string TokenAbsmaxCsv(const std::map<LayerKey, ActivationStats>& stats) {
  std::ostringstream os;
  os << "block,role,step,timestep,token,absmax\n";
  for (const auto& [key, s] : stats) {
    for (std::size_t i = 0; i < s.token_absmax.rows(); ++i) {
      for (std::size_t t = 0; t < s.token_absmax.cols(); ++t) {
        os << key.block << ',' << RoleName(key.role) << ',' << i << ',' << s.timesteps[i] << ',' << t << ','
           << FormatNumber(s.token_absmax(i, t)) << '\n';
      }
    }
  }
  return os.str();
}

std::vector<Tensor> SyntheticTokenActivations(const TokenActivationConfig& config, std::uint64_t seed) {
  if (config.tokens == 0 || config.channels == 0 || config.steps == 0) {
    throw ConfigError("token activation dimensions must be >= 1");
  }
  if (!(config.absmax_lo > 0 && config.absmax_hi >= config.absmax_lo)) {
    throw ConfigError("absmax range must satisfy 0 < lo <= hi");
  }
  Rng rng(seed);
  std::vector<Tensor> out;
  const double ratio = config.absmax_hi / config.absmax_lo;
  for (std::size_t s = 0; s < config.steps; ++s) {
    const double drift = 1.0 + config.drift * std::sin(static_cast<double>(s) / 3.0);
    Tensor x({config.tokens, config.channels});
    for (std::size_t t = 0; t < config.tokens; ++t) {
      const double frac = config.tokens > 1 ? static_cast<double>(t) / static_cast<double>(config.tokens - 1) : 0.0;
      const double target = config.absmax_lo * std::pow(ratio, frac) * drift;
      std::vector<double> row(config.channels);
      double mx = 0.0;
      for (auto& v : row) {
        v = rng.Normal();
        mx = std::max(mx, std::abs(v));
      }
      for (std::size_t c = 0; c < config.channels; ++c) x(t, c) = static_cast<float>(row[c] / mx * target);
    }
    out.push_back(std::move(x));
  }
  return out;
}

TokenVsStatic CompareTokenVsStatic(std::span<const Tensor> steps, const FpFormat& fmt) {
  if (steps.empty()) throw ParameterError("no activation steps to compare");
  double global = 0.0;
  for (const auto& s : steps) global = std::max(global, MaxAbs(s));
  if (global == 0.0) throw ParameterError("activations are all zero");
  const FpFormat fixed(fmt.exp_bits(), fmt.man_bits(), global);
  TokenVsStatic r;
  std::size_t elements = 0, tokens = 0;
  for (const auto& s : steps) {
    const Tensor tq = TokenQuantize(s, TokenQuantConfig{FpFormat(fmt.exp_bits(), fmt.man_bits())}).values;
    const Tensor sq = FpMinMaxQuantize(s, fixed).values;
    for (std::size_t t = 0; t < s.rows(); ++t) {
      double et = 0.0, es = 0.0, ms = 0.0;
      for (std::size_t c = 0; c < s.cols(); ++c) {
        const double x = s(t, c);
        et += (tq(t, c) - x) * (tq(t, c) - x);
        es += (sq(t, c) - x) * (sq(t, c) - x);
        ms += x * x;
      }
      r.token_mse += et;
      r.static_mse += es;
      if (ms > 0) {
        r.token_relative += et / ms;
        r.static_relative += es / ms;
        ++tokens;
      }
      elements += s.cols();
    }
  }
  r.token_mse /= static_cast<double>(elements);
  r.static_mse /= static_cast<double>(elements);
  if (tokens) {
    r.token_relative /= static_cast<double>(tokens);
    r.static_relative /= static_cast<double>(tokens);
  }
  return r;
}

PrecisionSpec PrecisionSpec::Parse(const std::string& text) {
  auto fail = [&] { return ConfigError("invalid precision '" + text + "', expected WxAy"); };
  std::string up;
  for (char ch : text) up.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
  const auto a = up.find('A');
  if (up.size() < 4 || up[0] != 'W' || a == std::string::npos || a < 2 || a + 1 >= up.size()) throw fail();
  PrecisionSpec p;
  try {
    std::size_t used = 0;
    p.weight_bits = std::stoi(up.substr(1, a - 1), &used);
    if (used != a - 1) throw fail();
    p.act_bits = std::stoi(up.substr(a + 1), &used);
    if (used != up.size() - a - 1) throw fail();
  } catch (const std::logic_error&) {
    throw fail();
  }
  if (p.weight_bits < 1 || p.weight_bits > 32 || p.act_bits < 1 || p.act_bits > 32) throw fail();
  return p;
}

std::string PrecisionSpec::name() const {
  return "W" + std::to_string(weight_bits) + "A" + std::to_string(act_bits);
}

CostReport ComputeCost(const CostManifest& manifest, const PrecisionSpec& precision, std::size_t group_size,
                       int scale_bits) {
  if (scale_bits < 0) throw ConfigError("scale bits must be >= 0");
  constexpr double kUnquantizedBits = 16.0;
  CostReport r;
  double bits = 0.0;
  for (const auto& l : manifest.layers) {
    const double params = static_cast<double>(l.params());
    const double macs = static_cast<double>(l.macs);
    if (!l.quantized) {
      bits += params * kUnquantizedBits;
      r.bops += macs * kUnquantizedBits * kUnquantizedBits;
      continue;
    }
    bits += params * precision.weight_bits;
    r.bops += macs * precision.weight_bits * precision.act_bits;
    if (group_size > 0 && l.in_features > 0) {
      r.groups += l.rows * ((l.in_features + group_size - 1) / group_size);
    }
  }
  bits += static_cast<double>(r.groups) * scale_bits;
  r.model_size_bytes = bits / 8.0;
  return r;
}

CostManifest PixArtAlphaCostManifest(bool fitted_unquantized) {
  // 16-bit total 610.86 MB and W8 size 305.53 MB give 305.33M quantized plus
  // 0.1M unquantized parameters; 35.72 and 8.938 TBOPs give the MAC split.
  constexpr std::uint64_t kHidden = 1152;
  constexpr std::uint64_t kTotalMacs = 139'531'250'000;  // 35.72e12 / 256
  constexpr std::uint64_t kUnquantizedMacs = 41'666'667;  // (8.938e12 - 64 * total) / 192
  CostManifest m;
  if (!fitted_unquantized) {
    m.layers.push_back({"transformer", 265'130, kHidden, kTotalMacs, true});
    return m;
  }
  m.layers.push_back({"transformer", 265'044, kHidden, kTotalMacs - kUnquantizedMacs, true});
  m.layers.push_back({"unquantized", 100, 1000, kUnquantizedMacs, false});
  return m;
}

CostManifest ToyDiTCostManifest(const ToyDiTConfig& config) {
  config.Validate();
  CostManifest m;
  const std::uint64_t d = config.embed_dim;
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    for (LayerRole role : kAllRoles) {
      std::uint64_t out = d, in = d;
      if (role == LayerRole::kFf1) out = config.ff_dim();
      if (role == LayerRole::kFf2) in = config.ff_dim();
      const bool from_cond = role == LayerRole::kCrossK || role == LayerRole::kCrossV;
      const std::uint64_t tokens = from_cond ? config.cond_tokens : config.token_count;
      m.layers.push_back({"block" + std::to_string(b) + "." + std::string(RoleName(role)), out, in,
                          tokens * out * in, true});
    }
  }
  const std::uint64_t f = config.time_freq_dim;
  m.layers.push_back({"adaln.w1", d, f, d * f, false});
  m.layers.push_back({"adaln.b1", d, 1, 0, false});
  m.layers.push_back({"adaln.w2", kNumModRows * d, d, kNumModRows * d * d, false});
  m.layers.push_back({"adaln.b2", kNumModRows * d, 1, 0, false});
  return m;
}

std::string CostCsv(const std::vector<std::pair<PrecisionSpec, CostReport>>& rows, std::size_t group_size,
                    int scale_bits) {
  std::ostringstream os;
  os << "precision,group_size,scale_bits,model_size_bytes,model_size_mb,bops,groups\n";
  for (const auto& [p, r] : rows) {
    os << p.name() << ',' << group_size << ',' << scale_bits << ',' << FormatNumber(r.model_size_bytes) << ','
       << FormatNumber(r.model_size_bytes / 1e6) << ',' << FormatNumber(r.bops) << ',' << r.groups << '\n';
  }
  return os.str();
}

std::vector<SweepRow> BudgetSweep(const Tensor& w, const MinMaxResult& rtn, const Tensor& inputs,
                                  const SweepConfig& config) {
  struct Job {
    RoundingVariant variant;
    int iters;
  };
  std::vector<Job> grid;
  for (RoundingVariant v : config.variants) {
    for (int b : config.budgets) grid.push_back({v, b});
  }
  std::vector<SweepRow> rows(grid.size());
  std::vector<std::exception_ptr> errors(grid.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      try {
        CalibrationConfig cfg = config.base;
        cfg.variant = grid[i].variant;
        cfg.iters = grid[i].iters;
        cfg.record_history = false;
        const CalibrationResult res = CalibrateLayer(w, rtn, inputs, cfg);
        rows[i] = {grid[i].variant, grid[i].iters, res.report.final_hard_loss, res.report.rtn_loss,
                   res.report.fell_back};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(config.jobs, 1, std::max<std::size_t>(grid.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

std::optional<double> BestLoss(std::span<const SweepRow> rows, RoundingVariant variant) {
  std::optional<double> best;
  for (const auto& r : rows) {
    if (r.variant == variant) best = best ? std::min(*best, r.final_hard_loss) : r.final_hard_loss;
  }
  return best;
}

std::optional<int> BudgetToReach(std::span<const SweepRow> rows, RoundingVariant variant, double target) {
  std::optional<int> budget;
  for (const auto& r : rows) {
    if (r.variant == variant && r.final_hard_loss <= target) budget = budget ? std::min(*budget, r.iters) : r.iters;
  }
  return budget;
}

std::string SweepCsv(std::span<const SweepRow> rows) {
  std::ostringstream os;
  os << "variant,iters,final_hard_loss,rtn_loss,fell_back\n";
  for (const auto& r : rows) {
    os << VariantName(r.variant) << ',' << r.iters << ',' << FormatNumber(r.final_hard_loss) << ','
       << FormatNumber(r.rtn_loss) << ',' << (r.fell_back ? 1 : 0) << '\n';
  }
  return os.str();
}

std::string GridReportCsv(std::span<const FpFormat> formats, double maxval) {
  std::ostringstream os;
  os << "format,maxval,kind,x,y\n";
  for (const auto& fmt : formats) {
    const ValueGrid grid = EnumerateGrid(fmt, maxval);
    const std::string head = fmt.name() + "," + FormatNumber(static_cast<float>(maxval));
    for (std::size_t i = 0; i < grid.size(); ++i) {
      os << head << ",value," << i << ',' << FormatNumber(grid.values[i]) << '\n';
    }
    for (double r : kDensityRadii) {
      os << head << ",density," << FormatNumber(r) << ',' << GridDensityNearZero(grid, r * static_cast<float>(maxval))
         << '\n';
    }
  }
  return os.str();
}

std::string CalibrationReportJson(const CalibrationReport& report) {
  nlohmann::ordered_json j;
  j["target"] = report.target;
  j["variant"] = std::string(VariantName(report.variant));
  j["iters"] = report.iters;
  j["lr"] = report.lr;
  j["lambda"] = report.lambda;
  j["beta"] = {{"start", report.beta.start}, {"end", report.beta.end}, {"warmup", report.beta.warmup}};
  j["rtn_loss"] = report.rtn_loss;
  j["final_hard_loss"] = report.final_hard_loss;
  j["fell_back"] = report.fell_back;
  j["diverged"] = report.diverged;
  j["diagnostic"] = report.diagnostic;
  j["loss_history"] = report.loss_history;
  return j.dump(2);
}

}  // namespace fpq
