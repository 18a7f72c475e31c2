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

#include "fpq/toy_dit.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "fpq/errors.h"
#include "fpq/rng.h"
#include "fpq/tensor_io.h"

namespace fpq {

namespace {

constexpr std::array<std::string_view, kNumRoles> kRoleNames = {
    "self_q", "self_k", "self_v", "self_out", "cross_q", "cross_k", "cross_v", "cross_out", "ff1", "ff2",
};

template <typename T>
using BT = BasicTensor<T>;

template <typename T>
std::span<const T> ModRowSpan(const BT<T>& mod, std::size_t row) {
  return mod.row(row);
}

// Normalized rows (pre-affine) plus the AdaLN-modulated output.
template <typename T>
BT<T> Modulate(const BT<T>& x, const BT<T>& mod, std::size_t shift_row, std::size_t scale_row, BT<T>* norm_out) {
  const std::size_t cols = x.cols();
  BT<T> norm(x.shape());
  BT<T> out(x.shape());
  const auto shift = ModRowSpan(mod, shift_row);
  const auto scale = ModRowSpan(mod, scale_row);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    double mean = 0.0;
    for (T v : in) mean += v;
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    for (std::size_t c = 0; c < cols; ++c) {
      const double n = (in[c] - mean) * inv;
      norm(r, c) = static_cast<T>(n);
      out(r, c) = static_cast<T>(n * (1.0 + scale[c]) + shift[c]);
    }
  }
  if (norm_out) *norm_out = std::move(norm);
  return out;
}

// Multi-head scaled dot-product attention; `probs` receives one [nq x nk]
// matrix per head when set.
template <typename T>
BT<T> Attention(const BT<T>& q, const BT<T>& k, const BT<T>& v, std::size_t heads, std::vector<BT<T>>* probs) {
  const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols();
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  BT<T> out({nq, d});
  if (probs) probs->clear();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    BT<T> scores({nq, nk});
    for (std::size_t i = 0; i < nq; ++i) {
      for (std::size_t j = 0; j < nk; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += static_cast<double>(q(i, off + c)) * k(j, off + c);
        scores(i, j) = static_cast<T>(acc * inv_sqrt);
      }
    }
    const BT<T> p = SoftmaxRows(scores);
    for (std::size_t i = 0; i < nq; ++i) {
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < nk; ++j) acc += static_cast<double>(p(i, j)) * v(j, off + c);
        out(i, off + c) = static_cast<T>(acc);
      }
    }
    if (probs) probs->push_back(p);
  }
  return out;
}

template <typename T>
BT<T> GatedResidual(const BT<T>& x, const BT<T>& branch, const BT<T>* mod, std::size_t gate_row) {
  BT<T> out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double g = mod ? (*mod)(gate_row, c) : 1.0;
      out(r, c) = static_cast<T>(x(r, c) + g * branch(r, c));
    }
  }
  return out;
}

template <typename T>
struct BlockCache {
  BT<T> x, n1, h1, q, k, v, o, x1, n2, h2, cq, ck, cv, co, x2, n3, h3, u, g;
  std::vector<BT<T>> p_self, p_cross;
};

// Shared by the float and double paths. Observers and activation
// quantization only apply to float.
template <typename T>
BT<T> BlockForwardImpl(const std::array<BT<T>, kNumRoles>& w, const ToyDiTConfig& config, const BT<T>& mod,
                       const BT<T>& x, const BT<T>& cond, const ForwardOptions* opts, std::size_t block_index,
                       BlockCache<T>* cache) {
  const std::size_t d = config.embed_dim;
  if (x.rank() != 2 || x.cols() != d) {
    throw DimensionError("latents must be [tokens x " + std::to_string(d) + "], got " + ShapeToString(x.shape()));
  }
  if (cond.rank() != 2 || cond.cols() != d) {
    throw DimensionError("cond must be [cond_tokens x " + std::to_string(d) + "], got " +
                         ShapeToString(cond.shape()));
  }
  if (mod.rank() != 2 || mod.rows() != kNumModRows || mod.cols() != d) {
    throw DimensionError("modulation must be [8 x " + std::to_string(d) + "]");
  }
  auto linear = [&](const BT<T>& in, LayerRole role) {
    if constexpr (std::is_same_v<T, float>) {
      if (opts && opts->observer) (*opts->observer)(block_index, role, in);
      if (opts && opts->act_fmt) {
        return MatmulTransposed(TokenQuantize(in, TokenQuantConfig{*opts->act_fmt}).values, w[RoleIndex(role)]);
      }
    }
    return MatmulTransposed(in, w[RoleIndex(role)]);
  };
  BlockCache<T> local;
  BlockCache<T>& c = cache ? *cache : local;
  const bool keep = cache != nullptr;

  c.h1 = Modulate(x, mod, kShiftSelf, kScaleSelf, keep ? &c.n1 : nullptr);
  c.q = linear(c.h1, LayerRole::kSelfQ);
  c.k = linear(c.h1, LayerRole::kSelfK);
  c.v = linear(c.h1, LayerRole::kSelfV);
  c.o = Attention(c.q, c.k, c.v, config.num_heads, keep ? &c.p_self : nullptr);
  c.x1 = GatedResidual(x, linear(c.o, LayerRole::kSelfOut), &mod, kGateSelf);

  c.h2 = Modulate(c.x1, mod, kShiftCross, kScaleCross, keep ? &c.n2 : nullptr);
  c.cq = linear(c.h2, LayerRole::kCrossQ);
  c.ck = linear(cond, LayerRole::kCrossK);
  c.cv = linear(cond, LayerRole::kCrossV);
  c.co = Attention(c.cq, c.ck, c.cv, config.num_heads, keep ? &c.p_cross : nullptr);
  c.x2 = GatedResidual<T>(c.x1, linear(c.co, LayerRole::kCrossOut), nullptr, 0);

  c.h3 = Modulate(c.x2, mod, kShiftFf, kScaleFf, keep ? &c.n3 : nullptr);
  c.u = linear(c.h3, LayerRole::kFf1);
  c.g = Gelu(c.u);
  BT<T> out = GatedResidual(c.x2, linear(c.g, LayerRole::kFf2), &mod, kGateFf);
  if (keep) c.x = x;
  return out;
}

// dLoss/dx through Modulate given dLoss/dh.
TensorD ModulateBackward(const TensorD& dh, const TensorD& x, const TensorD& norm, const TensorD& mod,
                         std::size_t scale_row) {
  const std::size_t cols = x.cols();
  TensorD dx(x.shape());
  std::vector<double> dn(cols);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    double mean_dn = 0.0, mean_dn_n = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      dn[c] = dh(r, c) * (1.0 + mod(scale_row, c));
      mean_dn += dn[c];
      mean_dn_n += dn[c] * norm(r, c);
    }
    mean_dn /= static_cast<double>(cols);
    mean_dn_n /= static_cast<double>(cols);
    for (std::size_t c = 0; c < cols; ++c) dx(r, c) = inv * (dn[c] - mean_dn - norm(r, c) * mean_dn_n);
  }
  return dx;
}

struct AttentionGrads {
  TensorD dq, dk, dv;
};

AttentionGrads AttentionBackward(const TensorD& d_out, const TensorD& q, const TensorD& k, const TensorD& v,
                                 const std::vector<TensorD>& probs, std::size_t heads) {
  const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols();
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionGrads g{TensorD(q.shape()), TensorD(k.shape()), TensorD(v.shape())};
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    const TensorD& p = probs[h];
    TensorD dp({nq, nk});
    for (std::size_t i = 0; i < nq; ++i) {
      for (std::size_t j = 0; j < nk; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += d_out(i, off + c) * v(j, off + c);
        dp(i, j) = acc;
      }
    }
    for (std::size_t j = 0; j < nk; ++j) {
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < nq; ++i) acc += p(i, j) * d_out(i, off + c);
        g.dv(j, off + c) += acc;
      }
    }
    // Softmax backward, then the 1/sqrt(dh) score scaling.
    TensorD ds({nq, nk});
    for (std::size_t i = 0; i < nq; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < nk; ++j) dot += dp(i, j) * p(i, j);
      for (std::size_t j = 0; j < nk; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
    }
    for (std::size_t i = 0; i < nq; ++i) {
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < nk; ++j) acc += ds(i, j) * k(j, off + c);
        g.dq(i, off + c) += acc;
      }
    }
    for (std::size_t j = 0; j < nk; ++j) {
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < nq; ++i) acc += ds(i, j) * q(i, off + c);
        g.dk(j, off + c) += acc;
      }
    }
  }
  return g;
}

// dW += dy^T x; returns dy W.
TensorD LinearBackward(const TensorD& dy, const TensorD& x, const TensorD& w, TensorD& dw) {
  const TensorD contrib = Matmul(Transpose(dy), x);
  dw = dw.empty() ? contrib : Add(dw, contrib);
  return Matmul(dy, w);
}

TensorD GateRows(const TensorD& a, const TensorD& mod, std::size_t row) {
  return MultiplyRows(a, mod.row(row));
}

std::array<TensorD, kNumRoles> ToDouble(const std::array<Tensor, kNumRoles>& w) {
  std::array<TensorD, kNumRoles> out;
  for (std::size_t i = 0; i < kNumRoles; ++i) out[i] = w[i].Cast<double>();
  return out;
}

Shape RoleShape(const ToyDiTConfig& c, LayerRole role) {
  const std::size_t d = c.embed_dim;
  if (role == LayerRole::kFf1) return {c.ff_dim(), d};
  if (role == LayerRole::kFf2) return {d, c.ff_dim()};
  return {d, d};
}

}  // namespace

std::string_view RoleName(LayerRole role) { return kRoleNames.at(RoleIndex(role)); }

LayerRole ParseRole(std::string_view name) {
  for (std::size_t i = 0; i < kNumRoles; ++i) {
    if (kRoleNames[i] == name) return kAllRoles[i];
  }
  throw ConfigError("unknown layer role '" + std::string(name) + "'");
}

void ToyDiTConfig::Validate() const {
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim must be a positive multiple of num_heads");
  }
  if (token_count == 0 || num_blocks == 0 || ff_expansion == 0 || cond_tokens == 0) {
    throw ConfigError("token_count, num_blocks, ff_expansion and cond_tokens must be >= 1");
  }
  if (time_freq_dim < 2 || time_freq_dim % 2 != 0) throw ConfigError("time_freq_dim must be even and >= 2");
  if (!(outlier_prob >= 0 && outlier_prob <= 1)) throw ConfigError("outlier_prob must lie in [0, 1]");
  if (!(outlier_scale > 0)) throw ConfigError("outlier_scale must be positive");
}

Tensor HeavyTailedTensor(Shape shape, double stddev, double outlier_prob, double outlier_scale,
                         std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) {
    double x = rng.Normal(0.0, stddev);
    if (rng.Bernoulli(outlier_prob)) x *= outlier_scale;
    v = static_cast<float>(x);
  }
  return t;
}

ToyDiT ToyDiT::Create(const ToyDiTConfig& config, std::uint64_t seed) {
  config.Validate();
  Rng rng(seed);
  ToyDiT m;
  m.config = config;
  const std::size_t d = config.embed_dim;
  const std::size_t f = config.time_freq_dim;
  m.adaln.w1 = rng.NormalTensor({d, f}, 0.0, 1.0 / std::sqrt(static_cast<double>(f)));
  m.adaln.b1 = rng.NormalTensor({d}, 0.0, 0.02);
  m.adaln.w2 = rng.NormalTensor({kNumModRows * d, d}, 0.0, 0.05 / std::sqrt(static_cast<double>(d)));
  m.adaln.b2 = Tensor({kNumModRows * d});
  const double outlier_prob = config.init == WeightInit::kHeavyTailed ? config.outlier_prob : 0.0;
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    ToyDiTBlock block;
    for (LayerRole role : kAllRoles) {
      const Shape shape = RoleShape(config, role);
      const double stddev = 1.0 / std::sqrt(static_cast<double>(shape[1]));
      block.weight(role) = HeavyTailedTensor(shape, stddev, outlier_prob, config.outlier_scale, rng.Fork());
    }
    block.mod_table = rng.NormalTensor({kNumModRows, d}, 0.0, 0.1);
    for (std::size_t c = 0; c < d; ++c) {
      block.mod_table(kGateSelf, c) += 1.0f;
      block.mod_table(kGateFf, c) += 1.0f;
    }
    m.blocks.push_back(std::move(block));
  }
  return m;
}

Tensor TimestepEmbedding(int timestep, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw ParameterError("timestep embedding dim must be even");
  const std::size_t half = dim / 2;
  Tensor e({dim});
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    e[i] = static_cast<float>(std::cos(timestep * freq));
    e[half + i] = static_cast<float>(std::sin(timestep * freq));
  }
  return e;
}

Tensor SharedModulation(const ToyDiT& model, int timestep) {
  const std::size_t d = model.config.embed_dim;
  const Tensor emb = TimestepEmbedding(timestep, model.config.time_freq_dim).Reshaped({1, model.config.time_freq_dim});
  Tensor hidden = MatmulTransposed(emb, model.adaln.w1);
  for (std::size_t i = 0; i < d; ++i) {
    const double z = hidden[i] + model.adaln.b1[i];
    hidden[i] = static_cast<float>(z / (1.0 + std::exp(-z)));
  }
  Tensor out = MatmulTransposed(hidden, model.adaln.w2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += model.adaln.b2[i];
  return out.Reshaped({kNumModRows, d});
}

Tensor BlockModulation(const ToyDiT& model, std::size_t block, int timestep) {
  return Add(SharedModulation(model, timestep), model.blocks.at(block).mod_table);
}

Tensor BlockForward(const ToyDiTBlock& block, const ToyDiTConfig& config, const Tensor& modulation,
                    const Tensor& latents, const Tensor& cond, const ForwardOptions& options,
                    std::size_t block_index) {
  return BlockForwardImpl<float>(block.weights, config, modulation, latents, cond, &options, block_index, nullptr);
}

Tensor Forward(const ToyDiT& model, std::size_t block, const Tensor& latents, int timestep, const Tensor& cond,
               const ForwardOptions& options) {
  return BlockForward(model.blocks.at(block), model.config, BlockModulation(model, block, timestep), latents,
                      cond, options, block);
}

Tensor ModelForward(const ToyDiT& model, const Tensor& latents, int timestep, const Tensor& cond,
                    const ForwardOptions& options) {
  Tensor x = latents;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) x = Forward(model, b, x, timestep, cond, options);
  return x;
}

TensorD BlockForwardD(const std::array<TensorD, kNumRoles>& weights, const ToyDiTConfig& config,
                      const TensorD& modulation, const TensorD& latents, const TensorD& cond) {
  return BlockForwardImpl<double>(weights, config, modulation, latents, cond, nullptr, 0, nullptr);
}

TensorD BlockBackwardD(const std::array<TensorD, kNumRoles>& w, const ToyDiTConfig& config, const TensorD& mod,
                       const TensorD& latents, const TensorD& cond,
                       const std::function<TensorD(const TensorD&)>& loss_grad,
                       std::array<TensorD, kNumRoles>& grads) {
  BlockCache<double> c;
  TensorD out = BlockForwardImpl<double>(w, config, mod, latents, cond, nullptr, 0, &c);
  const TensorD d_out = loss_grad(out);
  if (d_out.shape() != out.shape()) throw DimensionError("loss gradient shape does not match block output");
  auto& g = grads;
  auto wi = [&](LayerRole r) -> const TensorD& { return w[RoleIndex(r)]; };
  auto gi = [&](LayerRole r) -> TensorD& { return g[RoleIndex(r)]; };
  for (auto& t : g) t = TensorD();

  // Feed-forward branch.
  TensorD dx2 = d_out;
  const TensorD df = GateRows(d_out, mod, kGateFf);
  TensorD dgl = LinearBackward(df, c.g, wi(LayerRole::kFf2), gi(LayerRole::kFf2));
  for (std::size_t i = 0; i < dgl.size(); ++i) dgl[i] *= GeluDerivative(c.u[i]);
  const TensorD dh3 = LinearBackward(dgl, c.h3, wi(LayerRole::kFf1), gi(LayerRole::kFf1));
  dx2 = Add(dx2, ModulateBackward(dh3, c.x2, c.n3, mod, kScaleFf));

  // Cross-attention branch (plain residual).
  TensorD dx1 = dx2;
  const TensorD dco = LinearBackward(dx2, c.co, wi(LayerRole::kCrossOut), gi(LayerRole::kCrossOut));
  const AttentionGrads ca = AttentionBackward(dco, c.cq, c.ck, c.cv, c.p_cross, config.num_heads);
  const TensorD dh2 = LinearBackward(ca.dq, c.h2, wi(LayerRole::kCrossQ), gi(LayerRole::kCrossQ));
  LinearBackward(ca.dk, cond, wi(LayerRole::kCrossK), gi(LayerRole::kCrossK));
  LinearBackward(ca.dv, cond, wi(LayerRole::kCrossV), gi(LayerRole::kCrossV));
  dx1 = Add(dx1, ModulateBackward(dh2, c.x1, c.n2, mod, kScaleCross));

  // Self-attention branch; gradients stop at the block input.
  const TensorD da = GateRows(dx1, mod, kGateSelf);
  const TensorD dso = LinearBackward(da, c.o, wi(LayerRole::kSelfOut), gi(LayerRole::kSelfOut));
  const AttentionGrads sa = AttentionBackward(dso, c.q, c.k, c.v, c.p_self, config.num_heads);
  LinearBackward(sa.dq, c.h1, wi(LayerRole::kSelfQ), gi(LayerRole::kSelfQ));
  LinearBackward(sa.dk, c.h1, wi(LayerRole::kSelfK), gi(LayerRole::kSelfK));
  LinearBackward(sa.dv, c.h1, wi(LayerRole::kSelfV), gi(LayerRole::kSelfV));
  return out;
}

void TrajectoryConfig::Validate() const {
  if (steps < 1) throw ConfigError("trajectory needs at least one step");
  if (train_timesteps < 1) throw ConfigError("train_timesteps must be >= 1");
  if (!(token_scale_sigma >= 0)) throw ConfigError("token_scale_sigma must be >= 0");
}

double AlphaBar(int timestep, int train_timesteps) {
  constexpr double s = 0.008;
  auto f = [&](double t) {
    const double a = (t / train_timesteps + s) / (1.0 + s) * std::numbers::pi / 2.0;
    return std::cos(a) * std::cos(a);
  };
  return std::clamp(f(timestep) / f(0.0), 0.0, 1.0);
}

Trajectory MakeTrajectory(const ToyDiTConfig& config, const TrajectoryConfig& traj, std::uint64_t seed) {
  config.Validate();
  traj.Validate();
  Rng rng(seed);
  const std::size_t n = config.token_count, d = config.embed_dim;
  Tensor clean({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    const double scale = std::exp(traj.token_scale_sigma * rng.Normal());
    for (std::size_t c = 0; c < d; ++c) clean(r, c) = static_cast<float>(scale * rng.Normal());
  }
  Trajectory out;
  out.cond = rng.NormalTensor({config.cond_tokens, d});
  const double last = static_cast<double>(std::max<std::size_t>(traj.steps - 1, 1));
  for (std::size_t i = 0; i < traj.steps; ++i) {
    const int t = static_cast<int>(std::lround((traj.train_timesteps - 1) * (traj.steps - 1 - i) / last));
    const double ab = AlphaBar(t, traj.train_timesteps);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor x({n, d});
    for (std::size_t k = 0; k < x.size(); ++k) x[k] = static_cast<float>(a * clean[k] + b * rng.Normal());
    out.timesteps.push_back(t);
    out.latents.push_back(std::move(x));
  }
  return out;
}

bool CaptureFilter::Wants(const LayerKey& key) const {
  return capture_layers && (layers.empty() || std::find(layers.begin(), layers.end(), key) != layers.end());
}

CalibrationSet BuildCalibrationSet(const ToyDiT& model, std::size_t n_samples, const TrajectoryConfig& traj,
                                   std::uint64_t seed, const CaptureFilter& filter) {
  if (n_samples < 1) throw ConfigError("n_samples must be >= 1");
  CalibrationSet set;
  set.blocks.resize(filter.capture_blocks ? model.blocks.size() : 0);
  const LayerObserver observer = [&](std::size_t block, LayerRole role, const Tensor& input) {
    const LayerKey key{block, role};
    if (filter.Wants(key)) set.layers[key].samples.push_back(input);
  };
  ForwardOptions opts;
  opts.observer = &observer;
  Rng rng(seed);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const Trajectory t = MakeTrajectory(model.config, traj, rng.Fork());
    for (std::size_t i = 0; i < t.timesteps.size(); ++i) {
      Tensor x = t.latents[i];
      for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        const Tensor mod = BlockModulation(model, b, t.timesteps[i]);
        if (filter.capture_blocks) set.blocks[b].push_back({x, mod, t.cond});
        x = BlockForward(model.blocks[b], model.config, mod, x, t.cond, opts, b);
      }
    }
  }
  return set;
}

FormatAssignment FormatAssignment::Default() {
  FormatAssignment a;
  a.overrides.emplace(LayerRole::kFf1, FpFormat(3, 0));
  return a;
}

FormatAssignment FormatAssignment::Unified(const FpFormat& fmt) {
  FormatAssignment a;
  a.unified = fmt;
  return a;
}

FpFormat FormatAssignment::For(LayerRole role) const {
  const auto it = overrides.find(role);
  return it == overrides.end() ? unified : it->second;
}

BlockObjective::BlockObjective(const ToyDiTBlock& block, const ToyDiTConfig& config,
                               std::vector<BlockCalibrationSample> samples)
    : config_(config), samples_(std::move(samples)) {
  if (samples_.empty()) throw ParameterError("block objective needs at least one sample");
  const auto w = ToDouble(block.weights);
  for (const auto& s : samples_) {
    mods_.push_back(s.modulation.Cast<double>());
    latents_.push_back(s.latents.Cast<double>());
    conds_.push_back(s.cond.Cast<double>());
    targets_.push_back(BlockForwardD(w, config_, mods_.back(), latents_.back(), conds_.back()));
    rows_ += s.latents.rows();
  }
}

double BlockObjective::Evaluate(std::span<const TensorD> weights, std::vector<TensorD>* grads) const {
  if (weights.size() != kNumRoles) throw DimensionError("block objective takes one weight per role");
  std::array<TensorD, kNumRoles> w;
  std::copy(weights.begin(), weights.end(), w.begin());
  const double inv_rows = 1.0 / static_cast<double>(rows_);
  double total = 0.0;
  if (grads) grads->assign(kNumRoles, TensorD());
  std::array<TensorD, kNumRoles> g;
  for (std::size_t s = 0; s < samples_.size(); ++s) {
    const TensorD& target = targets_[s];
    if (!grads) {
      const TensorD out = BlockForwardD(w, config_, mods_[s], latents_[s], conds_[s]);
      for (std::size_t i = 0; i < out.size(); ++i) total += (out[i] - target[i]) * (out[i] - target[i]) * inv_rows;
      continue;
    }
    const auto loss_grad = [&](const TensorD& out) {
      TensorD d(out.shape());
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double e = out[i] - target[i];
        total += e * e * inv_rows;
        d[i] = 2.0 * e * inv_rows;
      }
      return d;
    };
    BlockBackwardD(w, config_, mods_[s], latents_[s], conds_[s], loss_grad, g);
    for (std::size_t r = 0; r < kNumRoles; ++r) {
      (*grads)[r] = (*grads)[r].empty() ? g[r] : Add((*grads)[r], g[r]);
    }
  }
  return total;
}

QuantizedModel QuantizeModel(const ToyDiT& model, const QuantizeModelConfig& config, const CalibrationSet* calib) {
  QuantizedModel q;
  q.model = model;
  q.act_fmt = config.act_fmt;
  if (config.calibrate) {
    config.adaround.Validate();
    if (!calib) throw ConfigError("calibration requested without a calibration set");
  }
  auto rtn_of = [&](const Tensor& w, const FpFormat& fmt) {
    return config.group_size == 0 ? FpMinMaxQuantize(w, fmt) : GroupQuantize(w, fmt, config.group_size);
  };
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const ToyDiTBlock& block = model.blocks[b];
    std::vector<MinMaxResult> rtn;
    for (LayerRole role : kAllRoles) rtn.push_back(rtn_of(block.weight(role), config.assignment.For(role)));

    if (config.calibrate && config.mode == CalibMode::kBlock) {
      if (b >= calib->blocks.size() || calib->blocks[b].empty()) {
        throw ConfigError("no block calibration data for block " + std::to_string(b));
      }
      const BlockObjective objective(block, model.config, calib->blocks[b]);
      std::vector<RoundingMask> warm, nearest;
      for (LayerRole role : kAllRoles) {
        warm.push_back(RoundingMask::WarmStart(block.weight(role), rtn[RoleIndex(role)], config.adaround.variant));
        nearest.push_back(RoundingMask::Nearest(block.weight(role), rtn[RoleIndex(role)], config.adaround.variant));
      }
      CalibrationResult res = Calibrate(objective, std::move(warm), std::move(nearest), config.adaround);
      res.report.target = "block" + std::to_string(b);
      for (LayerRole role : kAllRoles) {
        rtn[RoleIndex(role)] = ApplyMask(res.masks[RoleIndex(role)], rtn[RoleIndex(role)]);
      }
      q.block_reports.push_back(std::move(res.report));
    }

    std::vector<LayerQuantization> block_layers;
    for (LayerRole role : kAllRoles) {
      LayerQuantization lq{{b, role}, config.assignment.For(role), rtn[RoleIndex(role)], std::nullopt};
      if (config.calibrate && config.mode == CalibMode::kLayer) {
        const auto it = calib->layers.find(lq.key);
        if (it == calib->layers.end() || it->second.samples.empty()) {
          throw ConfigError("no calibration data for block " + std::to_string(b) + " layer " +
                            std::string(RoleName(role)));
        }
        CalibrationResult res = CalibrateLayer(block.weight(role), lq.result, it->second.Stacked(), config.adaround);
        res.report.target = "block" + std::to_string(b) + "." + std::string(RoleName(role));
        lq.result = ApplyMask(res.masks[0], lq.result);
        lq.report = std::move(res.report);
      }
      block_layers.push_back(std::move(lq));
    }

    // Layer-wise rounding only optimizes each layer in isolation; keep the
    // block at round-to-nearest if the block output got worse.
    if (config.calibrate && config.mode == CalibMode::kLayer && b < calib->blocks.size() &&
        !calib->blocks[b].empty()) {
      const BlockObjective objective(block, model.config, calib->blocks[b]);
      std::vector<TensorD> w_rtn, w_cal;
      for (std::size_t i = 0; i < kNumRoles; ++i) {
        w_rtn.push_back(rtn[i].values.Cast<double>());
        w_cal.push_back(block_layers[i].result.values.Cast<double>());
      }
      BlockSafeguard check{b, objective.Evaluate(w_rtn, nullptr), objective.Evaluate(w_cal, nullptr), false};
      if (!(check.calibrated_loss <= check.rtn_loss)) {
        check.reverted = true;
        for (std::size_t i = 0; i < kNumRoles; ++i) {
          block_layers[i].result = rtn[i];
          block_layers[i].report->fell_back = true;
          block_layers[i].report->final_hard_loss = block_layers[i].report->rtn_loss;
          block_layers[i].report->diagnostic = "block output worse than round-to-nearest";
        }
      }
      q.block_checks.push_back(check);
    }

    for (auto& lq : block_layers) {
      q.model.blocks[b].weight(lq.key.role) = lq.result.values;
      q.layers.push_back(std::move(lq));
    }
  }
  return q;
}

ForwardOptions QuantizedForwardOptions(const QuantizedModel& q) {
  ForwardOptions opts;
  opts.act_fmt = q.act_fmt;
  return opts;
}

std::vector<double> BlockOutputMse(const ToyDiT& reference, const QuantizedModel& quantized,
                                   const CalibrationSet& eval) {
  if (eval.blocks.size() != reference.blocks.size()) throw ParameterError("evaluation set lacks block captures");
  const ForwardOptions qopts = QuantizedForwardOptions(quantized);
  std::vector<double> out;
  for (std::size_t b = 0; b < reference.blocks.size(); ++b) {
    const auto& samples = eval.blocks[b];
    if (samples.empty()) throw ParameterError("evaluation set has no samples for a block");
    double total = 0.0;
    for (const auto& s : samples) {
      const Tensor ref = BlockForward(reference.blocks[b], reference.config, s.modulation, s.latents, s.cond, {}, b);
      const Tensor got =
          BlockForward(quantized.model.blocks[b], quantized.model.config, s.modulation, s.latents, s.cond, qopts, b);
      total += MeanSquaredError(ref, got);
    }
    out.push_back(total / static_cast<double>(samples.size()));
  }
  return out;
}

SyntheticLayer MakeSyntheticLayer(const SyntheticLayerConfig& config, std::uint64_t seed) {
  if (config.out_features == 0 || config.in_features == 0 || config.rows == 0) {
    throw ConfigError("synthetic layer dimensions must be >= 1");
  }
  if (!(std::abs(config.input_correlation) < 1.0)) throw ConfigError("input correlation must lie in (-1, 1)");
  Rng rng(seed);
  SyntheticLayer layer;
  layer.weight = HeavyTailedTensor({config.out_features, config.in_features}, config.weight_std,
                                   config.outlier_prob, config.outlier_scale, rng.Fork());
  // AR(1) recursion; equivalent to multiplying by the Cholesky factor of rho^|i-j|.
  const double rho = config.input_correlation;
  const double innov = std::sqrt(1.0 - rho * rho);
  layer.inputs = Tensor({config.rows, config.in_features});
  for (std::size_t r = 0; r < config.rows; ++r) {
    double prev = rng.Normal();
    layer.inputs(r, 0) = static_cast<float>(prev);
    for (std::size_t c = 1; c < config.in_features; ++c) {
      prev = rho * prev + innov * rng.Normal();
      layer.inputs(r, c) = static_cast<float>(prev);
    }
  }
  return layer;
}

namespace {

constexpr int kManifestVersion = 1;

std::string WeightFile(std::size_t block, LayerRole role) {
  return "block" + std::to_string(block) + "_" + std::string(RoleName(role)) + ".fpqt";
}

nlohmann::json ShapeJson(const Shape& s) { return nlohmann::json(s); }

void ExpectShape(const Tensor& t, const Shape& want, const std::string& what) {
  if (t.shape() != want) {
    throw FormatError(what + " has shape " + ShapeToString(t.shape()) + ", expected " + ShapeToString(want));
  }
}

}  // namespace

void SaveModel(const std::filesystem::path& dir, const ToyDiT& model) {
  std::filesystem::create_directories(dir);
  const auto& c = model.config;
  nlohmann::ordered_json manifest;
  manifest["kind"] = "fpq-toy-dit";
  manifest["version"] = kManifestVersion;
  manifest["config"] = {
      {"embed_dim", c.embed_dim},       {"num_heads", c.num_heads},         {"token_count", c.token_count},
      {"num_blocks", c.num_blocks},     {"ff_expansion", c.ff_expansion},   {"cond_tokens", c.cond_tokens},
      {"time_freq_dim", c.time_freq_dim},
  };
  const std::pair<const char*, const Tensor*> adaln[] = {
      {"adaln_w1", &model.adaln.w1}, {"adaln_b1", &model.adaln.b1},
      {"adaln_w2", &model.adaln.w2}, {"adaln_b2", &model.adaln.b2}};
  for (const auto& [name, t] : adaln) {
    SaveTensor(dir / (std::string(name) + ".fpqt"), *t);
    manifest["adaln"][name] = std::string(name) + ".fpqt";
  }
  manifest["blocks"] = nlohmann::ordered_json::array();
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    nlohmann::ordered_json jb;
    const std::string table = "block" + std::to_string(b) + "_mod_table.fpqt";
    SaveTensor(dir / table, model.blocks[b].mod_table);
    jb["mod_table"] = table;
    for (LayerRole role : kAllRoles) {
      const std::string file = WeightFile(b, role);
      SaveTensor(dir / file, model.blocks[b].weight(role));
      jb["layers"][std::string(RoleName(role))] = {{"file", file},
                                                   {"shape", ShapeJson(model.blocks[b].weight(role).shape())}};
    }
    manifest["blocks"].push_back(std::move(jb));
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

ToyDiT LoadModel(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
    if (manifest.at("kind") != "fpq-toy-dit") throw FormatError("manifest is not a toy DiT checkpoint");
    if (manifest.at("version") != kManifestVersion) throw FormatError("unsupported manifest version");
    ToyDiT m;
    const auto& jc = manifest.at("config");
    auto& c = m.config;
    c.embed_dim = jc.at("embed_dim");
    c.num_heads = jc.at("num_heads");
    c.token_count = jc.at("token_count");
    c.num_blocks = jc.at("num_blocks");
    c.ff_expansion = jc.at("ff_expansion");
    c.cond_tokens = jc.at("cond_tokens");
    c.time_freq_dim = jc.at("time_freq_dim");
    try {
      c.Validate();
    } catch (const ConfigError& e) {
      throw FormatError(std::string("manifest config invalid: ") + e.what());
    }
    const std::size_t d = c.embed_dim;
    const auto& ja = manifest.at("adaln");
    m.adaln.w1 = LoadTensor(dir / ja.at("adaln_w1").get<std::string>());
    m.adaln.b1 = LoadTensor(dir / ja.at("adaln_b1").get<std::string>());
    m.adaln.w2 = LoadTensor(dir / ja.at("adaln_w2").get<std::string>());
    m.adaln.b2 = LoadTensor(dir / ja.at("adaln_b2").get<std::string>());
    ExpectShape(m.adaln.w1, {d, c.time_freq_dim}, "adaln_w1");
    ExpectShape(m.adaln.b1, {d}, "adaln_b1");
    ExpectShape(m.adaln.w2, {kNumModRows * d, d}, "adaln_w2");
    ExpectShape(m.adaln.b2, {kNumModRows * d}, "adaln_b2");
    const auto& jblocks = manifest.at("blocks");
    if (jblocks.size() != c.num_blocks) throw FormatError("manifest block count mismatch");
    for (std::size_t b = 0; b < c.num_blocks; ++b) {
      const auto& jb = jblocks.at(b);
      ToyDiTBlock block;
      block.mod_table = LoadTensor(dir / jb.at("mod_table").get<std::string>());
      ExpectShape(block.mod_table, {kNumModRows, d}, "mod_table");
      for (LayerRole role : kAllRoles) {
        const auto& jl = jb.at("layers").at(std::string(RoleName(role)));
        block.weight(role) = LoadTensor(dir / jl.at("file").get<std::string>());
        ExpectShape(block.weight(role), RoleShape(c, role), std::string(RoleName(role)));
      }
      m.blocks.push_back(std::move(block));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad manifest: ") + e.what());
  }
}

}  // namespace fpq
