#pragma once

// Multiscale audio spectrogram transformer: patch embedding, pooled
// multihead attention with decomposed relative position bias, pre-norm
// blocks with pooled residuals, and linear classification heads.
//
// Tensors are token-major (N × d). Every forward function optionally fills a
// cache that the matching *_backward function consumes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mast/errors.hpp"
#include "mast/ops.hpp"
#include "mast/schedule.hpp"
#include "mast/tensor.hpp"

namespace mast {

constexpr double kLayerNormEps = 1e-6;

template <typename T>
struct TokenTensor {
  Tensor<T> tokens;  // N × d
  TokenGrid grid;

  std::size_t dim() const { return tokens.dim(1); }
  std::size_t count() const { return tokens.dim(0); }
};

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct ModelParams {
  std::map<std::string, Tensor<T>> tensors;

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("missing parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("missing parameter '" + name + "'");
    return it->second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }

  static ModelParams zeros_like(const ModelParams& other) {
    ModelParams out;
    for (const auto& [name, t] : other.tensors) out.tensors.emplace(name, Tensor<T>(t.shape()));
    return out;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    return out;
  }
};

enum class InitKind { TruncNormal, Zeros, Ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init;
};

inline std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

/// Rows needed by a relative-position table spanning query/key extents.
inline std::size_t rel_pos_rows(std::size_t q_extent, std::size_t k_extent) {
  return 2 * std::max(q_extent, k_extent) - 1;
}

/// Every parameter tensor the schedule allocates, in a fixed order.
inline std::vector<ParamSpec> parameter_specs(const StageSchedule& s) {
  s.validate();
  using K = InitKind;
  std::vector<ParamSpec> out;
  const std::size_t d0 = s.patch.dim;
  out.push_back({"patch.weight", {d0, 1, s.patch.kernel, s.patch.kernel}, K::TruncNormal});
  out.push_back({"patch.bias", {d0}, K::Zeros});
  out.push_back({"cls_token", {d0}, K::TruncNormal});
  const auto grids = s.grids();
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    const auto& b = s.blocks[i];
    const auto& g = grids[i + 1];  // pooled Q and K share this grid
    const std::string p = block_prefix(i);
    out.push_back({p + "norm1.weight", {b.dim_in}, K::Ones});
    out.push_back({p + "norm1.bias", {b.dim_in}, K::Zeros});
    for (const char* m : {"q", "k", "v"}) {
      out.push_back({p + "attn." + m + ".weight", {b.dim_in, b.dim_out}, K::TruncNormal});
      out.push_back({p + "attn." + m + ".bias", {b.dim_out}, K::Zeros});
    }
    out.push_back({p + "attn.proj.weight", {b.dim_out, b.dim_out}, K::TruncNormal});
    out.push_back({p + "attn.proj.bias", {b.dim_out}, K::Zeros});
    out.push_back({p + "attn.rel_pos_t", {rel_pos_rows(g.time, g.time), b.head_dim()},
                   K::TruncNormal});
    out.push_back({p + "attn.rel_pos_f", {rel_pos_rows(g.freq, g.freq), b.head_dim()},
                   K::TruncNormal});
    if (b.kind == BlockKind::MMSA) {
      out.push_back({p + "residual.weight", {b.dim_in, b.dim_out}, K::TruncNormal});
      out.push_back({p + "residual.bias", {b.dim_out}, K::Zeros});
    }
    out.push_back({p + "norm2.weight", {b.dim_out}, K::Ones});
    out.push_back({p + "norm2.bias", {b.dim_out}, K::Zeros});
    out.push_back({p + "mlp.fc1.weight", {b.dim_out, b.mlp_hidden()}, K::TruncNormal});
    out.push_back({p + "mlp.fc1.bias", {b.mlp_hidden()}, K::Zeros});
    out.push_back({p + "mlp.fc2.weight", {b.mlp_hidden(), b.dim_out}, K::TruncNormal});
    out.push_back({p + "mlp.fc2.bias", {b.dim_out}, K::Zeros});
  }
  const std::size_t d = s.final_dim();
  out.push_back({"norm.weight", {d}, K::Ones});
  out.push_back({"norm.bias", {d}, K::Zeros});
  for (std::size_t h = 0; h < s.head_sizes.size(); ++h) {
    const std::string p = "heads." + std::to_string(h) + ".";
    out.push_back({p + "weight", {d, s.head_sizes[h]}, K::TruncNormal});
    out.push_back({p + "bias", {s.head_sizes[h]}, K::Zeros});
  }
  return out;
}

/// Truncated normal (|z| <= 2 std) for weights, tables and the class token;
/// zeros for biases; ones for norm gains.
template <typename T>
ModelParams<T> init_params(const StageSchedule& s, std::uint64_t seed, double std = 0.02) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std);
  ModelParams<T> p;
  for (const auto& spec : parameter_specs(s)) {
    Tensor<T> t(spec.shape);
    if (spec.init == InitKind::Ones) {
      for (auto& v : t.values()) v = T{1};
    } else if (spec.init == InitKind::TruncNormal) {
      for (auto& v : t.values()) {
        double z;
        do {
          z = normal(rng);
        } while (std::abs(z) > 2 * std);
        v = static_cast<T>(z);
      }
    }
    p.tensors.emplace(spec.name, std::move(t));
  }
  return p;
}

/// Throws CheckpointError listing missing, extra, or mis-shaped tensors.
template <typename T>
void check_params_match(const ModelParams<T>& p, const StageSchedule& s) {
  const auto specs = parameter_specs(s);
  std::vector<std::string> missing, extra, wrong;
  std::map<std::string, Shape> expected;
  for (const auto& sp : specs) expected.emplace(sp.name, sp.shape);
  for (const auto& [name, shape] : expected) {
    auto it = p.tensors.find(name);
    if (it == p.tensors.end())
      missing.push_back(name);
    else if (it->second.shape() != shape)
      wrong.push_back(name + " " + shape_str(it->second.shape()) + " != " + shape_str(shape));
  }
  for (const auto& [name, _] : p.tensors)
    if (!expected.count(name)) extra.push_back(name);
  if (missing.empty() && extra.empty() && wrong.empty()) return;
  std::string msg = "parameters do not match schedule '" + s.name + "'";
  auto list = [&](const char* label, const std::vector<std::string>& v) {
    if (v.empty()) return;
    msg += std::string("; ") + label + " (" + std::to_string(v.size()) + "):";
    for (std::size_t i = 0; i < v.size() && i < 8; ++i) msg += " " + v[i];
    if (v.size() > 8) msg += " ...";
  };
  list("missing", missing);
  list("extra", extra);
  list("wrong shape", wrong);
  throw CheckpointError(msg);
}

// ---------------------------------------------------------------------------
// Patch embedding

inline Conv2dGeometry patch_geometry(const PatchSpec& p) {
  return {p.stride, p.stride, p.pad, p.pad};
}

/// Spectrogram (h × T) -> class token followed by frequency-major patch tokens.
template <typename T>
TokenTensor<T> patch_embed(const Tensor<T>& spec, const Tensor<T>& weight, const Tensor<T>& bias,
                           const Tensor<T>& cls_token, const PatchSpec& patch) {
  require_rank(spec, 2, "patch_embed input");
  const Tensor<T> x = spec.reshaped({1, spec.dim(0), spec.dim(1)});
  const Tensor<T> y = conv2d(x, weight, bias, patch_geometry(patch));
  const std::size_t d = y.dim(0), F = y.dim(1), Tt = y.dim(2);
  if (cls_token.size() != d) throw DimensionError("patch_embed: class token width mismatch");
  TokenTensor<T> out{Tensor<T>({F * Tt + 1, d}), TokenGrid{F, Tt, true}};
  for (std::size_t c = 0; c < d; ++c) out.tokens(0, c) = cls_token[c];
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t i = 0; i < F * Tt; ++i) out.tokens(1 + i, c) = y[c * F * Tt + i];
  return out;
}

// ---------------------------------------------------------------------------
// Token pooling

namespace detail {

struct PoolAxis {
  std::size_t in, out, stride, kernel, pad;

  PoolAxis(std::size_t extent, std::size_t s)
      : in(extent), out(pooled_extent(extent, s)), stride(s), kernel(s > 1 ? 3 : 1),
        pad(s > 1 ? 1 : 0) {}

  // Half-open input range covered by output position o (padding clipped).
  std::pair<std::size_t, std::size_t> window(std::size_t o) const {
    const std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(o * stride) - static_cast<std::ptrdiff_t>(pad);
    const std::ptrdiff_t hi = lo + static_cast<std::ptrdiff_t>(kernel);
    return {static_cast<std::size_t>(std::max<std::ptrdiff_t>(lo, 0)),
            static_cast<std::size_t>(std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(in)))};
  }
};

}  // namespace detail

/// Overlapping mean pooling (kernel 3, padding 1 on pooled axes; padded
/// positions are excluded from the mean). The class token passes through.
template <typename T>
TokenTensor<T> pool_tokens(const TokenTensor<T>& x, std::size_t stride_f, std::size_t stride_t) {
  if (x.count() != x.grid.count())
    throw DimensionError("pool_tokens: token count does not match grid");
  if (stride_f == 1 && stride_t == 1) return x;
  const detail::PoolAxis af(x.grid.freq, stride_f), at(x.grid.time, stride_t);
  const std::size_t d = x.dim(), off = x.grid.offset();
  TokenTensor<T> out{Tensor<T>({af.out * at.out + off, d}),
                     TokenGrid{af.out, at.out, x.grid.has_class_token}};
  if (off) std::copy_n(x.tokens.data(), d, out.tokens.data());
  for (std::size_t fo = 0; fo < af.out; ++fo) {
    const auto [f0, f1] = af.window(fo);
    for (std::size_t to = 0; to < at.out; ++to) {
      const auto [t0, t1] = at.window(to);
      T* dst = out.tokens.data() + (off + fo * at.out + to) * d;
      for (std::size_t f = f0; f < f1; ++f)
        for (std::size_t t = t0; t < t1; ++t) {
          const T* src = x.tokens.data() + (off + f * x.grid.time + t) * d;
          for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
        }
      const T inv = T{1} / static_cast<T>((f1 - f0) * (t1 - t0));
      for (std::size_t c = 0; c < d; ++c) dst[c] *= inv;
    }
  }
  return out;
}

/// Gradient of pool_tokens w.r.t. its input.
template <typename T>
Tensor<T> pool_tokens_backward(const Tensor<T>& dy, const TokenGrid& grid_in, std::size_t stride_f,
                               std::size_t stride_t) {
  if (stride_f == 1 && stride_t == 1) return dy;
  const detail::PoolAxis af(grid_in.freq, stride_f), at(grid_in.time, stride_t);
  const std::size_t d = dy.dim(1), off = grid_in.offset();
  Tensor<T> dx({grid_in.count(), d});
  if (off) std::copy_n(dy.data(), d, dx.data());
  for (std::size_t fo = 0; fo < af.out; ++fo) {
    const auto [f0, f1] = af.window(fo);
    for (std::size_t to = 0; to < at.out; ++to) {
      const auto [t0, t1] = at.window(to);
      const T inv = T{1} / static_cast<T>((f1 - f0) * (t1 - t0));
      const T* src = dy.data() + (off + fo * at.out + to) * d;
      for (std::size_t f = f0; f < f1; ++f)
        for (std::size_t t = t0; t < t1; ++t) {
          T* dst = dx.data() + (off + f * grid_in.time + t) * d;
          for (std::size_t c = 0; c < d; ++c) dst[c] += src[c] * inv;
        }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Relative position bias

/// Maps a (query, key) coordinate pair on one axis to a table row. When the
/// query and key extents differ, both coordinates are scaled by integer
/// ratios onto a common grid before taking the offset.
struct RelAxis {
  std::size_t ratio_q = 1, ratio_k = 1, base = 0, rows = 1;

  RelAxis(std::size_t q_extent, std::size_t k_extent) {
    const std::size_t hi = std::max(q_extent, k_extent), lo = std::min(q_extent, k_extent);
    if (lo == 0 || hi % lo != 0) {
      throw ConfigError("relative position: grid extents " + std::to_string(q_extent) + " and " +
                        std::to_string(k_extent) + " have no integer ratio");
    }
    ratio_q = std::max<std::size_t>(k_extent / q_extent, 1);
    ratio_k = std::max<std::size_t>(q_extent / k_extent, 1);
    base = (k_extent - 1) * ratio_k;
    rows = rel_pos_rows(q_extent, k_extent);
  }

  std::size_t index(std::size_t q, std::size_t k) const { return q * ratio_q + base - k * ratio_k; }
};

/// E[i][j] = Q_i · (R_t[t-offset] + R_f[f-offset]); zero on class-token rows
/// and columns. Q is N_q × d_head for a single head.
template <typename T>
Tensor<T> rel_pos_bias(const Tensor<T>& q, const Tensor<T>& rel_t, const Tensor<T>& rel_f,
                       const TokenGrid& grid_q, const TokenGrid& grid_k) {
  const RelAxis ax_t(grid_q.time, grid_k.time), ax_f(grid_q.freq, grid_k.freq);
  const std::size_t dh = q.dim(1);
  if (rel_t.dim(0) < ax_t.rows || rel_f.dim(0) < ax_f.rows || rel_t.dim(1) != dh ||
      rel_f.dim(1) != dh)
    throw DimensionError("rel_pos_bias: table shape does not cover the grids");
  if (q.dim(0) != grid_q.count()) throw DimensionError("rel_pos_bias: query count mismatch");
  Tensor<T> e({grid_q.count(), grid_k.count()});
  const std::size_t oq = grid_q.offset(), ok = grid_k.offset();
  for (std::size_t fi = 0; fi < grid_q.freq; ++fi)
    for (std::size_t ti = 0; ti < grid_q.time; ++ti) {
      const std::size_t i = oq + fi * grid_q.time + ti;
      const T* qi = q.data() + i * dh;
      for (std::size_t fj = 0; fj < grid_k.freq; ++fj)
        for (std::size_t tj = 0; tj < grid_k.time; ++tj) {
          const T* rt = rel_t.data() + ax_t.index(ti, tj) * dh;
          const T* rf = rel_f.data() + ax_f.index(fi, fj) * dh;
          T acc{0};
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * (rt[c] + rf[c]);
          e(i, ok + fj * grid_k.time + tj) = acc;
        }
    }
  return e;
}

// ---------------------------------------------------------------------------
// Multiscale attention

template <typename T>
struct AttentionWeights {
  const Tensor<T>& q_weight;
  const Tensor<T>& q_bias;
  const Tensor<T>& k_weight;
  const Tensor<T>& k_bias;
  const Tensor<T>& v_weight;
  const Tensor<T>& v_bias;
  const Tensor<T>& proj_weight;
  const Tensor<T>& proj_bias;
  const Tensor<T>& rel_pos_t;
  const Tensor<T>& rel_pos_f;
};

template <typename T>
AttentionWeights<T> attention_weights(const ModelParams<T>& p, const std::string& prefix) {
  const std::string a = prefix + "attn.";
  return {p.at(a + "q.weight"),    p.at(a + "q.bias"),    p.at(a + "k.weight"),
          p.at(a + "k.bias"),      p.at(a + "v.weight"),  p.at(a + "v.bias"),
          p.at(a + "proj.weight"), p.at(a + "proj.bias"), p.at(a + "rel_pos_t"),
          p.at(a + "rel_pos_f")};
}

template <typename T>
struct AttentionGrads {
  Tensor<T>& q_weight;
  Tensor<T>& q_bias;
  Tensor<T>& k_weight;
  Tensor<T>& k_bias;
  Tensor<T>& v_weight;
  Tensor<T>& v_bias;
  Tensor<T>& proj_weight;
  Tensor<T>& proj_bias;
  Tensor<T>& rel_pos_t;
  Tensor<T>& rel_pos_f;
};

template <typename T>
AttentionGrads<T> attention_grads(ModelParams<T>& g, const std::string& prefix) {
  const std::string a = prefix + "attn.";
  return {g.at(a + "q.weight"),    g.at(a + "q.bias"),    g.at(a + "k.weight"),
          g.at(a + "k.bias"),      g.at(a + "v.weight"),  g.at(a + "v.bias"),
          g.at(a + "proj.weight"), g.at(a + "proj.bias"), g.at(a + "rel_pos_t"),
          g.at(a + "rel_pos_f")};
}

template <typename T>
struct AttentionCache {
  Tensor<T> input;           // normalized block input, N_in × dim_in
  TokenGrid grid_in, grid_out;
  Tensor<T> q, k, v;         // pooled, N_out × dim_out
  std::vector<Tensor<T>> probs;  // per head, N_q × N_k
  Tensor<T> concat;          // N_out × dim_out, before the output projection
};

namespace detail {

// One head over pooled Q/K/V. Writes Q_h + softmax(S) V_h into `out` (same
// layout as q, columns [col0, col0 + dh)). Stores probabilities when `probs`
// is non-null.
template <typename T>
void attention_head(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const Tensor<T>& rel_t, const Tensor<T>& rel_f, const TokenGrid& gq,
                    const TokenGrid& gk, std::size_t col0, std::size_t dh, Tensor<T>& out,
                    Tensor<T>* probs) {
  const std::size_t width = q.dim(1);
  const std::size_t nq = gq.count(), nk = gk.count();
  const RelAxis ax_t(gq.time, gk.time), ax_f(gq.freq, gk.freq);
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));

  // Kᵀ for this head (dh × nk) so score accumulation runs over contiguous keys.
  std::vector<T> kt(dh * nk);
  for (std::size_t j = 0; j < nk; ++j)
    for (std::size_t c = 0; c < dh; ++c) kt[c * nk + j] = k[j * width + col0 + c];

  std::vector<T> s(nk), rt(gk.time), rf(gk.freq);
  const std::size_t oq = gq.offset(), ok = gk.offset();
  for (std::size_t i = 0; i < nq; ++i) {
    const T* qi = q.data() + i * width + col0;
    std::fill(s.begin(), s.end(), T{0});
    for (std::size_t c = 0; c < dh; ++c) {
      const T qc = qi[c];
      const T* krow = kt.data() + c * nk;
      for (std::size_t j = 0; j < nk; ++j) s[j] += qc * krow[j];
    }
    if (i >= oq) {
      const std::size_t gi = i - oq, fi = gi / gq.time, ti = gi % gq.time;
      for (std::size_t tj = 0; tj < gk.time; ++tj) {
        const T* r = rel_t.data() + ax_t.index(ti, tj) * dh;
        T acc{0};
        for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * r[c];
        rt[tj] = acc;
      }
      for (std::size_t fj = 0; fj < gk.freq; ++fj) {
        const T* r = rel_f.data() + ax_f.index(fi, fj) * dh;
        T acc{0};
        for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * r[c];
        rf[fj] = acc;
      }
      for (std::size_t fj = 0; fj < gk.freq; ++fj) {
        T* srow = s.data() + ok + fj * gk.time;
        const T bf = rf[fj];
        for (std::size_t tj = 0; tj < gk.time; ++tj) srow[tj] += bf + rt[tj];
      }
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < nk; ++j) {
      s[j] *= scale;
      mx = std::max(mx, s[j]);
    }
    T sum{0};
    for (std::size_t j = 0; j < nk; ++j) {
      s[j] = std::exp(s[j] - mx);
      sum += s[j];
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < nk; ++j) s[j] *= inv;
    if (probs) std::copy(s.begin(), s.end(), probs->data() + i * nk);

    T* oi = out.data() + i * width + col0;
    for (std::size_t c = 0; c < dh; ++c) oi[c] = qi[c];
    for (std::size_t j = 0; j < nk; ++j) {
      const T pj = s[j];
      const T* vj = v.data() + j * width + col0;
      for (std::size_t c = 0; c < dh; ++c) oi[c] += pj * vj[c];
    }
  }
}

}  // namespace detail

/// Pooled multihead self-attention on an already-normalized input:
/// Q/K/V = pool(x W + b); per head Q + softmax((Q Kᵀ + E) / sqrt(d_head)) V;
/// heads concatenated and projected by W_O.
template <typename T>
TokenTensor<T> multiscale_attention(const TokenTensor<T>& x, const AttentionWeights<T>& w,
                                    const BlockSpec& spec, AttentionCache<T>* cache = nullptr) {
  if (spec.heads == 0 || spec.dim_out % spec.heads != 0)
    throw ConfigError("multiscale_attention: " + std::to_string(spec.heads) +
                      " heads do not divide dim " + std::to_string(spec.dim_out));
  if (x.dim() != spec.dim_in) throw DimensionError("multiscale_attention: input width mismatch");
  const std::size_t dh = spec.head_dim();
  const auto project_pool = [&](const Tensor<T>& wt, const Tensor<T>& b) {
    return pool_tokens(TokenTensor<T>{linear(x.tokens, wt, b), x.grid}, spec.pool_stride_f,
                       spec.pool_stride_t);
  };
  TokenTensor<T> q = project_pool(w.q_weight, w.q_bias);
  TokenTensor<T> k = project_pool(w.k_weight, w.k_bias);
  TokenTensor<T> v = project_pool(w.v_weight, w.v_bias);

  Tensor<T> concat(q.tokens.shape());
  if (cache) cache->probs.clear();
  for (std::size_t h = 0; h < spec.heads; ++h) {
    Tensor<T>* probs = nullptr;
    if (cache) {
      cache->probs.emplace_back(Shape{q.grid.count(), k.grid.count()});
      probs = &cache->probs.back();
    }
    detail::attention_head(q.tokens, k.tokens, v.tokens, w.rel_pos_t, w.rel_pos_f, q.grid, k.grid,
                           h * dh, dh, concat, probs);
  }
  TokenTensor<T> out{linear(concat, w.proj_weight, w.proj_bias), q.grid};
  if (cache) {
    cache->input = x.tokens;
    cache->grid_in = x.grid;
    cache->grid_out = q.grid;
    cache->q = std::move(q.tokens);
    cache->k = std::move(k.tokens);
    cache->v = std::move(v.tokens);
    cache->concat = std::move(concat);
  }
  return out;
}

/// Returns the gradient w.r.t. the (normalized) attention input.
template <typename T>
Tensor<T> multiscale_attention_backward(const AttentionCache<T>& cache,
                                        const AttentionWeights<T>& w, const BlockSpec& spec,
                                        const Tensor<T>& dout, AttentionGrads<T> g) {
  const std::size_t dh = spec.head_dim(), width = spec.dim_out;
  const TokenGrid& gq = cache.grid_out;
  const TokenGrid& gk = cache.grid_out;
  const std::size_t nq = gq.count(), nk = gk.count();
  const RelAxis ax_t(gq.time, gk.time), ax_f(gq.freq, gk.freq);
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));

  const Tensor<T> dconcat =
      linear_backward(cache.concat, w.proj_weight, dout, g.proj_weight, g.proj_bias);

  Tensor<T> dq({nq, width}), dk({nk, width}), dv({nk, width});
  std::vector<T> dp(nk), drt(gk.time), drf(gk.freq);
  std::vector<T> vt(dh * nk);
  const std::size_t oq = gq.offset(), ok = gk.offset();
  for (std::size_t h = 0; h < spec.heads; ++h) {
    const std::size_t col0 = h * dh;
    const Tensor<T>& P = cache.probs[h];
    for (std::size_t j = 0; j < nk; ++j)
      for (std::size_t c = 0; c < dh; ++c) vt[c * nk + j] = cache.v[j * width + col0 + c];
    for (std::size_t i = 0; i < nq; ++i) {
      const T* doi = dconcat.data() + i * width + col0;
      const T* pi = P.data() + i * nk;
      const T* qi = cache.q.data() + i * width + col0;
      T* dqi = dq.data() + i * width + col0;
      // Q-residual.
      for (std::size_t c = 0; c < dh; ++c) dqi[c] += doi[c];
      // dV_j += P_ij dO_i ; dP_ij = dO_i · V_j
      std::fill(dp.begin(), dp.end(), T{0});
      for (std::size_t c = 0; c < dh; ++c) {
        const T d = doi[c];
        const T* vrow = vt.data() + c * nk;
        for (std::size_t j = 0; j < nk; ++j) dp[j] += d * vrow[j];
      }
      for (std::size_t j = 0; j < nk; ++j) {
        T* dvj = dv.data() + j * width + col0;
        const T pj = pi[j];
        for (std::size_t c = 0; c < dh; ++c) dvj[c] += pj * doi[c];
      }
      // Softmax backward, folded with the 1/sqrt(dh) scale.
      T dot{0};
      for (std::size_t j = 0; j < nk; ++j) dot += pi[j] * dp[j];
      for (std::size_t j = 0; j < nk; ++j) dp[j] = pi[j] * (dp[j] - dot) * scale;
      // Content term.
      for (std::size_t j = 0; j < nk; ++j) {
        const T ds = dp[j];
        const T* kj = cache.k.data() + j * width + col0;
        T* dkj = dk.data() + j * width + col0;
        for (std::size_t c = 0; c < dh; ++c) {
          dqi[c] += ds * kj[c];
          dkj[c] += ds * qi[c];
        }
      }
      // Relative position term.
      if (i < oq) continue;
      const std::size_t gi = i - oq, fi = gi / gq.time, ti = gi % gq.time;
      std::fill(drt.begin(), drt.end(), T{0});
      std::fill(drf.begin(), drf.end(), T{0});
      for (std::size_t fj = 0; fj < gk.freq; ++fj) {
        const T* row = dp.data() + ok + fj * gk.time;
        for (std::size_t tj = 0; tj < gk.time; ++tj) {
          drf[fj] += row[tj];
          drt[tj] += row[tj];
        }
      }
      for (std::size_t tj = 0; tj < gk.time; ++tj) {
        const std::size_t r = ax_t.index(ti, tj);
        const T* rt = w.rel_pos_t.data() + r * dh;
        T* grt = g.rel_pos_t.data() + r * dh;
        for (std::size_t c = 0; c < dh; ++c) {
          dqi[c] += drt[tj] * rt[c];
          grt[c] += drt[tj] * qi[c];
        }
      }
      for (std::size_t fj = 0; fj < gk.freq; ++fj) {
        const std::size_t r = ax_f.index(fi, fj);
        const T* rf = w.rel_pos_f.data() + r * dh;
        T* grf = g.rel_pos_f.data() + r * dh;
        for (std::size_t c = 0; c < dh; ++c) {
          dqi[c] += drf[fj] * rf[c];
          grf[c] += drf[fj] * qi[c];
        }
      }
    }
  }

  const auto unpool = [&](const Tensor<T>& d) {
    return pool_tokens_backward(d, cache.grid_in, spec.pool_stride_f, spec.pool_stride_t);
  };
  Tensor<T> dx = linear_backward(cache.input, w.q_weight, unpool(dq), g.q_weight, g.q_bias);
  add_inplace(dx, linear_backward(cache.input, w.k_weight, unpool(dk), g.k_weight, g.k_bias));
  add_inplace(dx, linear_backward(cache.input, w.v_weight, unpool(dv), g.v_weight, g.v_bias));
  return dx;
}

// ---------------------------------------------------------------------------
// Transformer block

template <typename T>
struct BlockCache {
  TokenGrid grid_in, grid_out;
  LayerNormCache<T> ln1, ln2;
  AttentionCache<T> attn;
  Tensor<T> pooled_input;  // P(x), before the residual expansion
  Tensor<T> h2, m1, g;     // LN2 output, fc1 output, GELU output
};

/// A' = attention(LN1(x)) + P(x) [expanded at MMSA blocks];
/// out = MLP(LN2(A')) + A'.
template <typename T>
TokenTensor<T> transformer_block(const TokenTensor<T>& x, const ModelParams<T>& p,
                                 const std::string& prefix, const BlockSpec& spec,
                                 BlockCache<T>* cache = nullptr) {
  LayerNormCache<T>* ln1 = cache ? &cache->ln1 : nullptr;
  LayerNormCache<T>* ln2 = cache ? &cache->ln2 : nullptr;
  const TokenTensor<T> h1{layer_norm(x.tokens, p.at(prefix + "norm1.weight"),
                                     p.at(prefix + "norm1.bias"), kLayerNormEps, ln1),
                          x.grid};
  TokenTensor<T> a = multiscale_attention(h1, attention_weights(p, prefix), spec,
                                          cache ? &cache->attn : nullptr);
  TokenTensor<T> res = pool_tokens(x, spec.pool_stride_f, spec.pool_stride_t);
  if (spec.kind == BlockKind::MMSA) {
    Tensor<T> expanded =
        linear(res.tokens, p.at(prefix + "residual.weight"), p.at(prefix + "residual.bias"));
    add_inplace(a.tokens, expanded);
  } else {
    add_inplace(a.tokens, res.tokens);
  }
  Tensor<T> h2 =
      layer_norm(a.tokens, p.at(prefix + "norm2.weight"), p.at(prefix + "norm2.bias"),
                 kLayerNormEps, ln2);
  Tensor<T> m1 = linear(h2, p.at(prefix + "mlp.fc1.weight"), p.at(prefix + "mlp.fc1.bias"));
  Tensor<T> g = gelu(m1);
  Tensor<T> m2 = linear(g, p.at(prefix + "mlp.fc2.weight"), p.at(prefix + "mlp.fc2.bias"));
  add_inplace(m2, a.tokens);
  TokenTensor<T> out{std::move(m2), a.grid};
  if (cache) {
    cache->grid_in = x.grid;
    cache->grid_out = a.grid;
    cache->pooled_input = std::move(res.tokens);
    cache->h2 = std::move(h2);
    cache->m1 = std::move(m1);
    cache->g = std::move(g);
  }
  return out;
}

/// Accumulates parameter gradients into `grads`; returns d(input tokens).
template <typename T>
Tensor<T> transformer_block_backward(const BlockCache<T>& c, const ModelParams<T>& p,
                                     const std::string& prefix, const BlockSpec& spec,
                                     const Tensor<T>& dy, ModelParams<T>& grads) {
  Tensor<T> dg = linear_backward(c.g, p.at(prefix + "mlp.fc2.weight"), dy,
                                 grads.at(prefix + "mlp.fc2.weight"),
                                 grads.at(prefix + "mlp.fc2.bias"));
  Tensor<T> dm1 = gelu_backward(c.m1, dg);
  Tensor<T> dh2 = linear_backward(c.h2, p.at(prefix + "mlp.fc1.weight"), dm1,
                                  grads.at(prefix + "mlp.fc1.weight"),
                                  grads.at(prefix + "mlp.fc1.bias"));
  Tensor<T> da = layer_norm_backward(c.ln2, p.at(prefix + "norm2.weight"), dh2,
                                     grads.at(prefix + "norm2.weight"),
                                     grads.at(prefix + "norm2.bias"));
  add_inplace(da, dy);

  Tensor<T> dres = spec.kind == BlockKind::MMSA
                       ? linear_backward(c.pooled_input, p.at(prefix + "residual.weight"), da,
                                         grads.at(prefix + "residual.weight"),
                                         grads.at(prefix + "residual.bias"))
                       : da;
  Tensor<T> dx = pool_tokens_backward(dres, c.grid_in, spec.pool_stride_f, spec.pool_stride_t);

  Tensor<T> dh1 = multiscale_attention_backward(c.attn, attention_weights(p, prefix), spec, da,
                                                attention_grads(grads, prefix));
  add_inplace(dx, layer_norm_backward(c.ln1, p.at(prefix + "norm1.weight"), dh1,
                                      grads.at(prefix + "norm1.weight"),
                                      grads.at(prefix + "norm1.bias")));
  return dx;
}

// ---------------------------------------------------------------------------
// Whole network

template <typename T>
struct ForwardCache {
  Tensor<T> input;  // h × T spectrogram
  TokenGrid patch_grid;
  std::vector<BlockCache<T>> blocks;
  LayerNormCache<T> final_ln;
  Tensor<T> cls_normed;  // 1 × d
};

/// Shape of the token tensor after a stage: channels and grid.
struct StageShape {
  std::size_t dim;
  TokenGrid grid;

  friend bool operator==(const StageShape&, const StageShape&) = default;
};

template <typename T>
struct ForwardOutput {
  std::vector<std::vector<T>> logits;  // one vector per classification head
  std::vector<T> embedding;            // class token entering the last block
  std::vector<StageShape> trace;       // after patch embedding, then after each block
};

template <typename T>
ForwardOutput<T> forward(const Tensor<T>& spec, const ModelParams<T>& p,
                         const StageSchedule& s, ForwardCache<T>* cache = nullptr) {
  require_rank(spec, 2, "forward input");
  if (spec.dim(0) != s.input_freq || spec.dim(1) != s.input_time) {
    throw DimensionError("forward: spectrogram " + shape_str(spec.shape()) +
                         " does not match schedule input [" + std::to_string(s.input_freq) +
                         ", " + std::to_string(s.input_time) + "]");
  }
  ForwardOutput<T> out;
  TokenTensor<T> x =
      patch_embed(spec, p.at("patch.weight"), p.at("patch.bias"), p.at("cls_token"), s.patch);
  out.trace.push_back({x.dim(), x.grid});
  if (cache) {
    cache->input = spec;
    cache->patch_grid = x.grid;
    cache->blocks.assign(s.blocks.size(), BlockCache<T>{});
  }
  const std::size_t nb = s.blocks.size();
  for (std::size_t i = 0; i < nb; ++i) {
    if (i + 1 == nb) out.embedding.assign(x.tokens.row(0).begin(), x.tokens.row(0).end());
    x = transformer_block(x, p, block_prefix(i), s.blocks[i], cache ? &cache->blocks[i] : nullptr);
    out.trace.push_back({x.dim(), x.grid});
  }
  if (nb == 0) out.embedding.assign(x.tokens.row(0).begin(), x.tokens.row(0).end());

  const std::size_t d = x.dim();
  Tensor<T> cls({1, d}, std::vector<T>(x.tokens.row(0).begin(), x.tokens.row(0).end()));
  Tensor<T> cls_n = layer_norm(cls, p.at("norm.weight"), p.at("norm.bias"), kLayerNormEps,
                               cache ? &cache->final_ln : nullptr);
  for (std::size_t h = 0; h < s.head_sizes.size(); ++h) {
    const std::string hp = "heads." + std::to_string(h) + ".";
    Tensor<T> logits = linear(cls_n, p.at(hp + "weight"), p.at(hp + "bias"));
    require_finite(logits, "forward logits");
    out.logits.emplace_back(logits.values().begin(), logits.values().end());
  }
  if (cache) cache->cls_normed = std::move(cls_n);
  return out;
}

/// Parameter gradients given d(loss)/d(logits) per head.
template <typename T>
ModelParams<T> backward(const ForwardCache<T>& cache, const ModelParams<T>& p,
                        const StageSchedule& s, const std::vector<std::vector<T>>& dlogits) {
  if (dlogits.size() != s.head_sizes.size())
    throw DimensionError("backward: expected one logit gradient per head");
  ModelParams<T> g = ModelParams<T>::zeros_like(p);
  const std::size_t d = s.final_dim();
  Tensor<T> dcls_n({1, d});
  for (std::size_t h = 0; h < s.head_sizes.size(); ++h) {
    const std::string hp = "heads." + std::to_string(h) + ".";
    Tensor<T> dl({1, s.head_sizes[h]}, dlogits[h]);
    add_inplace(dcls_n, linear_backward(cache.cls_normed, p.at(hp + "weight"), dl,
                                        g.at(hp + "weight"), g.at(hp + "bias")));
  }
  Tensor<T> dcls = layer_norm_backward(cache.final_ln, p.at("norm.weight"), dcls_n,
                                       g.at("norm.weight"), g.at("norm.bias"));

  const std::size_t nb = s.blocks.size();
  const TokenGrid last = nb ? cache.blocks.back().grid_out : cache.patch_grid;
  Tensor<T> dx({last.count(), d});
  std::copy_n(dcls.data(), d, dx.data());
  for (std::size_t i = nb; i-- > 0;)
    dx = transformer_block_backward(cache.blocks[i], p, block_prefix(i), s.blocks[i], dx, g);

  // Patch embedding: row 0 is the class token, the rest are conv outputs.
  const std::size_t d0 = s.patch.dim;
  Tensor<T>& gcls = g.at("cls_token");
  for (std::size_t c = 0; c < d0; ++c) gcls[c] += dx(0, c);
  const std::size_t F = cache.patch_grid.freq, Tt = cache.patch_grid.time;
  Tensor<T> dconv({d0, F, Tt});
  for (std::size_t c = 0; c < d0; ++c)
    for (std::size_t i = 0; i < F * Tt; ++i) dconv[c * F * Tt + i] = dx(1 + i, c);
  const Tensor<T> x3 = cache.input.reshaped({1, cache.input.dim(0), cache.input.dim(1)});
  auto cg = conv2d_backward(x3, p.at("patch.weight"), dconv, patch_geometry(s.patch), false);
  add_inplace(g.at("patch.weight"), cg.dw);
  add_inplace(g.at("patch.bias"), cg.dbias);
  return g;
}

}  // namespace mast
