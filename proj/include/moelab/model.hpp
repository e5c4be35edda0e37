#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/numerics.hpp"
#include "moelab/rng.hpp"

namespace moelab {

struct ModelConfig {
  int vocab_size = 40;
  int width = 64;
  int blocks = 2;
  int experts_per_layer = 8;
  int active_experts = 2;
  int shared_experts = 0;
  int expert_hidden = 128;
  int max_context = 64;
  bool attention_enabled = true;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    auto pos = [](int v, const char* name) {
      if (v < 1) throw InvalidConfig(std::string("ModelConfig: ") + name + " must be >= 1");
    };
    pos(vocab_size, "vocab_size");
    pos(width, "width");
    pos(blocks, "blocks");
    pos(experts_per_layer, "experts_per_layer");
    pos(active_experts, "active_experts");
    pos(expert_hidden, "expert_hidden");
    pos(max_context, "max_context");
    if (shared_experts < 0) throw InvalidConfig("ModelConfig: shared_experts must be >= 0");
    if (active_experts > experts_per_layer)
      throw InvalidConfig("ModelConfig: active_experts must be <= experts_per_layer");
  }
};

// Expert MLP: hidden = relu(x . w1), out = hidden . w2.
// w1 is width x expert_hidden, w2 is expert_hidden x width, both row-major.
template <class Real>
struct ExpertParamsT {
  std::vector<Real> w1, w2;
};

template <class Real>
struct BlockParamsT {
  std::vector<Real> attn_wq, attn_wk, attn_wv, attn_wo;  // width x width
  std::vector<Real> norm_attn_gain, norm_moe_gain;       // width
  std::vector<Real> router_w;                            // experts x width
  std::vector<Real> router_b;                            // experts
  std::vector<ExpertParamsT<Real>> experts;              // routed bank
  std::vector<ExpertParamsT<Real>> shared;               // always-on bank
};

template <class Real>
struct ParamsT {
  ModelConfig cfg;
  std::vector<Real> tok_embed;  // vocab x width
  std::vector<Real> pos_embed;  // max_context x width
  std::vector<BlockParamsT<Real>> blocks;
  std::vector<Real> unembed;    // width x vocab
};

using Params = ParamsT<float>;

template <class Real>
struct TensorRef {
  std::string name;
  std::vector<Real>* data;
};

// Canonical tensor walk; fixed order, names are stable identifiers used by
// checkpoints, the optimizer, and update manifests.
template <class Real>
std::vector<TensorRef<Real>> tensor_refs(ParamsT<Real>& p) {
  std::vector<TensorRef<Real>> out;
  out.push_back({"tok_embed", &p.tok_embed});
  out.push_back({"pos_embed", &p.pos_embed});
  for (size_t b = 0; b < p.blocks.size(); ++b) {
    auto& blk = p.blocks[b];
    std::string pre = "blocks." + std::to_string(b) + ".";
    if (p.cfg.attention_enabled) {
      out.push_back({pre + "attn_wq", &blk.attn_wq});
      out.push_back({pre + "attn_wk", &blk.attn_wk});
      out.push_back({pre + "attn_wv", &blk.attn_wv});
      out.push_back({pre + "attn_wo", &blk.attn_wo});
      out.push_back({pre + "norm_attn_gain", &blk.norm_attn_gain});
    }
    out.push_back({pre + "norm_moe_gain", &blk.norm_moe_gain});
    out.push_back({pre + "router_w", &blk.router_w});
    out.push_back({pre + "router_b", &blk.router_b});
    for (size_t e = 0; e < blk.experts.size(); ++e) {
      std::string ep = pre + "experts." + std::to_string(e) + ".";
      out.push_back({ep + "w1", &blk.experts[e].w1});
      out.push_back({ep + "w2", &blk.experts[e].w2});
    }
    for (size_t e = 0; e < blk.shared.size(); ++e) {
      std::string ep = pre + "shared." + std::to_string(e) + ".";
      out.push_back({ep + "w1", &blk.shared[e].w1});
      out.push_back({ep + "w2", &blk.shared[e].w2});
    }
  }
  out.push_back({"unembed", &p.unembed});
  return out;
}

// Zero-initialized parameter set with the shapes the config declares.
template <class Real>
ParamsT<Real> make_params(const ModelConfig& cfg) {
  cfg.validate();
  ParamsT<Real> p;
  p.cfg = cfg;
  size_t d = static_cast<size_t>(cfg.width);
  size_t H = static_cast<size_t>(cfg.expert_hidden);
  p.tok_embed.assign(static_cast<size_t>(cfg.vocab_size) * d, Real(0));
  p.pos_embed.assign(static_cast<size_t>(cfg.max_context) * d, Real(0));
  p.blocks.resize(static_cast<size_t>(cfg.blocks));
  for (auto& blk : p.blocks) {
    if (cfg.attention_enabled) {
      blk.attn_wq.assign(d * d, Real(0));
      blk.attn_wk.assign(d * d, Real(0));
      blk.attn_wv.assign(d * d, Real(0));
      blk.attn_wo.assign(d * d, Real(0));
      blk.norm_attn_gain.assign(d, Real(0));
    }
    blk.norm_moe_gain.assign(d, Real(0));
    blk.router_w.assign(static_cast<size_t>(cfg.experts_per_layer) * d, Real(0));
    blk.router_b.assign(static_cast<size_t>(cfg.experts_per_layer), Real(0));
    blk.experts.resize(static_cast<size_t>(cfg.experts_per_layer));
    for (auto& e : blk.experts) {
      e.w1.assign(d * H, Real(0));
      e.w2.assign(H * d, Real(0));
    }
    blk.shared.resize(static_cast<size_t>(cfg.shared_experts));
    for (auto& e : blk.shared) {
      e.w1.assign(d * H, Real(0));
      e.w2.assign(H * d, Real(0));
    }
  }
  p.unembed.assign(d * static_cast<size_t>(cfg.vocab_size), Real(0));
  return p;
}

template <class Real>
ParamsT<Real> zeros_like(const ParamsT<Real>& p) {
  return make_params<Real>(p.cfg);
}

template <class To, class From>
ParamsT<To> cast_params(const ParamsT<From>& p) {
  ParamsT<To> out = make_params<To>(p.cfg);
  auto src = tensor_refs(const_cast<ParamsT<From>&>(p));
  auto dst = tensor_refs(out);
  for (size_t i = 0; i < src.size(); ++i) {
    auto& s = *src[i].data;
    auto& t = *dst[i].data;
    for (size_t j = 0; j < s.size(); ++j) t[j] = static_cast<To>(s[j]);
  }
  return out;
}

// Weights ~ N(0, 1/fan_in); norm gains 1; biases 0. Embeddings use the
// stream width as fan-in. Draw order is the canonical tensor order.
template <class Real>
ParamsT<Real> init_params(const ModelConfig& cfg, Rng& rng) {
  ParamsT<Real> p = make_params<Real>(cfg);
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.width));
  double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(cfg.expert_hidden));
  auto fill = [&](std::vector<Real>& v, double std) {
    for (auto& x : v) x = static_cast<Real>(rng.normal() * std);
  };
  auto fill_expert = [&](ExpertParamsT<Real>& e) {
    fill(e.w1, inv_sqrt_d);
    fill(e.w2, inv_sqrt_h);
  };
  fill(p.tok_embed, inv_sqrt_d);
  fill(p.pos_embed, inv_sqrt_d);
  for (auto& blk : p.blocks) {
    if (cfg.attention_enabled) {
      fill(blk.attn_wq, inv_sqrt_d);
      fill(blk.attn_wk, inv_sqrt_d);
      fill(blk.attn_wv, inv_sqrt_d);
      fill(blk.attn_wo, inv_sqrt_d);
      blk.norm_attn_gain.assign(blk.norm_attn_gain.size(), Real(1));
    }
    blk.norm_moe_gain.assign(blk.norm_moe_gain.size(), Real(1));
    fill(blk.router_w, inv_sqrt_d);
    // router_b stays zero
    for (auto& e : blk.experts) fill_expert(e);
    for (auto& e : blk.shared) fill_expert(e);
  }
  fill(p.unembed, inv_sqrt_d);
  return p;
}

inline uint64_t hash_bytes(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    uint64_t chunk;
    std::memcpy(&chunk, p + i, 8);
    h = detail::mix64(h ^ chunk);
  }
  if (i < n) {
    uint64_t tail = 0;
    for (size_t j = 0; i < n; ++i, ++j) tail |= static_cast<uint64_t>(p[i]) << (8 * j);
    h = detail::mix64(h ^ tail ^ ((n & 7) * 0x9E37ULL + 1));
  }
  return h;
}

// Identity stamp used to detect stale traces (params edited after tracing).
template <class Real>
uint64_t hash_params(const ParamsT<Real>& p) {
  uint64_t h = 0xcbf29ce484222325ULL;
  int cfg_fields[] = {p.cfg.vocab_size,    p.cfg.width,          p.cfg.blocks,
                      p.cfg.experts_per_layer, p.cfg.active_experts, p.cfg.shared_experts,
                      p.cfg.expert_hidden, p.cfg.max_context,    p.cfg.attention_enabled ? 1 : 0};
  h = hash_bytes(cfg_fields, sizeof(cfg_fields), h);
  auto refs = tensor_refs(const_cast<ParamsT<Real>&>(p));
  for (auto& r : refs) {
    h = hash_bytes(r.name.data(), r.name.size(), h);
    h = hash_bytes(r.data->data(), r.data->size() * sizeof(Real), h);
  }
  return h;
}

// A route: canonical ascending expert index set plus gates, where gates are
// the softmax of the router scores restricted to the set.
template <class Real>
struct RouteT {
  std::vector<int> experts;
  std::vector<Real> gates;

  bool same_experts(const RouteT& o) const { return experts == o.experts; }
};

using Route = RouteT<float>;

template <class Real>
RouteT<Real> make_route(std::span<const Real> scores, std::vector<int> indices) {
  if (indices.empty()) throw InvalidRoute("make_route: empty index set");
  std::sort(indices.begin(), indices.end());
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<size_t>(indices[i]) >= scores.size())
      throw InvalidRoute("make_route: expert index out of range");
    if (i > 0 && indices[i] == indices[i - 1])
      throw InvalidRoute("make_route: duplicate expert index");
  }
  std::vector<Real> sel(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) sel[i] = scores[indices[i]];
  RouteT<Real> r;
  r.experts = std::move(indices);
  r.gates = softmax<Real>(sel);
  return r;
}

template <class Real>
struct BlockTraceT {
  std::vector<Real> keys, values;    // L x width (attention only)
  std::vector<Real> moe_resid;       // L x width, residual entering the MoE add
  std::vector<Real> moe_input;       // L x width, normed expert/router input
  std::vector<Real> scores;          // L x experts
  std::vector<RouteT<Real>> routes;  // L
  // Deep-capture extras for backward; empty unless requested.
  std::vector<Real> x_in, normed_attn, q, att, att_mix, hidden, outs;
};

template <class Real>
struct TraceT {
  std::vector<int> tokens;
  std::vector<BlockTraceT<Real>> blocks;
  std::vector<Real> logits;   // L x vocab
  std::vector<Real> z_final;  // L x width (deep capture only)
  uint64_t params_hash = 0;   // 0 = not stamped

  int length() const { return static_cast<int>(tokens.size()); }
};

using Trace = TraceT<float>;

template <class Real>
struct ForwardModsT {
  int route_t = -1, route_block = -1;
  std::vector<int> route_override;  // forced executed route at (route_t, route_block)
  int nudge_t = -1, nudge_block = -1;
  std::vector<Real> score_nudge;    // added to router scores before selection
  bool deep_capture = false;
  bool stamp_params_hash = true;
  // Executed-expert ReLU activation pattern, appended in execution order;
  // lets gradient checks detect kink crossings between probe points.
  std::vector<uint8_t>* relu_signs = nullptr;
};

using ForwardMods = ForwardModsT<float>;

namespace detail {

template <class Real>
Real dot(const Real* a, const Real* b, int n) {
  Real acc = Real(0);
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// y = x . W with W row-major rows x cols, |x| = rows.
template <class Real>
void vecmat(const Real* x, const std::vector<Real>& W, int rows, int cols, Real* out) {
  for (int c = 0; c < cols; ++c) out[c] = Real(0);
  for (int r = 0; r < rows; ++r) {
    Real xv = x[r];
    if (xv == Real(0)) continue;
    const Real* wrow = W.data() + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) out[c] += xv * wrow[c];
  }
}

// y = W . x with W row-major rows x cols, |x| = cols.
template <class Real>
void matvec(const std::vector<Real>& W, int rows, int cols, const Real* x, Real* out) {
  for (int r = 0; r < rows; ++r)
    out[r] = dot(W.data() + static_cast<size_t>(r) * cols, x, cols);
}

constexpr double kRmsEps = 1e-6;

template <class Real>
void rmsnorm(const Real* x, const std::vector<Real>& gain, int n, Real* out) {
  double ms = 0.0;
  for (int i = 0; i < n; ++i) ms += static_cast<double>(x[i]) * static_cast<double>(x[i]);
  Real r = static_cast<Real>(1.0 / std::sqrt(ms / n + kRmsEps));
  for (int i = 0; i < n; ++i) out[i] = x[i] * gain[i] * r;
}

// Accumulates dx and dgain for y_i = gain_i * x_i / rms(x).
template <class Real>
void rmsnorm_backward(const Real* x, const std::vector<Real>& gain, int n, const Real* dy,
                      Real* dx_accum, Real* dgain_accum) {
  double ms = 0.0;
  for (int i = 0; i < n; ++i) ms += static_cast<double>(x[i]) * static_cast<double>(x[i]);
  double r = 1.0 / std::sqrt(ms / n + kRmsEps);
  double s = 0.0;
  for (int i = 0; i < n; ++i)
    s += static_cast<double>(dy[i]) * static_cast<double>(gain[i]) * static_cast<double>(x[i]);
  double r3_over_n = r * r * r * s / n;
  for (int i = 0; i < n; ++i) {
    dx_accum[i] += static_cast<Real>(static_cast<double>(dy[i]) * gain[i] * r -
                                     r3_over_n * static_cast<double>(x[i]));
    dgain_accum[i] += static_cast<Real>(static_cast<double>(dy[i]) * x[i] * r);
  }
}

template <class Real>
void expert_apply(const ExpertParamsT<Real>& e, int d, int H, const Real* x, Real* out,
                  Real* hidden_capture, std::vector<uint8_t>* signs) {
  std::vector<Real> hbuf;
  Real* h = hidden_capture;
  if (!h) {
    hbuf.resize(static_cast<size_t>(H));
    h = hbuf.data();
  }
  vecmat(x, e.w1, d, H, h);
  for (int i = 0; i < H; ++i)
    if (!(h[i] > Real(0))) h[i] = Real(0);
  if (signs)
    for (int i = 0; i < H; ++i) signs->push_back(h[i] > Real(0) ? 1 : 0);
  vecmat(h, e.w2, H, d, out);
}

// dy -> dw1, dw2 (accumulated into ge) and dx (accumulated); hidden is the
// captured post-ReLU activation, whose support encodes the ReLU mask.
template <class Real>
void expert_backward(const ExpertParamsT<Real>& e, int d, int H, const Real* x,
                     const Real* hidden, const Real* dy, ExpertParamsT<Real>& ge,
                     Real* dx_accum) {
  std::vector<Real> dpre(static_cast<size_t>(H));
  for (int h = 0; h < H; ++h) {
    if (hidden[h] > Real(0)) {
      const Real* w2row = e.w2.data() + static_cast<size_t>(h) * d;
      Real* gw2row = ge.w2.data() + static_cast<size_t>(h) * d;
      Real dh = Real(0);
      for (int c = 0; c < d; ++c) {
        gw2row[c] += hidden[h] * dy[c];
        dh += w2row[c] * dy[c];
      }
      dpre[h] = dh;
    } else {
      dpre[h] = Real(0);
    }
  }
  for (int r = 0; r < d; ++r) {
    const Real* w1row = e.w1.data() + static_cast<size_t>(r) * H;
    Real* gw1row = ge.w1.data() + static_cast<size_t>(r) * H;
    Real xv = x[r];
    Real acc = Real(0);
    for (int h = 0; h < H; ++h) {
      if (dpre[h] != Real(0)) {
        gw1row[h] += xv * dpre[h];
        acc += w1row[h] * dpre[h];
      }
    }
    dx_accum[r] += acc;
  }
}

// Attention output for one query position. keys/values hold cached rows
// [0, t_cached); when t >= t_cached the row for position t comes from
// own_k/own_v (intervention path). Summation order matches the base forward
// exactly so reuse is bit-identical.
template <class Real>
void attention_at(int t, const Real* q, const Real* keys, const Real* values, int t_cached,
                  const Real* own_k, const Real* own_v, int d, Real* mix, Real* probs_out) {
  std::vector<Real> sc(static_cast<size_t>(t) + 1);
  Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d)));
  for (int j = 0; j <= t; ++j) {
    const Real* kj = j < t_cached ? keys + static_cast<size_t>(j) * d : own_k;
    sc[static_cast<size_t>(j)] = dot(q, kj, d) * scale;
  }
  std::vector<Real> pr = softmax<Real>(sc);
  for (int i = 0; i < d; ++i) mix[i] = Real(0);
  for (int j = 0; j <= t; ++j) {
    const Real* vj = j < t_cached ? values + static_cast<size_t>(j) * d : own_v;
    Real pj = pr[static_cast<size_t>(j)];
    for (int i = 0; i < d; ++i) mix[i] += pj * vj[i];
  }
  if (probs_out)
    for (int j = 0; j <= t; ++j) probs_out[j] = pr[static_cast<size_t>(j)];
}

template <class Real>
struct MoeResult {
  std::vector<Real> scores;
  RouteT<Real> route;
  std::vector<Real> out;
};

// One MoE sublayer evaluation: router scores (optionally nudged), selection
// (top-k or forced route), restricted-softmax gates, expert mixture plus
// unweighted shared experts.
template <class Real>
MoeResult<Real> moe_eval(const ModelConfig& cfg, const BlockParamsT<Real>& bp, const Real* u,
                         const std::vector<int>* override_route, const Real* score_nudge,
                         Real* hidden_cap, Real* outs_cap, std::vector<uint8_t>* signs) {
  int d = cfg.width, N = cfg.experts_per_layer, k = cfg.active_experts;
  int H = cfg.expert_hidden;
  MoeResult<Real> res;
  res.scores.resize(static_cast<size_t>(N));
  matvec(bp.router_w, N, d, u, res.scores.data());
  for (int j = 0; j < N; ++j) res.scores[static_cast<size_t>(j)] += bp.router_b[static_cast<size_t>(j)];
  if (score_nudge)
    for (int j = 0; j < N; ++j) res.scores[static_cast<size_t>(j)] += score_nudge[j];
  std::vector<int> sel;
  if (override_route) {
    if (static_cast<int>(override_route->size()) != k)
      throw InvalidRoute("moe_eval: override route must have exactly k experts");
    sel = *override_route;
  } else {
    sel = top_k_indices<Real>(res.scores, k);
  }
  res.route = make_route<Real>(res.scores, std::move(sel));
  res.out.assign(static_cast<size_t>(d), Real(0));
  std::vector<Real> ebuf(static_cast<size_t>(d));
  for (int i = 0; i < k; ++i) {
    int e = res.route.experts[static_cast<size_t>(i)];
    Real g = res.route.gates[static_cast<size_t>(i)];
    Real* hcap = hidden_cap ? hidden_cap + static_cast<size_t>(i) * H : nullptr;
    expert_apply(bp.experts[static_cast<size_t>(e)], d, H, u, ebuf.data(), hcap, signs);
    if (outs_cap) std::memcpy(outs_cap + static_cast<size_t>(i) * d, ebuf.data(), sizeof(Real) * d);
    for (int c = 0; c < d; ++c) res.out[static_cast<size_t>(c)] += g * ebuf[static_cast<size_t>(c)];
  }
  for (int s = 0; s < cfg.shared_experts; ++s) {
    int slot = k + s;
    Real* hcap = hidden_cap ? hidden_cap + static_cast<size_t>(slot) * H : nullptr;
    expert_apply(bp.shared[static_cast<size_t>(s)], d, H, u, ebuf.data(), hcap, signs);
    if (outs_cap) std::memcpy(outs_cap + static_cast<size_t>(slot) * d, ebuf.data(), sizeof(Real) * d);
    for (int c = 0; c < d; ++c) res.out[static_cast<size_t>(c)] += ebuf[static_cast<size_t>(c)];
  }
  return res;
}

}  // namespace detail

// Standalone MoE sublayer: s = W_r x + b_r, top-k (or forced) route, gates by
// restricted softmax, output sum of gated routed experts plus shared experts.
template <class Real>
std::vector<Real> moe_layer_forward(const ModelConfig& cfg, const BlockParamsT<Real>& layer,
                                    std::span<const Real> x,
                                    const std::vector<int>* override_route = nullptr) {
  cfg.validate();
  if (static_cast<int>(x.size()) != cfg.width)
    throw InvalidInput("moe_layer_forward: input width mismatch");
  require_finite(x, "moe_layer_forward");
  return detail::moe_eval<Real>(cfg, layer, x.data(), override_route, nullptr, nullptr,
                                nullptr, nullptr)
      .out;
}

template <class Real>
std::vector<Real> moe_layer_forward(const ModelConfig& cfg, const BlockParamsT<Real>& layer,
                                    std::span<const Real> x, const RouteT<Real>& override_route) {
  return moe_layer_forward(cfg, layer, x, &override_route.experts);
}

template <class Real>
TraceT<Real> forward(const ParamsT<Real>& p, std::span<const int> tokens,
                     const ForwardModsT<Real>& mods) {
  const ModelConfig& cfg = p.cfg;
  int L = static_cast<int>(tokens.size());
  int d = cfg.width, N = cfg.experts_per_layer, k = cfg.active_experts;
  int H = cfg.expert_hidden, V = cfg.vocab_size, S = cfg.shared_experts;
  int slots = k + S;
  if (L < 1) throw InvalidInput("forward: empty token sequence");
  if (L > cfg.max_context) throw InvalidInput("forward: sequence longer than max_context");
  for (int t = 0; t < L; ++t)
    if (tokens[static_cast<size_t>(t)] < 0 || tokens[static_cast<size_t>(t)] >= V)
      throw InvalidInput("forward: token id out of range at position " + std::to_string(t));
  if (mods.nudge_t >= 0 && static_cast<int>(mods.score_nudge.size()) != N)
    throw InvalidInput("forward: score nudge must have one entry per expert");

  TraceT<Real> tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.blocks.resize(static_cast<size_t>(cfg.blocks));
  tr.logits.resize(static_cast<size_t>(L) * V);

  size_t ld = static_cast<size_t>(L) * d;
  std::vector<Real> z(ld);
  for (int t = 0; t < L; ++t) {
    const Real* te = p.tok_embed.data() + static_cast<size_t>(tokens[static_cast<size_t>(t)]) * d;
    const Real* pe = p.pos_embed.data() + static_cast<size_t>(t) * d;
    Real* zt = z.data() + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) zt[i] = te[i] + pe[i];
  }

  std::vector<Real> a(static_cast<size_t>(d)), qv(static_cast<size_t>(d)),
      mix(static_cast<size_t>(d)), o(static_cast<size_t>(d)), z2(static_cast<size_t>(d)),
      u(static_cast<size_t>(d));

  for (int b = 0; b < cfg.blocks; ++b) {
    const BlockParamsT<Real>& bp = p.blocks[static_cast<size_t>(b)];
    BlockTraceT<Real>& bt = tr.blocks[static_cast<size_t>(b)];
    bt.moe_resid.resize(ld);
    bt.moe_input.resize(ld);
    bt.scores.resize(static_cast<size_t>(L) * N);
    bt.routes.resize(static_cast<size_t>(L));
    if (cfg.attention_enabled) {
      bt.keys.resize(ld);
      bt.values.resize(ld);
    }
    if (mods.deep_capture) {
      bt.x_in.resize(ld);
      bt.hidden.resize(static_cast<size_t>(L) * slots * H);
      bt.outs.resize(static_cast<size_t>(L) * slots * d);
      if (cfg.attention_enabled) {
        bt.normed_attn.resize(ld);
        bt.q.resize(ld);
        bt.att.assign(static_cast<size_t>(L) * L, Real(0));
        bt.att_mix.resize(ld);
      }
    }
    for (int t = 0; t < L; ++t) {
      Real* zt = z.data() + static_cast<size_t>(t) * d;
      if (mods.deep_capture)
        std::memcpy(bt.x_in.data() + static_cast<size_t>(t) * d, zt, sizeof(Real) * d);
      const Real* z2p;
      if (cfg.attention_enabled) {
        detail::rmsnorm(zt, bp.norm_attn_gain, d, a.data());
        detail::vecmat(a.data(), bp.attn_wq, d, d, qv.data());
        detail::vecmat(a.data(), bp.attn_wk, d, d, bt.keys.data() + static_cast<size_t>(t) * d);
        detail::vecmat(a.data(), bp.attn_wv, d, d, bt.values.data() + static_cast<size_t>(t) * d);
        detail::attention_at<Real>(t, qv.data(), bt.keys.data(), bt.values.data(), t + 1, nullptr,
                             nullptr, d, mix.data(),
                             mods.deep_capture ? bt.att.data() + static_cast<size_t>(t) * L
                                               : nullptr);
        detail::vecmat(mix.data(), bp.attn_wo, d, d, o.data());
        for (int i = 0; i < d; ++i) z2[static_cast<size_t>(i)] = zt[i] + o[static_cast<size_t>(i)];
        if (mods.deep_capture) {
          std::memcpy(bt.normed_attn.data() + static_cast<size_t>(t) * d, a.data(), sizeof(Real) * d);
          std::memcpy(bt.q.data() + static_cast<size_t>(t) * d, qv.data(), sizeof(Real) * d);
          std::memcpy(bt.att_mix.data() + static_cast<size_t>(t) * d, mix.data(), sizeof(Real) * d);
        }
        z2p = z2.data();
      } else {
        z2p = zt;
      }
      std::memcpy(bt.moe_resid.data() + static_cast<size_t>(t) * d, z2p, sizeof(Real) * d);
      detail::rmsnorm(z2p, bp.norm_moe_gain, d, u.data());
      std::memcpy(bt.moe_input.data() + static_cast<size_t>(t) * d, u.data(), sizeof(Real) * d);
      const std::vector<int>* ovr =
          (b == mods.route_block && t == mods.route_t) ? &mods.route_override : nullptr;
      const Real* nudge =
          (b == mods.nudge_block && t == mods.nudge_t) ? mods.score_nudge.data() : nullptr;
      Real* hcap = mods.deep_capture
                       ? bt.hidden.data() + static_cast<size_t>(t) * slots * H
                       : nullptr;
      Real* ocap = mods.deep_capture ? bt.outs.data() + static_cast<size_t>(t) * slots * d
                                     : nullptr;
      auto moe = detail::moe_eval<Real>(cfg, bp, u.data(), ovr, nudge, hcap, ocap, mods.relu_signs);
      std::memcpy(bt.scores.data() + static_cast<size_t>(t) * N, moe.scores.data(),
                  sizeof(Real) * N);
      bt.routes[static_cast<size_t>(t)] = std::move(moe.route);
      for (int i = 0; i < d; ++i) zt[i] = z2p[i] + moe.out[static_cast<size_t>(i)];
    }
  }
  for (int t = 0; t < L; ++t)
    detail::vecmat(z.data() + static_cast<size_t>(t) * d, p.unembed, d, V,
                   tr.logits.data() + static_cast<size_t>(t) * V);
  if (mods.deep_capture) tr.z_final = z;
  if (mods.stamp_params_hash) tr.params_hash = hash_params(p);
  return tr;
}

template <class Real>
TraceT<Real> forward(const ParamsT<Real>& p, std::span<const int> tokens) {
  return forward(p, tokens, ForwardModsT<Real>{});
}

// Position t's next-token distribution when the route at (t, block) is forced
// to `route_indices`, recomputing only position t through the blocks above and
// reusing cached keys/values of earlier positions. params_hash must equal the
// trace's stamp (compute it once per batch of interventions).
template <class Real>
std::vector<Real> intervene_cached(const ParamsT<Real>& p, uint64_t params_hash,
                                   const TraceT<Real>& trace, int t, int block,
                                   const std::vector<int>& route_indices) {
  const ModelConfig& cfg = p.cfg;
  int L = trace.length(), d = cfg.width, V = cfg.vocab_size;
  if (trace.params_hash == 0)
    throw TraceMismatch("intervene: trace was recorded without a params stamp");
  if (trace.params_hash != params_hash)
    throw TraceMismatch("intervene: trace does not match current params");
  if (t < 0 || t >= L) throw InvalidInput("intervene: position out of range");
  if (block < 0 || block >= cfg.blocks) throw InvalidInput("intervene: block out of range");

  const BlockTraceT<Real>& bt0 = trace.blocks[static_cast<size_t>(block)];
  auto moe = detail::moe_eval<Real>(cfg, p.blocks[static_cast<size_t>(block)],
                              bt0.moe_input.data() + static_cast<size_t>(t) * d, &route_indices,
                              nullptr, nullptr, nullptr, nullptr);
  std::vector<Real> z(static_cast<size_t>(d));
  {
    const Real* resid = bt0.moe_resid.data() + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) z[static_cast<size_t>(i)] = resid[i] + moe.out[static_cast<size_t>(i)];
  }
  std::vector<Real> a(static_cast<size_t>(d)), qv(static_cast<size_t>(d)),
      kown(static_cast<size_t>(d)), vown(static_cast<size_t>(d)), mix(static_cast<size_t>(d)),
      o(static_cast<size_t>(d)), z2(static_cast<size_t>(d)), u(static_cast<size_t>(d));
  for (int b = block + 1; b < cfg.blocks; ++b) {
    const BlockParamsT<Real>& bp = p.blocks[static_cast<size_t>(b)];
    const BlockTraceT<Real>& bt = trace.blocks[static_cast<size_t>(b)];
    const Real* z2p;
    if (cfg.attention_enabled) {
      detail::rmsnorm(z.data(), bp.norm_attn_gain, d, a.data());
      detail::vecmat(a.data(), bp.attn_wq, d, d, qv.data());
      detail::vecmat(a.data(), bp.attn_wk, d, d, kown.data());
      detail::vecmat(a.data(), bp.attn_wv, d, d, vown.data());
      detail::attention_at<Real>(t, qv.data(), bt.keys.data(), bt.values.data(), t, kown.data(),
                           vown.data(), d, mix.data(), nullptr);
      detail::vecmat(mix.data(), bp.attn_wo, d, d, o.data());
      for (int i = 0; i < d; ++i) z2[static_cast<size_t>(i)] = z[static_cast<size_t>(i)] + o[static_cast<size_t>(i)];
      z2p = z2.data();
    } else {
      z2p = z.data();
    }
    detail::rmsnorm(z2p, bp.norm_moe_gain, d, u.data());
    auto m2 = detail::moe_eval<Real>(cfg, bp, u.data(), nullptr, nullptr, nullptr, nullptr, nullptr);
    for (int i = 0; i < d; ++i) z[static_cast<size_t>(i)] = z2p[i] + m2.out[static_cast<size_t>(i)];
  }
  std::vector<Real> logits(static_cast<size_t>(V));
  detail::vecmat(z.data(), p.unembed, d, V, logits.data());
  return softmax<Real>(logits);
}

template <class Real>
std::vector<Real> forward_with_intervention(const ParamsT<Real>& p, const TraceT<Real>& trace,
                                            int t, int block,
                                            const std::vector<int>& route_indices) {
  return intervene_cached(p, hash_params(p), trace, t, block, route_indices);
}

template <class Real>
struct BackwardOptionsT {
  // Extra gradient added to every position's router scores, flattened
  // [block][position][expert]; used to inject auxiliary-loss terms.
  std::span<const Real> router_score_grad = {};
  // Divisor for the cross-entropy term; 0 means this call's own masked count.
  double loss_denom = 0.0;
  // When set, receives the final per-position router-score gradient (after
  // any injected extra term), flattened [block][position][expert].
  std::vector<Real>* capture_score_grad = nullptr;
};

template <class Real>
struct BackwardResultT {
  ParamsT<Real> grads;
  double loss = 0.0;   // summed masked cross-entropy / divisor
  long masked = 0;
  bool empty_mask = false;
};

// Gradients of mean next-token cross-entropy over masked positions, with the
// top-k selection held fixed: gate gradients reach router scores through the
// restricted softmax only, so unselected experts' scores get exactly zero
// from the LM term.
template <class Real>
BackwardResultT<Real> backward(const ParamsT<Real>& p, std::span<const int> tokens,
                               std::span<const int> targets, std::span<const uint8_t> mask,
                               const BackwardOptionsT<Real>& opts = {}) {
  const ModelConfig& cfg = p.cfg;
  int L = static_cast<int>(tokens.size());
  int d = cfg.width, N = cfg.experts_per_layer, k = cfg.active_experts;
  int H = cfg.expert_hidden, V = cfg.vocab_size, S = cfg.shared_experts;
  int slots = k + S;
  if (static_cast<int>(targets.size()) != L || static_cast<int>(mask.size()) != L)
    throw InvalidInput("backward: targets/mask must align with tokens");
  if (!opts.router_score_grad.empty() &&
      static_cast<int>(opts.router_score_grad.size()) != cfg.blocks * L * N)
    throw InvalidInput("backward: router_score_grad has wrong size");

  ForwardModsT<Real> mods;
  mods.deep_capture = true;
  mods.stamp_params_hash = false;
  TraceT<Real> tr = forward(p, tokens, mods);

  BackwardResultT<Real> res;
  res.grads = zeros_like(p);
  for (int t = 0; t < L; ++t)
    if (mask[static_cast<size_t>(t)]) {
      if (targets[static_cast<size_t>(t)] < 0 || targets[static_cast<size_t>(t)] >= V)
        throw InvalidInput("backward: target id out of range at position " + std::to_string(t));
      ++res.masked;
    }
  res.empty_mask = res.masked == 0;
  double denom = opts.loss_denom > 0 ? opts.loss_denom : static_cast<double>(res.masked);
  if (opts.capture_score_grad)
    opts.capture_score_grad->assign(static_cast<size_t>(cfg.blocks) * L * N, Real(0));
  if (res.empty_mask && opts.router_score_grad.empty()) return res;

  size_t ld = static_cast<size_t>(L) * d;
  std::vector<Real> dz(ld, Real(0));
  double loss_sum = 0.0;

  if (res.masked > 0) {
    std::vector<Real> dlogit(static_cast<size_t>(V));
    for (int t = 0; t < L; ++t) {
      if (!mask[static_cast<size_t>(t)]) continue;
      int y = targets[static_cast<size_t>(t)];
      std::span<const Real> row(tr.logits.data() + static_cast<size_t>(t) * V,
                                static_cast<size_t>(V));
      std::vector<Real> probs = softmax<Real>(row);
      loss_sum += -std::log(static_cast<double>(probs[static_cast<size_t>(y)]));
      for (int v = 0; v < V; ++v) {
        double ind = v == y ? 1.0 : 0.0;
        dlogit[static_cast<size_t>(v)] =
            static_cast<Real>((static_cast<double>(probs[static_cast<size_t>(v)]) - ind) / denom);
      }
      const Real* zt = tr.z_final.data() + static_cast<size_t>(t) * d;
      Real* dzt = dz.data() + static_cast<size_t>(t) * d;
      for (int r = 0; r < d; ++r) {
        Real* gu = res.grads.unembed.data() + static_cast<size_t>(r) * V;
        const Real* wu = p.unembed.data() + static_cast<size_t>(r) * V;
        Real acc = Real(0);
        for (int v = 0; v < V; ++v) {
          gu[v] += zt[r] * dlogit[static_cast<size_t>(v)];
          acc += wu[v] * dlogit[static_cast<size_t>(v)];
        }
        dzt[r] += acc;
      }
    }
  }

  std::vector<Real> dz2(ld), dzin(ld), da(ld), dk(ld), dv(ld);
  std::vector<Real> du(static_cast<size_t>(d)), dmoe_buf(static_cast<size_t>(d)),
      ds(static_cast<size_t>(N)), dgate(static_cast<size_t>(k)), datt(static_cast<size_t>(d)),
      dq(static_cast<size_t>(d));

  for (int b = cfg.blocks - 1; b >= 0; --b) {
    const BlockParamsT<Real>& bp = p.blocks[static_cast<size_t>(b)];
    const BlockTraceT<Real>& bt = tr.blocks[static_cast<size_t>(b)];
    BlockParamsT<Real>& gb = res.grads.blocks[static_cast<size_t>(b)];

    for (int t = 0; t < L; ++t) {
      const Real* dznext = dz.data() + static_cast<size_t>(t) * d;
      const Real* ut = bt.moe_input.data() + static_cast<size_t>(t) * d;
      const RouteT<Real>& route = bt.routes[static_cast<size_t>(t)];
      std::fill(du.begin(), du.end(), Real(0));
      for (int s = 0; s < S; ++s) {
        int slot = k + s;
        detail::expert_backward(bp.shared[static_cast<size_t>(s)], d, H, ut,
                                bt.hidden.data() + (static_cast<size_t>(t) * slots + slot) * H,
                                dznext, gb.shared[static_cast<size_t>(s)], du.data());
      }
      for (int i = 0; i < k; ++i) {
        int e = route.experts[static_cast<size_t>(i)];
        Real g = route.gates[static_cast<size_t>(i)];
        for (int c = 0; c < d; ++c) dmoe_buf[static_cast<size_t>(c)] = g * dznext[c];
        detail::expert_backward(bp.experts[static_cast<size_t>(e)], d, H, ut,
                                bt.hidden.data() + (static_cast<size_t>(t) * slots + i) * H,
                                dmoe_buf.data(), gb.experts[static_cast<size_t>(e)], du.data());
        dgate[static_cast<size_t>(i)] = detail::dot(
            dznext, bt.outs.data() + (static_cast<size_t>(t) * slots + i) * d, d);
      }
      // Restricted-softmax backward; identical to the executed-route router
      // gradient g_j (dC/dh . (E_j(x) - h_routed)) on the selected set.
      Real common = Real(0);
      for (int i = 0; i < k; ++i)
        common += route.gates[static_cast<size_t>(i)] * dgate[static_cast<size_t>(i)];
      std::fill(ds.begin(), ds.end(), Real(0));
      for (int i = 0; i < k; ++i)
        ds[static_cast<size_t>(route.experts[static_cast<size_t>(i)])] =
            route.gates[static_cast<size_t>(i)] * (dgate[static_cast<size_t>(i)] - common);
      if (!opts.router_score_grad.empty()) {
        const Real* extra =
            opts.router_score_grad.data() + (static_cast<size_t>(b) * L + t) * N;
        for (int j = 0; j < N; ++j) ds[static_cast<size_t>(j)] += extra[j];
      }
      if (opts.capture_score_grad)
        std::memcpy(opts.capture_score_grad->data() + (static_cast<size_t>(b) * L + t) * N,
                    ds.data(), sizeof(Real) * N);
      for (int e = 0; e < N; ++e) {
        Real dse = ds[static_cast<size_t>(e)];
        gb.router_b[static_cast<size_t>(e)] += dse;
        if (dse != Real(0)) {
          Real* gwr = gb.router_w.data() + static_cast<size_t>(e) * d;
          const Real* wr = bp.router_w.data() + static_cast<size_t>(e) * d;
          for (int c = 0; c < d; ++c) {
            gwr[c] += dse * ut[c];
            du[static_cast<size_t>(c)] += dse * wr[c];
          }
        }
      }
      Real* dz2t = dz2.data() + static_cast<size_t>(t) * d;
      std::memcpy(dz2t, dznext, sizeof(Real) * d);
      detail::rmsnorm_backward(bt.moe_resid.data() + static_cast<size_t>(t) * d,
                               bp.norm_moe_gain, d, du.data(), dz2t, gb.norm_moe_gain.data());
    }

    std::fill(dzin.begin(), dzin.end(), Real(0));
    if (cfg.attention_enabled) {
      std::fill(da.begin(), da.end(), Real(0));
      std::fill(dk.begin(), dk.end(), Real(0));
      std::fill(dv.begin(), dv.end(), Real(0));
      for (int t = 0; t < L; ++t) {
        const Real* dz2t = dz2.data() + static_cast<size_t>(t) * d;
        Real* dzint = dzin.data() + static_cast<size_t>(t) * d;
        for (int i = 0; i < d; ++i) dzint[i] += dz2t[i];
        const Real* mixt = bt.att_mix.data() + static_cast<size_t>(t) * d;
        for (int r = 0; r < d; ++r) {
          Real* gwo = gb.attn_wo.data() + static_cast<size_t>(r) * d;
          const Real* wo = bp.attn_wo.data() + static_cast<size_t>(r) * d;
          Real acc = Real(0);
          for (int c = 0; c < d; ++c) {
            gwo[c] += mixt[r] * dz2t[c];
            acc += wo[c] * dz2t[c];
          }
          datt[static_cast<size_t>(r)] = acc;
        }
        const Real* pr = bt.att.data() + static_cast<size_t>(t) * L;
        Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d)));
        const Real* qt = bt.q.data() + static_cast<size_t>(t) * d;
        Real common = Real(0);
        std::vector<Real> dalpha(static_cast<size_t>(t) + 1);
        for (int j = 0; j <= t; ++j) {
          const Real* vj = bt.values.data() + static_cast<size_t>(j) * d;
          dalpha[static_cast<size_t>(j)] = detail::dot(datt.data(), vj, d);
          Real* dvj = dv.data() + static_cast<size_t>(j) * d;
          Real pj = pr[j];
          for (int i = 0; i < d; ++i) dvj[i] += pj * datt[static_cast<size_t>(i)];
          common += pj * dalpha[static_cast<size_t>(j)];
        }
        std::fill(dq.begin(), dq.end(), Real(0));
        for (int j = 0; j <= t; ++j) {
          Real dsc = pr[j] * (dalpha[static_cast<size_t>(j)] - common) * scale;
          if (dsc == Real(0)) continue;
          const Real* kj = bt.keys.data() + static_cast<size_t>(j) * d;
          Real* dkj = dk.data() + static_cast<size_t>(j) * d;
          for (int i = 0; i < d; ++i) {
            dq[static_cast<size_t>(i)] += dsc * kj[i];
            dkj[i] += dsc * qt[i];
          }
        }
        const Real* at = bt.normed_attn.data() + static_cast<size_t>(t) * d;
        Real* dat = da.data() + static_cast<size_t>(t) * d;
        for (int r = 0; r < d; ++r) {
          Real* gwq = gb.attn_wq.data() + static_cast<size_t>(r) * d;
          const Real* wq = bp.attn_wq.data() + static_cast<size_t>(r) * d;
          Real acc = Real(0);
          for (int c = 0; c < d; ++c) {
            gwq[c] += at[r] * dq[static_cast<size_t>(c)];
            acc += wq[c] * dq[static_cast<size_t>(c)];
          }
          dat[r] += acc;
        }
      }
      for (int t = 0; t < L; ++t) {
        const Real* at = bt.normed_attn.data() + static_cast<size_t>(t) * d;
        const Real* dkt = dk.data() + static_cast<size_t>(t) * d;
        const Real* dvt = dv.data() + static_cast<size_t>(t) * d;
        Real* dat = da.data() + static_cast<size_t>(t) * d;
        for (int r = 0; r < d; ++r) {
          Real* gwk = gb.attn_wk.data() + static_cast<size_t>(r) * d;
          const Real* wk = bp.attn_wk.data() + static_cast<size_t>(r) * d;
          Real* gwv = gb.attn_wv.data() + static_cast<size_t>(r) * d;
          const Real* wv = bp.attn_wv.data() + static_cast<size_t>(r) * d;
          Real acck = Real(0), accv = Real(0);
          for (int c = 0; c < d; ++c) {
            gwk[c] += at[r] * dkt[c];
            acck += wk[c] * dkt[c];
            gwv[c] += at[r] * dvt[c];
            accv += wv[c] * dvt[c];
          }
          dat[r] += acck + accv;
        }
        detail::rmsnorm_backward(bt.x_in.data() + static_cast<size_t>(t) * d, bp.norm_attn_gain,
                                 d, da.data() + static_cast<size_t>(t) * d,
                                 dzin.data() + static_cast<size_t>(t) * d,
                                 gb.norm_attn_gain.data());
      }
    } else {
      for (size_t i = 0; i < ld; ++i) dzin[i] += dz2[i];
    }
    dz.swap(dzin);
  }

  for (int t = 0; t < L; ++t) {
    const Real* dzt = dz.data() + static_cast<size_t>(t) * d;
    Real* gt = res.grads.tok_embed.data() +
               static_cast<size_t>(tokens[static_cast<size_t>(t)]) * d;
    Real* gp = res.grads.pos_embed.data() + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) {
      gt[i] += dzt[i];
      gp[i] += dzt[i];
    }
  }
  res.loss = res.masked > 0 ? loss_sum / denom : 0.0;
  return res;
}

template <class Real>
BackwardResultT<Real> backward(const ParamsT<Real>& p, const TraceT<Real>& trace,
                               std::span<const int> targets, std::span<const uint8_t> mask,
                               const BackwardOptionsT<Real>& opts = {}) {
  return backward(p, std::span<const int>(trace.tokens), targets, mask, opts);
}

}  // namespace moelab
