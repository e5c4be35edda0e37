#include "moelab/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "moelab/numerics.hpp"

namespace moelab {

void RoutingBatchStats::validate() const {
  if (slot_fraction.size() != mean_prob.size() || slot_fraction.empty())
    throw InvalidInput("RoutingBatchStats: f and p-bar must be non-empty and aligned");
  if (tokens < 1) throw InvalidInput("RoutingBatchStats: token count must be >= 1");
  if (k < 1) throw InvalidInput("RoutingBatchStats: k must be >= 1");
  double sf = 0.0, sp = 0.0;
  for (size_t i = 0; i < slot_fraction.size(); ++i) {
    if (slot_fraction[i] < 0.0 || slot_fraction[i] > 1.0 || mean_prob[i] < 0.0 ||
        mean_prob[i] > 1.0)
      throw InvalidInput("RoutingBatchStats: entries must lie in [0,1]");
    sf += slot_fraction[i];
    sp += mean_prob[i];
  }
  if (std::abs(sf - 1.0) > 1e-6 || std::abs(sp - 1.0) > 1e-6)
    throw InvalidInput("RoutingBatchStats: f and p-bar must each sum to 1");
}

template <class Real>
LmLoss lm_loss(std::span<const Real> logits, int vocab, std::span<const int> targets,
               std::span<const uint8_t> mask) {
  if (vocab < 1) throw InvalidInput("lm_loss: vocab must be >= 1");
  if (logits.size() != targets.size() * static_cast<size_t>(vocab) ||
      targets.size() != mask.size())
    throw InvalidInput("lm_loss: shape mismatch");
  LmLoss out;
  double sum = 0.0;
  for (size_t t = 0; t < targets.size(); ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || targets[t] >= vocab)
      throw InvalidInput("lm_loss: target id out of range");
    std::span<const Real> row(logits.data() + t * static_cast<size_t>(vocab),
                              static_cast<size_t>(vocab));
    std::vector<Real> ls = log_softmax<Real>(row);
    sum += -static_cast<double>(ls[static_cast<size_t>(targets[t])]);
    ++out.positions;
  }
  out.empty_mask = out.positions == 0;
  out.value = out.empty_mask ? 0.0 : sum / static_cast<double>(out.positions);
  return out;
}

template LmLoss lm_loss<float>(std::span<const float>, int, std::span<const int>,
                               std::span<const uint8_t>);
template LmLoss lm_loss<double>(std::span<const double>, int, std::span<const int>,
                                std::span<const uint8_t>);

double switch_lb_loss(const RoutingBatchStats& stats, double lambda) {
  if (lambda < 0) throw InvalidConfig("switch_lb_loss: lambda must be >= 0");
  stats.validate();
  double s = 0.0;
  for (size_t i = 0; i < stats.slot_fraction.size(); ++i)
    s += stats.slot_fraction[i] * stats.mean_prob[i];
  return lambda * static_cast<double>(stats.slot_fraction.size()) * s;
}

std::vector<double> lb_grad(std::span<const double> p, std::span<const double> f,
                            double lambda, int64_t T) {
  if (p.size() != f.size() || p.empty()) throw InvalidInput("lb_grad: p and f must align");
  if (T < 1) throw InvalidInput("lb_grad: T must be >= 1");
  if (lambda < 0) throw InvalidConfig("lb_grad: lambda must be >= 0");
  double ps = 0.0, pf = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || p[i] > 1.0) throw InvalidInput("lb_grad: p is not a probability vector");
    ps += p[i];
    pf += p[i] * f[i];
  }
  if (std::abs(ps - 1.0) > 1e-6) throw InvalidInput("lb_grad: p must sum to 1");
  double c = lambda * static_cast<double>(p.size()) / static_cast<double>(T);
  std::vector<double> g(p.size());
  for (size_t i = 0; i < p.size(); ++i) g[i] = c * p[i] * (f[i] - pf);
  return g;
}

std::vector<RoutingBatchStats> batch_routing_stats(
    const ModelConfig& cfg, std::span<const Trace> traces,
    std::span<const std::vector<uint8_t>> masks) {
  if (traces.size() != masks.size())
    throw InvalidInput("batch_routing_stats: traces and masks must align");
  int N = cfg.experts_per_layer;
  std::vector<RoutingBatchStats> out(static_cast<size_t>(cfg.blocks));
  for (auto& s : out) {
    s.slot_fraction.assign(static_cast<size_t>(N), 0.0);
    s.mean_prob.assign(static_cast<size_t>(N), 0.0);
    s.k = cfg.active_experts;
  }
  int64_t T = 0;
  for (size_t i = 0; i < traces.size(); ++i) {
    const Trace& tr = traces[i];
    if (masks[i].size() != static_cast<size_t>(tr.length()))
      throw InvalidInput("batch_routing_stats: mask length mismatch");
    for (int t = 0; t < tr.length(); ++t) {
      if (!masks[i][static_cast<size_t>(t)]) continue;
      ++T;
      for (int b = 0; b < cfg.blocks; ++b) {
        const auto& bt = tr.blocks[static_cast<size_t>(b)];
        for (int e : bt.routes[static_cast<size_t>(t)].experts)
          out[static_cast<size_t>(b)].slot_fraction[static_cast<size_t>(e)] += 1.0;
        std::span<const float> row(bt.scores.data() + static_cast<size_t>(t) * N,
                                   static_cast<size_t>(N));
        std::vector<double> srow(row.begin(), row.end());
        std::vector<double> probs = softmax<double>(srow);
        for (int j = 0; j < N; ++j)
          out[static_cast<size_t>(b)].mean_prob[static_cast<size_t>(j)] +=
              probs[static_cast<size_t>(j)];
      }
    }
  }
  if (T == 0) throw InvalidInput("batch_routing_stats: no masked tokens");
  for (auto& s : out) {
    s.tokens = T;
    for (auto& x : s.slot_fraction) x /= static_cast<double>(T) * s.k;
    for (auto& x : s.mean_prob) x /= static_cast<double>(T);
  }
  return out;
}

template <class Real>
void AdamW<Real>::step(const std::vector<std::vector<Real>*>& params,
                       const std::vector<const std::vector<Real>*>& grads, double clip) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw InvalidInput("AdamW::step: tensor list does not match optimizer state");
  double scale = 1.0;
  if (clip > 0) {
    double sq = 0.0;
    for (auto* g : grads)
      for (Real x : *g) sq += static_cast<double>(x) * static_cast<double>(x);
    double norm = std::sqrt(sq);
    if (norm > clip) scale = clip / norm;
  }
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& g = *grads[i];
    auto& m = m_[i];
    auto& v = v_[i];
    if (p.size() != g.size() || p.size() != m.size())
      throw InvalidInput("AdamW::step: tensor size mismatch");
    for (size_t j = 0; j < p.size(); ++j) {
      double gj = static_cast<double>(g[j]) * scale;
      double mj = cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * gj;
      double vj = cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * gj * gj;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      double mhat = mj / bc1;
      double vhat = vj / bc2;
      double upd = mhat / (std::sqrt(vhat) + cfg_.eps) +
                   cfg_.weight_decay * static_cast<double>(p[j]);
      p[j] = static_cast<Real>(static_cast<double>(p[j]) - cfg_.lr * upd);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

namespace {

std::vector<std::vector<float>*> grad_tensor_ptrs(Params& p) {
  std::vector<std::vector<float>*> out;
  for (auto& r : tensor_refs(p)) out.push_back(r.data);
  return out;
}

}  // namespace

TrainResult train(const Params& init, const std::vector<std::vector<int>>& sequences,
                  const TrainConfig& cfg) {
  cfg.validate();
  init.cfg.validate();
  if (sequences.empty()) throw InvalidInput("train: empty corpus");
  for (const auto& s : sequences)
    if (s.size() < 2) throw InvalidInput("train: sequences must have at least 2 tokens");

  TrainResult res;
  res.params = init;
  Params& params = res.params;
  const ModelConfig& mc = params.cfg;
  int N = mc.experts_per_layer;

  auto param_ptrs = grad_tensor_ptrs(params);
  AdamW<float> opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}, param_ptrs);
  Params grad_accum = zeros_like(params);
  auto grad_ptrs = grad_tensor_ptrs(grad_accum);
  std::vector<const std::vector<float>*> grad_cptrs(grad_ptrs.begin(), grad_ptrs.end());

  // Precompute targets/masks once per sequence.
  size_t n = sequences.size();
  std::vector<std::vector<int>> targets(n);
  std::vector<std::vector<uint8_t>> masks(n);
  for (size_t i = 0; i < n; ++i) {
    auto [tg, mk] = lm_targets(std::span<const int>(sequences[i]));
    targets[i] = std::move(tg);
    masks[i] = std::move(mk);
  }

  Rng rng(cfg.seed);
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  size_t cursor = n;  // force initial shuffle

  ForwardModsT<float> fwd_mods;
  fwd_mods.stamp_params_hash = false;

  for (int64_t step = 1; step <= cfg.steps; ++step) {
    std::vector<size_t> batch;
    batch.reserve(static_cast<size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= n) {
        for (size_t i = n; i > 1; --i)
          std::swap(order[i - 1], order[rng.uniform_below(i)]);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }

    std::vector<Trace> traces;
    traces.reserve(batch.size());
    std::vector<std::vector<uint8_t>> batch_masks;
    int64_t T_batch = 0;
    for (size_t idx : batch) {
      traces.push_back(forward(params, std::span<const int>(sequences[idx]), fwd_mods));
      batch_masks.push_back(masks[idx]);
      for (uint8_t m : masks[idx]) T_batch += m;
    }

    auto stats = batch_routing_stats(mc, traces, batch_masks);
    double lb_loss = 0.0;
    for (const auto& s : stats) lb_loss += switch_lb_loss(s, cfg.lambda_lb);
    double max_f = 0.0, min_f = 1.0;
    for (const auto& s : stats)
      for (double f : s.slot_fraction) {
        max_f = std::max(max_f, f);
        min_f = std::min(min_f, f);
      }

    for (auto* g : grad_ptrs) std::fill(g->begin(), g->end(), 0.0f);
    double lm = 0.0;
    Params seq_grads = zeros_like(params);
    std::vector<float> extra;
    for (size_t bi = 0; bi < batch.size(); ++bi) {
      size_t idx = batch[bi];
      const Trace& tr = traces[bi];
      int L = tr.length();
      BackwardOptionsT<float> opts;
      opts.loss_denom = static_cast<double>(T_batch);
      if (cfg.lambda_lb > 0) {
        extra.assign(static_cast<size_t>(mc.blocks) * L * N, 0.0f);
        for (int t = 0; t < L; ++t) {
          if (!masks[idx][static_cast<size_t>(t)]) continue;
          for (int b = 0; b < mc.blocks; ++b) {
            const auto& bt = tr.blocks[static_cast<size_t>(b)];
            std::span<const float> row(bt.scores.data() + static_cast<size_t>(t) * N,
                                       static_cast<size_t>(N));
            std::vector<double> srow(row.begin(), row.end());
            std::vector<double> probs = softmax<double>(srow);
            std::vector<double> g = lb_grad(probs, stats[static_cast<size_t>(b)].slot_fraction,
                                            cfg.lambda_lb, T_batch);
            float* dst = extra.data() + (static_cast<size_t>(b) * L + t) * N;
            for (int j = 0; j < N; ++j) dst[j] = static_cast<float>(g[static_cast<size_t>(j)]);
          }
        }
        opts.router_score_grad = std::span<const float>(extra);
      }
      auto back = backward(params, std::span<const int>(sequences[idx]),
                           std::span<const int>(targets[idx]),
                           std::span<const uint8_t>(masks[idx]), opts);
      lm += back.loss;
      auto src = tensor_refs(back.grads);
      for (size_t ti = 0; ti < grad_ptrs.size(); ++ti) {
        auto& dst = *grad_ptrs[ti];
        const auto& s = *src[ti].data;
        for (size_t j = 0; j < dst.size(); ++j) dst[j] += s[j];
      }
    }

    double total = lm + lb_loss;
    if (!std::isfinite(total)) {
      res.log.push_back({step, lm, lb_loss, max_f, min_f, "non_finite_loss"});
      throw TrainDiverged("train: non-finite loss at step " + std::to_string(step));
    }
    opt.step(param_ptrs, grad_cptrs, cfg.grad_clip);
    res.log.push_back({step, lm, lb_loss, max_f, min_f, ""});
  }
  return res;
}

double mean_sequence_ce(const Params& params, const std::vector<std::vector<int>>& sequences) {
  if (sequences.empty()) throw InvalidInput("mean_sequence_ce: empty corpus");
  ForwardModsT<float> mods;
  mods.stamp_params_hash = false;
  double sum = 0.0;
  int64_t count = 0;
  for (const auto& seq : sequences) {
    Trace tr = forward(params, std::span<const int>(seq), mods);
    auto [tg, mk] = lm_targets(std::span<const int>(seq));
    LmLoss ll = lm_loss<float>(std::span<const float>(tr.logits), params.cfg.vocab_size,
                               std::span<const int>(tg), std::span<const uint8_t>(mk));
    sum += ll.value * static_cast<double>(ll.positions);
    count += ll.positions;
  }
  if (count == 0) throw InvalidInput("mean_sequence_ce: no scorable positions");
  return sum / static_cast<double>(count);
}

void save_train_log(const std::string& path, std::span<const TrainLogRecord> log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InvalidInput("save_train_log: cannot open " + path);
  for (const auto& r : log) {
    nlohmann::ordered_json j{{"step", r.step},   {"lm_loss", r.lm_loss},
                             {"lb_loss", r.lb_loss}, {"max_f", r.max_f},
                             {"min_f", r.min_f}};
    if (!r.event.empty()) j["event"] = r.event;
    out << j.dump() << '\n';
  }
  if (!out) throw InvalidInput("save_train_log: write failed for " + path);
}

namespace {

// Route sets and ReLU patterns of a probe forward, used to detect
// discontinuity crossings between finite-difference probe points.
struct ProbeShape {
  std::vector<int> routes;       // concatenated expert ids per (block, t)
  std::vector<uint8_t> signs;

  bool operator==(const ProbeShape&) const = default;
};

struct Probe {
  double ce = 0.0;
  ProbeShape shape;
  std::vector<std::vector<int>> routes_at_t;  // executed route per block at position t
};

Probe probe_ce(const ParamsT<double>& p, std::span<const int> tokens, int t, int target,
               int nudge_t, int nudge_block, const std::vector<double>& nudge) {
  ForwardModsT<double> mods;
  mods.stamp_params_hash = false;
  std::vector<uint8_t> signs;
  mods.relu_signs = &signs;
  mods.nudge_t = nudge_t;
  mods.nudge_block = nudge_block;
  mods.score_nudge = nudge;
  TraceT<double> tr = forward(p, tokens, mods);
  Probe out;
  for (const auto& bt : tr.blocks) {
    for (const auto& r : bt.routes)
      out.shape.routes.insert(out.shape.routes.end(), r.experts.begin(), r.experts.end());
    out.routes_at_t.push_back(bt.routes[static_cast<size_t>(t)].experts);
  }
  out.shape.signs = std::move(signs);
  int V = p.cfg.vocab_size;
  std::span<const double> row(tr.logits.data() + static_cast<size_t>(t) * V,
                              static_cast<size_t>(V));
  std::vector<double> ls = log_softmax<double>(row);
  out.ce = -ls[static_cast<size_t>(target)];
  return out;
}

}  // namespace

ScoreGradCheck check_score_grads(const ParamsT<double>& params, std::span<const int> tokens, double eps) {
  if (!(eps > 0)) throw InvalidConfig("check_score_grads: eps must be > 0");
  if (tokens.size() < 2) throw InvalidInput("check_score_grads: need at least 2 tokens");
  const ModelConfig& cfg = params.cfg;
  int L = static_cast<int>(tokens.size());
  int N = cfg.experts_per_layer;
  auto [targets, mask] = lm_targets(tokens);

  ScoreGradCheck rep;
  std::vector<double> analytic;
  for (int t = 0; t + 1 < L; ++t) {
    // Analytic per-position score gradient for C_t alone.
    std::vector<uint8_t> one_mask(static_cast<size_t>(L), 0);
    one_mask[static_cast<size_t>(t)] = 1;
    BackwardOptionsT<double> opts;
    opts.capture_score_grad = &analytic;
    backward(params, tokens, std::span<const int>(targets),
             std::span<const uint8_t>(one_mask), opts);

    Probe base = probe_ce(params, tokens, t, targets[static_cast<size_t>(t)], -1, -1, {});
    for (int b = 0; b < cfg.blocks; ++b) {
      const std::vector<int>& base_route = base.routes_at_t[static_cast<size_t>(b)];
      std::vector<double> nudge(static_cast<size_t>(N), 0.0);
      for (int j = 0; j < N; ++j) {
        nudge[static_cast<size_t>(j)] = eps;
        Probe plus = probe_ce(params, tokens, t, targets[static_cast<size_t>(t)], t, b, nudge);
        nudge[static_cast<size_t>(j)] = -eps;
        Probe minus = probe_ce(params, tokens, t, targets[static_cast<size_t>(t)], t, b, nudge);
        nudge[static_cast<size_t>(j)] = 0.0;
        if (!(plus.shape == base.shape) || !(minus.shape == base.shape)) {
          ++rep.skipped;
          continue;
        }
        bool selected =
            std::find(base_route.begin(), base_route.end(), j) != base_route.end();
        if (selected) {
          double fd = (plus.ce - minus.ce) / (2.0 * eps);
          double an = analytic[(static_cast<size_t>(b) * L + t) * N + j];
          double denom = std::max({std::abs(fd), std::abs(an), 1e-5});
          rep.max_rel_err_selected = std::max(rep.max_rel_err_selected,
                                              std::abs(fd - an) / denom);
          ++rep.checked_selected;
        } else {
          double delta = std::max(std::abs(plus.ce - base.ce), std::abs(minus.ce - base.ce));
          rep.max_abs_delta_unselected = std::max(rep.max_abs_delta_unselected, delta);
          ++rep.checked_unselected;
        }
      }
    }
  }
  return rep;
}

}  // namespace moelab
