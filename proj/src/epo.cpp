#include "moelab/epo.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <utility>

#include "json.hpp"
#include "moelab/counterfactual.hpp"
#include "moelab/numerics.hpp"
#include "moelab/pretrain.hpp"

namespace moelab {

void EpoConfig::validate() const {
  if (layer < -1) throw InvalidConfig("EpoConfig: layer must be -1 or a block index");
  if (alternatives < 1) throw InvalidConfig("EpoConfig: alternatives must be >= 1");
  if (pool_size < 1) throw InvalidConfig("EpoConfig: pool_size must be >= 1");
  if (!(noise_scale > 0)) throw InvalidConfig("EpoConfig: noise_scale must be > 0");
  if (!(beta > 0)) throw InvalidConfig("EpoConfig: beta must be > 0");
  if (!(lr > 0)) throw InvalidConfig("EpoConfig: lr must be > 0");
  if (weight_decay < 0) throw InvalidConfig("EpoConfig: weight_decay must be >= 0");
  if (grad_clip < 0) throw InvalidConfig("EpoConfig: grad_clip must be >= 0");
  if (batch_size < 1) throw InvalidConfig("EpoConfig: batch_size must be >= 1");
  if (epochs < 1) throw InvalidConfig("EpoConfig: epochs must be >= 1");
  if (threads < 1) throw InvalidConfig("EpoConfig: threads must be >= 1");
}

int EpoConfig::resolve_layer(const ModelConfig& cfg) const {
  int l = layer < 0 ? cfg.blocks - 1 : layer;
  if (l < 0 || l >= cfg.blocks) throw InvalidConfig("EpoConfig: layer out of range");
  return l;
}

namespace {

double log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

template <class Real>
double inner_margin(double beta, std::span<const int> chosen, std::span<const int> rejected,
                    std::span<const Real> theta_scores, std::span<const Real> ref_scores) {
  return beta * ((route_log_prob(theta_scores, chosen) - route_log_prob(ref_scores, chosen)) -
                 (route_log_prob(theta_scores, rejected) - route_log_prob(ref_scores, rejected)));
}

// CE of the realized next token from a probability row; guards log(0).
double realized_ce(const float* dist, int target) {
  double p = std::max(static_cast<double>(dist[static_cast<size_t>(target)]),
                      std::numeric_limits<double>::min());
  return -std::log(p);
}

// Per-position realized-token CE over the masked positions of a trace.
std::vector<std::pair<int, double>> masked_ces(const Trace& trace, std::span<const int> targets,
                                               std::span<const uint8_t> mask, int vocab) {
  std::vector<std::pair<int, double>> out;
  std::vector<float> row(static_cast<size_t>(vocab));
  for (int t = 0; t < trace.length(); ++t) {
    if (!mask[static_cast<size_t>(t)]) continue;
    const float* lg = trace.logits.data() + static_cast<size_t>(t) * vocab;
    std::copy(lg, lg + vocab, row.begin());
    auto probs = softmax<float>(row);
    out.emplace_back(t, realized_ce(probs.data(), targets[static_cast<size_t>(t)]));
  }
  return out;
}

bool lex_less(const std::vector<int>& a, const std::vector<int>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace

template <class Real>
double route_log_prob(std::span<const Real> scores, std::span<const int> route) {
  auto lp = log_softmax<Real>(scores);
  double sum = 0.0;
  for (int e : route) {
    if (e < 0 || e >= static_cast<int>(scores.size()))
      throw InvalidRoute("route_log_prob: expert index out of range");
    sum += static_cast<double>(lp[static_cast<size_t>(e)]);
  }
  return sum;
}

template double route_log_prob<float>(std::span<const float>, std::span<const int>);
template double route_log_prob<double>(std::span<const double>, std::span<const int>);

template <class Real>
double epo_loss(double delta, std::span<const int> chosen, std::span<const int> rejected,
                std::span<const Real> theta_scores, std::span<const Real> ref_scores,
                double beta) {
  if (chosen.size() != rejected.size())
    throw InvalidRoute("epo_loss: chosen and rejected must have equal cardinality");
  return -delta * log_sigmoid(inner_margin(beta, chosen, rejected, theta_scores, ref_scores));
}

template double epo_loss<float>(double, std::span<const int>, std::span<const int>,
                                std::span<const float>, std::span<const float>, double);
template double epo_loss<double>(double, std::span<const int>, std::span<const int>,
                                 std::span<const double>, std::span<const double>, double);

template <class Real>
std::vector<double> epo_score_grad(double delta, std::span<const int> chosen,
                                   std::span<const int> rejected,
                                   std::span<const Real> theta_scores,
                                   std::span<const Real> ref_scores, double beta) {
  if (chosen.size() != rejected.size())
    throw InvalidRoute("epo_score_grad: chosen and rejected must have equal cardinality");
  double inner = inner_margin(beta, chosen, rejected, theta_scores, ref_scores);
  double sig = 1.0 / (1.0 + std::exp(-inner));
  double coef = -delta * beta * (1.0 - sig);
  std::vector<double> g(theta_scores.size(), 0.0);
  for (int e : chosen) g[static_cast<size_t>(e)] += coef;
  for (int e : rejected) g[static_cast<size_t>(e)] -= coef;
  return g;
}

template std::vector<double> epo_score_grad<float>(double, std::span<const int>,
                                                   std::span<const int>, std::span<const float>,
                                                   std::span<const float>, double);
template std::vector<double> epo_score_grad<double>(double, std::span<const int>,
                                                    std::span<const int>, std::span<const double>,
                                                    std::span<const double>, double);

template <class Real>
RouterGrad epo_grad(double delta, std::span<const int> chosen, std::span<const int> rejected,
                    std::span<const Real> theta_scores, std::span<const Real> ref_scores,
                    double beta, std::span<const Real> u_t) {
  auto ds = epo_score_grad(delta, chosen, rejected, theta_scores, ref_scores, beta);
  int N = static_cast<int>(ds.size()), d = static_cast<int>(u_t.size());
  RouterGrad g;
  g.dw.assign(static_cast<size_t>(N) * d, 0.0);
  g.db = ds;
  for (int j = 0; j < N; ++j) {
    if (ds[static_cast<size_t>(j)] == 0.0) continue;
    double* row = g.dw.data() + static_cast<size_t>(j) * d;
    for (int c = 0; c < d; ++c)
      row[c] = ds[static_cast<size_t>(j)] * static_cast<double>(u_t[static_cast<size_t>(c)]);
  }
  return g;
}

template RouterGrad epo_grad<float>(double, std::span<const int>, std::span<const int>,
                                    std::span<const float>, std::span<const float>, double,
                                    std::span<const float>);
template RouterGrad epo_grad<double>(double, std::span<const int>, std::span<const int>,
                                     std::span<const double>, std::span<const double>, double,
                                     std::span<const double>);

std::vector<int> find_hard_tokens(const Params& params, const Trajectory& trajectory,
                                  double tau, std::vector<double>* ces) {
  if (!trajectory.verified) throw InvalidInput("find_hard_tokens: trajectory is not verified");
  auto seq = trajectory.sequence();
  auto [targets, mask] = response_prediction_targets(trajectory);
  ForwardMods mods;
  mods.stamp_params_hash = false;
  Trace trace = forward(params, seq, mods);
  std::vector<int> hard;
  if (ces) ces->clear();
  for (auto& [t, ce] : masked_ces(trace, targets, mask, params.cfg.vocab_size)) {
    if (ce > tau) {
      hard.push_back(t);
      if (ces) ces->push_back(ce);
    }
  }
  return hard;
}

std::optional<PreferencePair> build_preference(const Params& params, uint64_t params_hash,
                                               const Trace& trace, int t, int layer,
                                               const RouterRef& ref, const EpoConfig& cfg,
                                               Rng rng) {
  const ModelConfig& mc = params.cfg;
  int d = mc.width, N = mc.experts_per_layer, k = mc.active_experts;
  if (t < 0 || t + 1 >= trace.length())
    throw InvalidInput("build_preference: position has no realized next token");
  int target = trace.tokens[static_cast<size_t>(t) + 1];
  const auto& bt = trace.blocks[static_cast<size_t>(layer)];
  std::span<const float> scores(bt.scores.data() + static_cast<size_t>(t) * N,
                                static_cast<size_t>(N));

  const Route& rejected = bt.routes[static_cast<size_t>(t)];
  std::vector<float> row(trace.logits.data() + static_cast<size_t>(t) * mc.vocab_size,
                         trace.logits.data() + static_cast<size_t>(t + 1) * mc.vocab_size);
  auto std_probs = softmax<float>(row);
  double ce_std = realized_ce(std_probs.data(), target);

  auto pool = build_pool(scores, std::min(cfg.pool_size, N), k);
  auto alts = sample_alternatives(scores, pool, k, cfg.alternatives, rng, cfg.noise_scale);

  double best_ce = std::numeric_limits<double>::infinity();
  const Route* best = nullptr;
  for (const Route& alt : alts) {
    double ce;
    if (alt.same_experts(rejected)) {
      ce = ce_std;  // identical route replays bit-exactly
    } else {
      auto dist = intervene_cached(params, params_hash, trace, t, layer, alt.experts);
      ce = realized_ce(dist.data(), target);
    }
    if (ce < best_ce || (ce == best_ce && best && lex_less(alt.experts, best->experts))) {
      best_ce = ce;
      best = &alt;
    }
  }
  if (!best || !(best_ce < ce_std)) return std::nullopt;

  PreferencePair pair;
  pair.t = t;
  pair.rejected = rejected;
  pair.chosen = *best;
  pair.ce_gap = ce_std - best_ce;
  pair.ref_scores.resize(static_cast<size_t>(N));
  const float* u_t = bt.moe_input.data() + static_cast<size_t>(t) * d;
  detail::matvec(ref.w, N, d, u_t, pair.ref_scores.data());
  for (int j = 0; j < N; ++j) pair.ref_scores[static_cast<size_t>(j)] += ref.b[static_cast<size_t>(j)];
  return pair;
}

EpoResult epo_train(const Params& init, const std::vector<Trajectory>& trajectories,
                    const EpoConfig& cfg) {
  cfg.validate();
  init.cfg.validate();
  int layer = cfg.resolve_layer(init.cfg);
  for (const auto& traj : trajectories)
    if (!traj.verified) throw InvalidInput("epo_train: all trajectories must be verified");

  EpoResult res;
  res.params = init;
  Params& params = res.params;
  const ModelConfig& mc = params.cfg;
  int d = mc.width, N = mc.experts_per_layer;

  RouterRef ref{params.blocks[static_cast<size_t>(layer)].router_w,
                params.blocks[static_cast<size_t>(layer)].router_b};

  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  std::vector<std::vector<float>*> opt_params = {
      &params.blocks[static_cast<size_t>(layer)].router_w,
      &params.blocks[static_cast<size_t>(layer)].router_b};
  AdamW<float> opt(ocfg, opt_params);

  struct Selection {
    size_t traj;
    int t;
  };
  std::vector<Selection> selections;
  std::vector<double> selection_ce;

  Rng root(cfg.seed);
  int64_t step = 0;
  size_t T = trajectories.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = root.child(static_cast<uint64_t>(epoch));
    for (size_t begin = 0; begin < T; begin += static_cast<size_t>(cfg.batch_size)) {
      size_t end = std::min(T, begin + static_cast<size_t>(cfg.batch_size));
      ++step;
      uint64_t ph = hash_params(params);

      struct Job {
        size_t local;  // trace index within the batch
        size_t traj;   // index into trajectories
        int t;
      };
      std::vector<Trace> traces;
      traces.reserve(end - begin);
      std::vector<Job> jobs;
      for (size_t i = begin; i < end; ++i) {
        const Trajectory& traj = trajectories[i];
        auto seq = traj.sequence();
        auto [targets, mask] = response_prediction_targets(traj);
        ForwardMods mods;
        mods.stamp_params_hash = false;
        Trace trace = forward(params, seq, mods);
        trace.params_hash = ph;
        size_t local = traces.size();
        for (auto& [t, ce] : masked_ces(trace, targets, mask, mc.vocab_size)) {
          if (ce <= cfg.tau) continue;
          jobs.push_back({local, i, t});
          selections.push_back({i, t});
          selection_ce.push_back(ce);
        }
        traces.push_back(std::move(trace));
      }

      std::vector<std::optional<PreferencePair>> pairs(jobs.size());
      parallel_for(static_cast<int64_t>(jobs.size()), cfg.threads, [&](int64_t j) {
        const Job& jb = jobs[static_cast<size_t>(j)];
        Rng rng = epoch_rng.child(static_cast<uint64_t>(trajectories[jb.traj].problem_id))
                      .child(static_cast<uint64_t>(jb.t));
        pairs[static_cast<size_t>(j)] =
            build_preference(params, ph, traces[jb.local], jb.t, layer, ref, cfg, rng);
      });

      std::vector<double> dw(static_cast<size_t>(N) * d, 0.0);
      std::vector<double> db(static_cast<size_t>(N), 0.0);
      int built = 0, skipped = 0;
      double sum_delta = 0.0, sum_loss = 0.0;
      for (size_t j = 0; j < jobs.size(); ++j) {
        if (!pairs[j]) {
          ++skipped;
          continue;
        }
        const PreferencePair& pair = *pairs[j];
        const auto& bt = traces[jobs[j].local].blocks[static_cast<size_t>(layer)];
        std::span<const float> theta(bt.scores.data() + static_cast<size_t>(pair.t) * N,
                                     static_cast<size_t>(N));
        std::span<const float> refs(pair.ref_scores);
        std::span<const float> u(bt.moe_input.data() + static_cast<size_t>(pair.t) * d,
                                 static_cast<size_t>(d));
        sum_loss += epo_loss(pair.ce_gap, pair.chosen.experts, pair.rejected.experts, theta,
                             refs, cfg.beta);
        sum_delta += pair.ce_gap;
        RouterGrad g = epo_grad(pair.ce_gap, pair.chosen.experts, pair.rejected.experts, theta,
                                refs, cfg.beta, u);
        for (size_t c = 0; c < dw.size(); ++c) dw[c] += g.dw[c];
        for (size_t c = 0; c < db.size(); ++c) db[c] += g.db[c];
        ++built;
      }

      if (built > 0) {
        std::vector<float> gw(dw.size()), gb(db.size());
        for (size_t c = 0; c < dw.size(); ++c) gw[c] = static_cast<float>(dw[c] / built);
        for (size_t c = 0; c < db.size(); ++c) gb[c] = static_cast<float>(db[c] / built);
        opt.step(opt_params, {&gw, &gb}, cfg.grad_clip);
      }
      res.log.push_back({step, built, skipped, built ? sum_delta / built : 0.0,
                         built ? sum_loss / built : 0.0});
    }
  }

  // Router-only reachability: anything outside the target router moving is a bug.
  Params baseline = init;
  auto before = tensor_refs(baseline);
  auto after = tensor_refs(params);
  std::string wname = "blocks." + std::to_string(layer) + ".router_w";
  std::string bname = "blocks." + std::to_string(layer) + ".router_b";
  for (size_t i = 0; i < before.size(); ++i) {
    if (before[i].data->size() != after[i].data->size())
      throw InternalInvariant("epo_train: tensor shape changed: " + before[i].name);
    if (std::memcmp(before[i].data->data(), after[i].data->data(),
                    before[i].data->size() * sizeof(float)) != 0) {
      if (before[i].name != wname && before[i].name != bname)
        throw InternalInvariant("epo_train: non-router tensor modified: " + before[i].name);
      res.changed_tensors.push_back(before[i].name);
    }
  }

  // Re-score the epoch's hard tokens under the updated router.
  res.hard_tokens = static_cast<int64_t>(selections.size());
  if (!selections.empty()) {
    double sum_before = 0.0;
    for (double ce : selection_ce) sum_before += ce;
    res.hard_ce_before = sum_before / static_cast<double>(selection_ce.size());

    double sum_after = 0.0;
    size_t cursor = 0;
    while (cursor < selections.size()) {
      size_t traj = selections[cursor].traj;
      auto seq = trajectories[traj].sequence();
      ForwardMods mods;
      mods.stamp_params_hash = false;
      Trace trace = forward(params, seq, mods);
      std::vector<float> row(static_cast<size_t>(mc.vocab_size));
      for (; cursor < selections.size() && selections[cursor].traj == traj; ++cursor) {
        int t = selections[cursor].t;
        const float* lg = trace.logits.data() + static_cast<size_t>(t) * mc.vocab_size;
        std::copy(lg, lg + mc.vocab_size, row.begin());
        auto probs = softmax<float>(row);
        sum_after += realized_ce(probs.data(), seq[static_cast<size_t>(t) + 1]);
      }
    }
    res.hard_ce_after = sum_after / static_cast<double>(selections.size());
  }
  return res;
}

void save_epo_log(const std::string& path, std::span<const EpoLogRecord> log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("save_epo_log: cannot open " + path);
  for (const auto& r : log) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["pairs_built"] = r.pairs_built;
    j["pairs_skipped"] = r.pairs_skipped;
    j["mean_delta"] = r.mean_delta;
    j["mean_loss"] = r.mean_loss;
    out << j.dump() << "\n";
  }
}

}  // namespace moelab
