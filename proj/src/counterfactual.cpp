#include "moelab/counterfactual.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "moelab/numerics.hpp"

namespace moelab {

const char* bin_name(Bin b) {
  switch (b) {
    case Bin::Confident: return "Confident";
    case Bin::Ambiguous: return "Ambiguous";
    case Bin::Fragile: return "Fragile";
  }
  throw InternalInvariant("bin_name: unknown bin");
}

CandidateSummary summarize_candidates(double p_std, std::span<const double> p_alts, double hi,
                                      double lo) {
  if (p_alts.empty()) throw InvalidInput("summarize_candidates: no alternatives");
  CandidateSummary s;
  s.p_best = p_std;
  double sum = 0.0;
  int better = 0;
  for (double p : p_alts) {
    s.p_best = std::max(s.p_best, p);
    sum += p;
    if (p > p_std) ++better;
  }
  s.gap = s.p_best - p_std;
  s.rank = 1 + better;
  s.p_bar = sum / static_cast<double>(p_alts.size());
  s.bin = s.p_bar > hi ? Bin::Confident : (s.p_bar > lo ? Bin::Ambiguous : Bin::Fragile);
  return s;
}

std::vector<int> build_pool(std::span<const float> scores, int m, int k) {
  if (m < k) throw InvalidConfig("build_pool: pool size must be >= k");
  int n = static_cast<int>(scores.size());
  return top_k_indices<float>(scores, std::min(m, n));
}

std::vector<Route> sample_alternatives(std::span<const float> scores, std::span<const int> pool,
                                       int k, int G, Rng& rng, double scale) {
  if (G < 1) throw InvalidConfig("sample_alternatives: G must be >= 1");
  std::vector<Route> out;
  out.reserve(static_cast<size_t>(G));
  for (int g = 0; g < G; ++g)
    out.push_back(make_route<float>(scores, gumbel_top_k<float>(scores, pool, k, rng, scale)));
  return out;
}

TokenRouteReport analyze_token(const Params& params, uint64_t params_hash, const Trace& trace,
                               int64_t trajectory_id, int realized_token, int t, int layer,
                               const AnalysisConfig& cfg, Rng rng) {
  cfg.validate();
  const ModelConfig& mc = params.cfg;
  if (layer < 0 || layer >= mc.blocks) throw InvalidInput("analyze_token: layer out of range");
  if (t < 0 || t >= trace.length()) throw InvalidInput("analyze_token: position out of range");
  if (realized_token < 0 || realized_token >= mc.vocab_size)
    throw InvalidInput("analyze_token: realized token out of range");
  int N = mc.experts_per_layer;
  const auto& bt = trace.blocks[static_cast<size_t>(layer)];
  std::span<const float> scores(bt.scores.data() + static_cast<size_t>(t) * N,
                                static_cast<size_t>(N));
  const Route& std_route = bt.routes[static_cast<size_t>(t)];

  std::span<const float> logits(trace.logits.data() +
                                    static_cast<size_t>(t) * mc.vocab_size,
                                static_cast<size_t>(mc.vocab_size));
  std::vector<float> std_dist = softmax<float>(logits);
  double p_std = static_cast<double>(std_dist[static_cast<size_t>(realized_token)]);

  std::vector<int> pool = build_pool(scores, std::min(cfg.pool_size, N), mc.active_experts);
  std::vector<Route> alts =
      sample_alternatives(scores, pool, mc.active_experts, cfg.alternatives, rng,
                          cfg.noise_scale);

  std::vector<double> p_alts(alts.size());
  for (size_t i = 0; i < alts.size(); ++i) {
    if (alts[i].same_experts(std_route)) {
      // Identity interventions reproduce the standard distribution bit-exactly.
      p_alts[i] = p_std;
      continue;
    }
    std::vector<float> dist =
        intervene_cached(params, params_hash, trace, t, layer, alts[i].experts);
    p_alts[i] = static_cast<double>(dist[static_cast<size_t>(realized_token)]);
  }

  CandidateSummary s = summarize_candidates(p_std, p_alts, cfg.hi, cfg.lo);
  TokenRouteReport r;
  r.trajectory_id = trajectory_id;
  r.t = t;
  r.layer = layer;
  r.p_std = p_std;
  r.p_best = s.p_best;
  r.gap = s.gap;
  r.p_bar = s.p_bar;
  r.rank = s.rank;
  r.bin = s.bin;
  return r;
}

BinSummary aggregate(std::span<const TokenRouteReport> reports, std::span<const int> k_list) {
  if (reports.empty()) throw InvalidInput("aggregate: no reports");
  if (k_list.empty()) throw InvalidInput("aggregate: empty k_list");
  BinSummary out;
  out.total_tokens = static_cast<int64_t>(reports.size());
  out.k_list.assign(k_list.begin(), k_list.end());
  for (Bin b : {Bin::Confident, Bin::Ambiguous, Bin::Fragile}) {
    BinStats s;
    s.topk_pct.assign(k_list.size(), 0.0);
    double sum_std = 0.0, sum_best = 0.0, sum_gap = 0.0;
    std::vector<int64_t> topk(k_list.size(), 0);
    for (const auto& r : reports) {
      if (r.bin != b) continue;
      ++s.count;
      sum_std += r.p_std;
      sum_best += r.p_best;
      sum_gap += r.gap;
      for (size_t i = 0; i < k_list.size(); ++i)
        if (r.rank <= k_list[i]) ++topk[i];
    }
    if (s.count == 0) continue;
    double n = static_cast<double>(s.count);
    s.share_pct = 100.0 * n / static_cast<double>(out.total_tokens);
    for (size_t i = 0; i < k_list.size(); ++i)
      s.topk_pct[i] = 100.0 * static_cast<double>(topk[i]) / n;
    s.mean_p_std_pct = 100.0 * sum_std / n;
    s.mean_p_best_pct = 100.0 * sum_best / n;
    s.mean_gap_pp = 100.0 * sum_gap / n;
    out.bins.emplace_back(b, std::move(s));
  }
  return out;
}

AnalysisResult run_analysis(const Params& params, std::span<const Trajectory> trajectories,
                            const AnalysisConfig& cfg) {
  cfg.validate();
  params.cfg.validate();
  if (trajectories.empty()) throw InvalidInput("run_analysis: no trajectories");
  int layer = cfg.layer < 0 ? params.cfg.blocks - 1 : cfg.layer;
  if (layer >= params.cfg.blocks)
    throw InvalidConfig("run_analysis: layer exceeds block count");

  uint64_t ph = hash_params(params);
  Rng root(cfg.seed);

  struct Job {
    size_t traj_index;
    int t;
    int realized;
  };
  std::vector<Trace> traces(trajectories.size());
  std::vector<Job> jobs;
  ForwardModsT<float> mods;
  mods.stamp_params_hash = false;
  for (size_t i = 0; i < trajectories.size(); ++i) {
    const Trajectory& tr = trajectories[i];
    if (!tr.verified) throw InvalidInput("run_analysis: unverified trajectory");
    std::vector<int> seq = tr.sequence();
    traces[i] = forward(params, std::span<const int>(seq), mods);
    traces[i].params_hash = ph;
    for (size_t t = 0; t + 1 < seq.size(); ++t)
      if (tr.response_mask[t + 1])
        jobs.push_back({i, static_cast<int>(t), seq[t + 1]});
  }
  if (jobs.empty()) throw InvalidInput("run_analysis: no response positions to analyze");

  AnalysisResult res;
  res.layer = layer;
  res.reports.resize(jobs.size());
  parallel_for(static_cast<int64_t>(jobs.size()), cfg.threads, [&](int64_t j) {
    const Job& job = jobs[static_cast<size_t>(j)];
    const Trajectory& tr = trajectories[job.traj_index];
    Rng rng = root.child(static_cast<uint64_t>(tr.problem_id))
                   .child(static_cast<uint64_t>(job.t));
    res.reports[static_cast<size_t>(j)] =
        analyze_token(params, ph, traces[job.traj_index], tr.problem_id, job.realized, job.t,
                      layer, cfg, rng);
  });
  res.summary = aggregate(res.reports, cfg.k_list);
  return res;
}

void write_token_reports_csv(const std::string& path,
                             std::span<const TokenRouteReport> reports,
                             const std::string& config_comment) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InvalidInput("write_token_reports_csv: cannot open " + path);
  if (!config_comment.empty()) out << "# " << config_comment << '\n';
  out << "trajectory_id,t,layer,p_std,p_best,gap,rank,p_bar,bin\n";
  char buf[256];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%d,%.10g,%.10g,%.10g,%d,%.10g,%s\n",
                  static_cast<long long>(r.trajectory_id), r.t, r.layer, r.p_std, r.p_best,
                  r.gap, r.rank, r.p_bar, bin_name(r.bin));
    out << buf;
  }
  if (!out) throw InvalidInput("write_token_reports_csv: write failed for " + path);
}

std::vector<TokenRouteReport> load_token_reports_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CorruptData("load_token_reports_csv: cannot open " + path);
  std::vector<TokenRouteReport> out;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    TokenRouteReport r;
    char bin[32];
    long long tid;
    if (std::sscanf(line.c_str(), "%lld,%d,%d,%lg,%lg,%lg,%d,%lg,%31s", &tid, &r.t, &r.layer,
                    &r.p_std, &r.p_best, &r.gap, &r.rank, &r.p_bar, bin) != 9)
      throw CorruptData("load_token_reports_csv: bad row: " + line);
    r.trajectory_id = tid;
    if (std::strcmp(bin, "Confident") == 0) r.bin = Bin::Confident;
    else if (std::strcmp(bin, "Ambiguous") == 0) r.bin = Bin::Ambiguous;
    else if (std::strcmp(bin, "Fragile") == 0) r.bin = Bin::Fragile;
    else throw CorruptData("load_token_reports_csv: unknown bin: " + line);
    out.push_back(r);
  }
  return out;
}

}  // namespace moelab
