#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/model.hpp"
#include "moelab/rng.hpp"

namespace moelab {

struct AnalysisConfig {
  int alternatives = 32;   // G: sampled alternative routes per token
  int pool_size = 32;      // m: candidate pool, clamped to the expert count
  double noise_scale = 1.0;
  int layer = -1;          // target block; -1 = final block
  std::vector<int> k_list{1, 5, 10};
  double hi = 0.9;         // confident threshold (exclusive lower edge)
  double lo = 0.5;         // fragile threshold (inclusive upper edge)
  uint64_t seed = 42;
  int threads = 1;

  void validate() const {
    if (alternatives < 1) throw InvalidConfig("AnalysisConfig: alternatives must be >= 1");
    if (pool_size < 1) throw InvalidConfig("AnalysisConfig: pool_size must be >= 1");
    if (!(noise_scale > 0)) throw InvalidConfig("AnalysisConfig: noise_scale must be > 0");
    if (k_list.empty()) throw InvalidConfig("AnalysisConfig: k_list must be non-empty");
    for (int k : k_list)
      if (k < 1) throw InvalidConfig("AnalysisConfig: k_list entries must be >= 1");
    if (!(lo >= 0 && lo < hi && hi <= 1))
      throw InvalidConfig("AnalysisConfig: need 0 <= lo < hi <= 1");
    if (threads < 1) throw InvalidConfig("AnalysisConfig: threads must be >= 1");
  }
};

enum class Bin { Confident, Ambiguous, Fragile };

const char* bin_name(Bin b);

struct TokenRouteReport {
  int64_t trajectory_id = 0;
  int t = 0;
  int layer = 0;
  double p_std = 0.0;   // realized-token probability under the standard route
  double p_best = 0.0;  // max over all candidates (standard included)
  double gap = 0.0;     // p_best - p_std
  double p_bar = 0.0;   // mean over the alternatives only
  int rank = 1;         // 1 + #alternatives strictly better than standard
  Bin bin = Bin::Fragile;
};

struct CandidateSummary {
  double p_best = 0.0;
  double gap = 0.0;
  double p_bar = 0.0;
  int rank = 1;
  Bin bin = Bin::Fragile;
};

// Pure metric arithmetic over a probability list; the seam the fixed-number
// tests exercise. Bins use half-open intervals: Confident (hi, 1],
// Ambiguous (lo, hi], Fragile [0, lo].
CandidateSummary summarize_candidates(double p_std, std::span<const double> p_alts,
                                      double hi, double lo);

// Indices of the min(m, N) largest scores, ties toward the lower index.
std::vector<int> build_pool(std::span<const float> scores, int m, int k);

// G independent Gumbel-top-k draws over the pool; duplicates and draws equal
// to the standard route are kept. Gates come from the original scores.
std::vector<Route> sample_alternatives(std::span<const float> scores,
                                       std::span<const int> pool, int k, int G, Rng& rng,
                                       double scale);

// Audits one (position, layer): standard-route probability from the trace,
// alternative probabilities via cached interventions.
TokenRouteReport analyze_token(const Params& params, uint64_t params_hash, const Trace& trace,
                               int64_t trajectory_id, int realized_token, int t, int layer,
                               const AnalysisConfig& cfg, Rng rng);

struct BinStats {
  int64_t count = 0;
  double share_pct = 0.0;
  std::vector<double> topk_pct;  // aligned with k_list
  double mean_p_std_pct = 0.0;
  double mean_p_best_pct = 0.0;
  double mean_gap_pp = 0.0;
};

struct BinSummary {
  int64_t total_tokens = 0;
  std::vector<int> k_list;
  // Present bins only (empty bins are absent), ordered Confident, Ambiguous, Fragile.
  std::vector<std::pair<Bin, BinStats>> bins;

  const BinStats* find(Bin b) const {
    for (const auto& [bin, stats] : bins)
      if (bin == b) return &stats;
    return nullptr;
  }
};

BinSummary aggregate(std::span<const TokenRouteReport> reports, std::span<const int> k_list);

struct AnalysisResult {
  int layer = 0;  // resolved target block
  BinSummary summary;
  std::vector<TokenRouteReport> reports;
};

// Runs analyze_token over every masked (response-predicting) position of
// every trajectory at the target layer. Deterministic given the seed for any
// thread count: each token draws from a child stream keyed by
// (trajectory id, position).
AnalysisResult run_analysis(const Params& params, std::span<const Trajectory> trajectories,
                            const AnalysisConfig& cfg);

void write_token_reports_csv(const std::string& path,
                             std::span<const TokenRouteReport> reports,
                             const std::string& config_comment);
std::vector<TokenRouteReport> load_token_reports_csv(const std::string& path);

}  // namespace moelab
