#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct ProblemOutcome {
  int64_t problem_id = 0;
  int n = 0;  // completions sampled
  int c = 0;  // verified correct
};

struct PassKCurve {
  std::vector<int> k_values;
  std::vector<double> mean;
  std::vector<double> ci_lo;
  std::vector<double> ci_hi;
  int bootstrap_resamples = 0;
  uint64_t seed = 0;
};

// 1 - C(n-c, K)/C(n, K): probability a uniformly random size-K subset of the
// n completions contains at least one correct. Product form, overflow-free.
double pass_at_k(int n, int c, int K);

// lgamma-based form of the same quantity; kept as an independent cross-check.
double pass_at_k_log(int n, int c, int K);

// Parametric bootstrap: per replicate, each problem's correct count is
// resampled Binomial(n, c/n), pass@K recomputed and averaged across problems;
// returns the 2.5th/97.5th percentiles of the B replicate means. Replicates
// draw from child streams keyed by replicate index.
std::pair<double, double> bootstrap_ci(std::span<const ProblemOutcome> outcomes, int K, int B,
                                       Rng rng);

// Mean pass@K with CIs over a K grid; per-K bootstrap child streams.
PassKCurve passk_curve(std::span<const ProblemOutcome> outcomes, std::span<const int> k_values,
                       int B, Rng rng);

struct PassKEval {
  PassKCurve curve;
  std::vector<ProblemOutcome> outcomes;
};

// Samples n completions per problem, verifies each, and builds the curve.
// Problems run in parallel on child streams keyed by problem id, so any
// thread count gives identical results.
PassKEval eval_passk(const Sampler& sampler, std::span<const Problem> problems, int n,
                     std::span<const int> k_values, int B, Rng rng, int threads = 1);

PassKEval eval_passk(const Params& params, std::span<const Problem> problems, int n,
                     const DecodeConfig& decode, std::span<const int> k_values, int B, Rng rng,
                     int threads = 1);

// CSV round-trips: outcomes "problem_id,n,c", curves "K,mean,ci_lo,ci_hi".
void save_outcomes_csv(const std::string& path, std::span<const ProblemOutcome> outcomes);
std::vector<ProblemOutcome> load_outcomes_csv(const std::string& path);
void save_curve_csv(const std::string& path, const PassKCurve& curve);
PassKCurve load_curve_csv(const std::string& path);

}  // namespace moelab
