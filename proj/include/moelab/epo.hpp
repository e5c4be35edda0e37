#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/model.hpp"

namespace moelab {

// Router-only preference update: on hard tokens, prefer a sampled
// lower-CE route over the one the router actually picked, weighted by the
// CE gap, against a frozen copy of the initial router.
struct EpoConfig {
  int layer = -1;          // router to update; -1 = last block
  double tau = 0.1;        // hard-token CE threshold, nats
  int alternatives = 32;   // candidate routes sampled per hard token
  int pool_size = 32;      // top-m candidate pool (clamped to N)
  double noise_scale = 1.0;
  double beta = 0.1;
  double lr = 3e-4;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  int batch_size = 16;     // trajectories per optimizer step
  int epochs = 1;
  uint64_t seed = 42;
  int threads = 1;

  void validate() const;
  int resolve_layer(const ModelConfig& cfg) const;
};

struct PreferencePair {
  int t = -1;                     // position predicting the realized token
  Route rejected;                 // route the router actually executed
  Route chosen;                   // lowest-CE sampled improvement
  double ce_gap = 0.0;            // CE(rejected) - CE(chosen), always > 0
  std::vector<float> ref_scores;  // frozen reference router scores at t
};

// Frozen copy of one layer's router.
struct RouterRef {
  std::vector<float> w;  // N x width
  std::vector<float> b;  // N
};

// Factorized route log-probability: sum over members of the full-softmax
// log-probabilities. Shift-invariant in the scores.
template <class Real>
double route_log_prob(std::span<const Real> scores, std::span<const int> route);

// -delta * log sigmoid(beta * ((lp_theta(r+) - lp_ref(r+))
//                            - (lp_theta(r-) - lp_ref(r-))))
// At theta == ref the inner term is zero and the loss is delta * ln 2.
template <class Real>
double epo_loss(double delta, std::span<const int> chosen, std::span<const int> rejected,
                std::span<const Real> theta_scores, std::span<const Real> ref_scores,
                double beta);

// d(loss)/d(theta scores). Equal-cardinality routes make the softmax
// normalizers cancel, so the support is exactly the symmetric difference
// of chosen and rejected; shared members get an exact zero.
template <class Real>
std::vector<double> epo_score_grad(double delta, std::span<const int> chosen,
                                   std::span<const int> rejected,
                                   std::span<const Real> theta_scores,
                                   std::span<const Real> ref_scores, double beta);

struct RouterGrad {
  std::vector<double> dw;  // N x width
  std::vector<double> db;  // N
};

// Score gradient chained onto (W_r, b_r): outer product with the router
// input u_t, bias term unchained.
template <class Real>
RouterGrad epo_grad(double delta, std::span<const int> chosen, std::span<const int> rejected,
                    std::span<const Real> theta_scores, std::span<const Real> ref_scores,
                    double beta, std::span<const Real> u_t);

// Response-predicting positions whose teacher-forced next-token CE under the
// current router exceeds tau. `ces` (if given) receives one CE per returned
// position.
std::vector<int> find_hard_tokens(const Params& params, const Trajectory& trajectory,
                                  double tau, std::vector<double>* ces = nullptr);

// One hard token -> chosen/rejected pair, or nothing when no sampled route
// beats the executed one. The realized token is trace.tokens[t + 1]; the
// rejected route, its CE, and the candidate scores all come from the trace;
// candidate CEs come from cached interventions.
std::optional<PreferencePair> build_preference(const Params& params, uint64_t params_hash,
                                               const Trace& trace, int t, int layer,
                                               const RouterRef& ref, const EpoConfig& cfg,
                                               Rng rng);

struct EpoLogRecord {
  int64_t step = 0;
  int pairs_built = 0;
  int pairs_skipped = 0;  // hard tokens that yielded no improving route
  double mean_delta = 0.0;
  double mean_loss = 0.0;
};

struct EpoResult {
  Params params;
  std::vector<EpoLogRecord> log;
  std::vector<std::string> changed_tensors;  // tensors differing from the input
  int64_t hard_tokens = 0;     // selection events across all epochs
  double hard_ce_before = 0.0; // mean CE at selection time
  double hard_ce_after = 0.0;  // same positions under the updated router
};

// AdamW on the target layer's (W_r, b_r) only; every other tensor is
// asserted bit-identical afterwards. Steps with zero pairs are skipped
// entirely, so tau = +inf returns a bit-identical copy.
EpoResult epo_train(const Params& init, const std::vector<Trajectory>& trajectories,
                    const EpoConfig& cfg);

void save_epo_log(const std::string& path, std::span<const EpoLogRecord> log);

}  // namespace moelab
