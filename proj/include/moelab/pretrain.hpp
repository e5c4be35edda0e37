#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct TrainConfig {
  double lr = 3e-4;
  double weight_decay = 0.01;
  int batch_size = 16;
  int steps = 2000;
  double lambda_lb = 0.01;
  double grad_clip = 1.0;
  uint64_t seed = 42;

  void validate() const {
    if (!(lr > 0)) throw InvalidConfig("TrainConfig: lr must be > 0");
    if (weight_decay < 0) throw InvalidConfig("TrainConfig: weight_decay must be >= 0");
    if (batch_size < 1) throw InvalidConfig("TrainConfig: batch_size must be >= 1");
    if (steps < 1) throw InvalidConfig("TrainConfig: steps must be >= 1");
    if (lambda_lb < 0) throw InvalidConfig("TrainConfig: lambda_lb must be >= 0");
    if (grad_clip < 0) throw InvalidConfig("TrainConfig: grad_clip must be >= 0");
  }
};

// Per-layer routing statistics over one optimization batch (masked tokens):
// slot_fraction[i] is the share of routed slots expert i received,
// mean_prob[i] the mean full-softmax router probability.
struct RoutingBatchStats {
  std::vector<double> slot_fraction;  // f
  std::vector<double> mean_prob;      // p-bar
  int64_t tokens = 0;                 // T
  int k = 1;

  void validate() const;
};

struct LmLoss {
  double value = 0.0;
  int64_t positions = 0;
  bool empty_mask = false;
};

// Mean next-token cross-entropy (natural log) over masked positions.
template <class Real>
LmLoss lm_loss(std::span<const Real> logits, int vocab, std::span<const int> targets,
               std::span<const uint8_t> mask);

// lambda * N * sum_i f_i * pbar_i
double switch_lb_loss(const RoutingBatchStats& stats, double lambda);

// (lambda*N/T) * (diag(p) - p p^T) f, treating f as constant.
std::vector<double> lb_grad(std::span<const double> p, std::span<const double> f,
                            double lambda, int64_t T);

// Routing stats per layer from recorded traces, masked positions only.
std::vector<RoutingBatchStats> batch_routing_stats(
    const ModelConfig& cfg, std::span<const Trace> traces,
    std::span<const std::vector<uint8_t>> masks);

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay; optional global-norm clipping applied to the
// gradient as a whole before the moment updates.
template <class Real>
class AdamW {
 public:
  AdamW(const AdamWConfig& cfg, const std::vector<std::vector<Real>*>& params) : cfg_(cfg) {
    for (auto* p : params) {
      m_.emplace_back(p->size(), Real(0));
      v_.emplace_back(p->size(), Real(0));
    }
  }

  void step(const std::vector<std::vector<Real>*>& params,
            const std::vector<const std::vector<Real>*>& grads, double clip);

  int64_t steps_taken() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<Real>> m_, v_;
  int64_t t_ = 0;
};

struct TrainLogRecord {
  int64_t step = 0;
  double lm_loss = 0.0;
  double lb_loss = 0.0;
  double max_f = 0.0;
  double min_f = 0.0;
  std::string event;  // empty for normal steps
};

struct TrainResult {
  Params params;
  std::vector<TrainLogRecord> log;
};

// AdamW on LM cross-entropy plus the load-balance term. Deterministic given
// the seed: fixed shuffle, fixed accumulation order.
TrainResult train(const Params& init, const std::vector<std::vector<int>>& sequences,
                  const TrainConfig& cfg);

// Token-weighted mean next-token CE over whole sequences (held-out metric).
double mean_sequence_ce(const Params& params, const std::vector<std::vector<int>>& sequences);

void save_train_log(const std::string& path, std::span<const TrainLogRecord> log);

struct ScoreGradCheck {
  double max_rel_err_selected = 0.0;
  double max_abs_delta_unselected = 0.0;
  int64_t checked_selected = 0;
  int64_t checked_unselected = 0;
  int64_t skipped = 0;  // probe crossed a selection or ReLU boundary
};

// Checks the executed-route router-score gradient against central differences
// of per-position CE under direct score perturbation, in check precision.
// Coordinates whose +/-eps probes change any top-k set or ReLU pattern are
// skipped and counted.
ScoreGradCheck check_score_grads(const ParamsT<double>& params, std::span<const int> tokens,
                     double eps = 1e-5);

}  // namespace moelab
