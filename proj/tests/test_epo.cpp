#include <algorithm>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "moelab/epo.hpp"
#include "support.hpp"

using namespace moelab;
using testsupport::TempDir;

TEST_CASE("route_log_prob: uniform scores give |r| * ln(1/N)") {
  std::vector<double> uniform(8, 0.0);
  std::vector<int> route{2, 5};
  double lp = route_log_prob<double>(uniform, route);
  CHECK(lp == doctest::Approx(2.0 * std::log(1.0 / 8.0)).epsilon(1e-12));  // -4.15888...

  // shift invariance of the factorized form
  std::vector<double> scores{0.4, -1.2, 0.7, 2.2, 0.0, -0.5, 1.1, 0.3};
  std::vector<double> shifted = scores;
  for (auto& s : shifted) s += 11.25;
  CHECK(std::abs(route_log_prob<double>(scores, route) -
                 route_log_prob<double>(shifted, route)) < 1e-10);

  std::vector<int> bad{2, 8};
  CHECK_THROWS_AS(route_log_prob<double>(uniform, bad), InvalidRoute);
}

TEST_CASE("epo_loss at theta == ref equals delta * ln 2") {
  std::vector<double> scores{0.4, -1.2, 0.7, 2.2, 0.0, -0.5};
  std::vector<int> chosen{0, 3}, rejected{1, 4};
  for (double delta : {0.1, 0.5, 2.0}) {
    double loss = epo_loss<double>(delta, chosen, rejected, scores, scores, 0.1);
    CHECK(std::abs(loss - delta * std::log(2.0)) < 1e-12);
  }
  std::vector<int> lopsided{0};
  CHECK_THROWS_AS(epo_loss<double>(1.0, lopsided, rejected, scores, scores, 0.1),
                  InvalidRoute);
}

TEST_CASE("epo_loss is invariant to a common score shift") {
  std::vector<double> theta{0.9, -0.4, 1.3, 0.1, -1.0, 0.6};
  std::vector<double> ref{0.4, 0.2, 0.8, -0.3, -0.7, 0.5};
  std::vector<int> chosen{1, 2}, rejected{0, 5};
  double base = epo_loss<double>(0.7, chosen, rejected, theta, ref, 0.25);

  std::vector<double> theta_shift = theta;
  for (auto& s : theta_shift) s += 3.7;
  CHECK(std::abs(epo_loss<double>(0.7, chosen, rejected, theta_shift, ref, 0.25) - base) <
        1e-10);

  std::vector<double> ref_shift = ref;
  for (auto& s : ref_shift) s -= 2.9;
  CHECK(std::abs(epo_loss<double>(0.7, chosen, rejected, theta, ref_shift, 0.25) - base) <
        1e-10);
}

TEST_CASE("epo_loss decreases when theta favors the chosen route") {
  std::vector<double> ref{0.0, 0.0, 0.0, 0.0};
  std::vector<int> chosen{0, 1}, rejected{2, 3};
  std::vector<double> pro{1.0, 1.0, -1.0, -1.0};
  std::vector<double> anti{-1.0, -1.0, 1.0, 1.0};
  double neutral = epo_loss<double>(1.0, chosen, rejected, ref, ref, 0.5);
  CHECK(epo_loss<double>(1.0, chosen, rejected, pro, ref, 0.5) < neutral);
  CHECK(epo_loss<double>(1.0, chosen, rejected, anti, ref, 0.5) > neutral);
}

TEST_CASE("epo_score_grad matches finite differences, support is the symmetric difference") {
  std::vector<double> theta{0.9, -0.4, 1.3, 0.1, -1.0, 0.6, 0.2, -0.2};
  std::vector<double> ref{0.4, 0.2, 0.8, -0.3, -0.7, 0.5, -0.1, 0.9};
  std::vector<int> chosen{1, 4, 6}, rejected{1, 2, 5};  // share expert 1
  const double delta = 0.8, beta = 0.3;

  auto loss_of = [&](const std::vector<double>& th) {
    return epo_loss<double>(delta, chosen, rejected, th, ref, beta);
  };
  auto fd = finite_difference_grad(loss_of, theta, 1e-6);
  auto an = epo_score_grad<double>(delta, chosen, rejected, theta, ref, beta);

  for (size_t j = 0; j < theta.size(); ++j) {
    bool in_chosen = std::find(chosen.begin(), chosen.end(), int(j)) != chosen.end();
    bool in_rejected = std::find(rejected.begin(), rejected.end(), int(j)) != rejected.end();
    if (in_chosen == in_rejected) {
      // shared member (expert 1) or outsider: exact zero, and the loss is flat
      CHECK(an[j] == 0.0);
      CHECK(std::abs(fd[j]) < 1e-8);
    } else {
      double denom = std::max(std::abs(fd[j]), 1e-12);
      CHECK(std::abs(an[j] - fd[j]) / denom < 1e-5);
    }
  }
  // one gate up, one gate down: contributions cancel exactly
  double sum = 0.0;
  for (double g : an) sum += g;
  CHECK(sum == 0.0);
}

TEST_CASE("epo_grad chains the score gradient onto W_r rows and b_r") {
  std::vector<double> theta{0.9, -0.4, 1.3, 0.1};
  std::vector<double> ref{0.4, 0.2, 0.8, -0.3};
  std::vector<int> chosen{0, 2}, rejected{1, 2};
  std::vector<double> u{0.5, -1.5, 2.0};
  auto ds = epo_score_grad<double>(1.2, chosen, rejected, theta, ref, 0.4);
  auto g = epo_grad<double>(1.2, chosen, rejected, theta, ref, 0.4, u);
  REQUIRE(g.db.size() == 4);
  REQUIRE(g.dw.size() == 12);
  for (int e = 0; e < 4; ++e) {
    CHECK(g.db[size_t(e)] == ds[size_t(e)]);
    for (int j = 0; j < 3; ++j)
      CHECK(g.dw[size_t(e) * 3 + j] == ds[size_t(e)] * u[size_t(j)]);
  }
  // expert 2 sits in both routes: its whole row is exactly zero
  for (int j = 0; j < 3; ++j) CHECK(g.dw[2 * 3 + j] == 0.0);
}

TEST_CASE("find_hard_tokens thresholds teacher-forced CE over response positions") {
  auto params = testsupport::tiny_params(101);
  Rng rng(3);
  Problem prob = gen_problem(rng, 2, 11, 9);
  Trajectory traj = make_trajectory(prob, canonical_response(prob), true);

  std::vector<double> ces;
  auto all = find_hard_tokens(params, traj, -1.0, &ces);  // CE > -1 always
  CHECK(all.size() == traj.response.size());
  REQUIRE(ces.size() == all.size());

  // cross-check each CE against a direct teacher-forced recompute
  auto seq = traj.sequence();
  Trace tr = forward(params, std::span<const int>(seq));
  int V = params.cfg.vocab_size;
  for (size_t i = 0; i < all.size(); ++i) {
    int t = all[i];
    std::span<const float> row(tr.logits.data() + size_t(t) * V, size_t(V));
    auto probs = softmax<float>(row);
    double expect = -std::log(double(probs[size_t(seq[size_t(t) + 1])]));
    CHECK(ces[i] == doctest::Approx(expect).epsilon(1e-12));
  }

  CHECK(find_hard_tokens(params, traj, std::numeric_limits<double>::infinity()).empty());

  Trajectory unverified = traj;
  unverified.verified = false;
  CHECK_THROWS_AS(find_hard_tokens(params, unverified, 0.1), InvalidInput);
}

TEST_CASE("build_preference invariants on a live trace") {
  auto params = testsupport::tiny_params(103);
  Rng trng(8);
  auto toks = testsupport::random_tokens(trng, 10, params.cfg.vocab_size);
  Trace trace = forward(params, std::span<const int>(toks));
  uint64_t ph = hash_params(params);
  const int layer = 1, N = params.cfg.experts_per_layer, k = params.cfg.active_experts;

  RouterRef ref{params.blocks[layer].router_w, params.blocks[layer].router_b};
  EpoConfig cfg;
  cfg.alternatives = 32;
  cfg.pool_size = N;

  int found = 0;
  for (int t = 0; t + 1 < trace.length(); ++t) {
    auto pair = build_preference(params, ph, trace, t, layer, ref, cfg, Rng(uint64_t(t)));
    if (!pair) continue;
    ++found;
    CHECK(pair->t == t);
    CHECK(pair->ce_gap > 0.0);
    CHECK(int(pair->chosen.experts.size()) == k);
    CHECK(int(pair->rejected.experts.size()) == k);
    CHECK(pair->rejected.experts == trace.blocks[layer].routes[size_t(t)].experts);
    CHECK_FALSE(pair->chosen.same_experts(pair->rejected));
    REQUIRE(int(pair->ref_scores.size()) == N);
    // the frozen reference was built from the very same router, so its scores
    // must reproduce the traced scores bit-exactly (theta == ref at step zero)
    std::span<const float> srow(trace.blocks[layer].scores.data() + size_t(t) * N, size_t(N));
    for (int j = 0; j < N; ++j) CHECK(pair->ref_scores[size_t(j)] == srow[j]);
    double loss = epo_loss<float>(pair->ce_gap, pair->chosen.experts,
                                  pair->rejected.experts, srow,
                                  std::span<const float>(pair->ref_scores), cfg.beta);
    CHECK(std::abs(loss - pair->ce_gap * std::log(2.0)) < 1e-9);
  }
  CHECK(found > 0);  // with random weights, improving routes are common

  CHECK_THROWS_AS(
      build_preference(params, ph, trace, trace.length() - 1, layer, ref, cfg, Rng(0)),
      InvalidInput);
}

TEST_CASE("build_preference returns nothing when the pool collapses to the executed route") {
  auto params = testsupport::tiny_params(103);
  Rng trng(8);
  auto toks = testsupport::random_tokens(trng, 10, params.cfg.vocab_size);
  Trace trace = forward(params, std::span<const int>(toks));
  uint64_t ph = hash_params(params);
  const int layer = 0;

  RouterRef ref{params.blocks[layer].router_w, params.blocks[layer].router_b};
  EpoConfig cfg;
  cfg.alternatives = 16;
  cfg.pool_size = params.cfg.active_experts;  // pool == top-k == executed route

  for (int t = 0; t + 1 < trace.length(); ++t)
    CHECK_FALSE(
        build_preference(params, ph, trace, t, layer, ref, cfg, Rng(uint64_t(t))).has_value());
}

TEST_CASE("epo_train with an unreachable threshold returns a bit-identical model") {
  auto params = testsupport::tiny_params(107);
  Rng rng(5);
  std::vector<Trajectory> trajs;
  for (int i = 0; i < 6; ++i) {
    Problem p = gen_problem(rng, 1, 11, i);
    trajs.push_back(make_trajectory(p, canonical_response(p), true));
  }
  EpoConfig cfg;
  cfg.tau = std::numeric_limits<double>::infinity();
  cfg.batch_size = 4;
  auto res = epo_train(params, trajs, cfg);
  CHECK(res.changed_tensors.empty());
  CHECK(res.hard_tokens == 0);
  CHECK(hash_params(res.params) == hash_params(params));
  REQUIRE(res.log.size() == 2);  // ceil(6 / 4) steps, 1 epoch
  for (const auto& rec : res.log) {
    CHECK(rec.pairs_built == 0);
    CHECK(rec.pairs_skipped == 0);
  }
}

TEST_CASE("epo_train touches only the target router and is deterministic") {
  auto params = testsupport::tiny_params(109);
  Rng rng(7);
  std::vector<Trajectory> trajs;
  for (int i = 0; i < 8; ++i) {
    Problem p = gen_problem(rng, 1 + i % 2, 11, i);
    trajs.push_back(make_trajectory(p, canonical_response(p), true));
  }
  EpoConfig cfg;
  cfg.tau = 0.0;  // every response position is hard under random weights
  cfg.batch_size = 4;
  cfg.alternatives = 16;
  cfg.pool_size = 6;

  auto r1 = epo_train(params, trajs, cfg);
  CHECK(r1.hard_tokens > 0);
  REQUIRE_FALSE(r1.changed_tensors.empty());
  for (const auto& name : r1.changed_tensors)
    CHECK((name == "blocks.1.router_w" || name == "blocks.1.router_b"));

  // bitwise determinism, independent of the worker count
  auto r2 = epo_train(params, trajs, cfg);
  CHECK(hash_params(r2.params) == hash_params(r1.params));
  EpoConfig threaded = cfg;
  threaded.threads = 4;
  auto r4 = epo_train(params, trajs, threaded);
  CHECK(hash_params(r4.params) == hash_params(r1.params));

  // explicit layer targets that block instead
  EpoConfig layer0 = cfg;
  layer0.layer = 0;
  auto r0 = epo_train(params, trajs, layer0);
  for (const auto& name : r0.changed_tensors)
    CHECK((name == "blocks.0.router_w" || name == "blocks.0.router_b"));

  Trajectory bad = trajs[0];
  bad.verified = false;
  CHECK_THROWS_AS(epo_train(params, {bad}, cfg), InvalidInput);
  EpoConfig badcfg = cfg;
  badcfg.layer = 5;
  CHECK_THROWS_AS(epo_train(params, trajs, badcfg), InvalidConfig);
}

TEST_CASE("epo log serializes one record per step") {
  TempDir dir("epolog");
  std::vector<EpoLogRecord> log{{1, 3, 1, 0.5, 0.34}, {2, 0, 2, 0.0, 0.0}};
  std::string path = dir.file("log.jsonl");
  save_epo_log(path, log);
  std::string text = testsupport::slurp(path);
  CHECK(std::count(text.begin(), text.end(), '\n') == 2);
  CHECK(text.find("\"pairs_built\":3") != std::string::npos);
  CHECK(text.find("\"mean_delta\":0.5") != std::string::npos);
}
