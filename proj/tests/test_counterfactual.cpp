#include <cstring>
#include <fstream>

#include "doctest.h"
#include "moelab/counterfactual.hpp"
#include "support.hpp"

using namespace moelab;
using testsupport::TempDir;

TEST_CASE("summarize_candidates computes definitional values on hand fixtures") {
  // p_std = 0.30; alts = {0.25, 0.60, 0.30, 0.45}
  std::vector<double> alts{0.25, 0.60, 0.30, 0.45};
  auto s = summarize_candidates(0.30, alts, 0.9, 0.5);
  CHECK(s.p_best == 0.60);
  CHECK(s.gap == doctest::Approx(0.30).epsilon(1e-15));
  CHECK(s.rank == 3);  // 1 + two strictly better (0.60, 0.45); the tie does not count
  CHECK(s.p_bar == doctest::Approx(0.40).epsilon(1e-15));
  CHECK(s.bin == Bin::Fragile);  // 0.40 <= 0.5

  // standard already best: gap 0, rank 1
  auto best = summarize_candidates(0.95, std::vector<double>{0.91, 0.92}, 0.9, 0.5);
  CHECK(best.p_best == 0.95);
  CHECK(best.gap == 0.0);
  CHECK(best.rank == 1);
  CHECK(best.bin == Bin::Confident);  // p_bar = 0.915 > 0.9

  CHECK_THROWS_AS(summarize_candidates(0.5, std::vector<double>{}, 0.9, 0.5), InvalidInput);
}

TEST_CASE("bin boundaries are half-open: p_bar == hi and == lo fall downward") {
  // p_bar exactly 0.9 -> Ambiguous (Confident is strictly above hi)
  std::vector<double> at_hi{0.9, 0.9};
  CHECK(summarize_candidates(0.1, at_hi, 0.9, 0.5).bin == Bin::Ambiguous);
  // p_bar exactly 0.5 -> Fragile (Ambiguous is strictly above lo)
  std::vector<double> at_lo{0.4, 0.6};
  CHECK(summarize_candidates(0.1, at_lo, 0.9, 0.5).bin == Bin::Fragile);
  // just above each edge
  std::vector<double> over_hi{0.91, 0.91};
  CHECK(summarize_candidates(0.1, over_hi, 0.9, 0.5).bin == Bin::Confident);
  std::vector<double> over_lo{0.51, 0.51};
  CHECK(summarize_candidates(0.1, over_lo, 0.9, 0.5).bin == Bin::Ambiguous);

  CHECK(std::string(bin_name(Bin::Confident)) == "Confident");
  CHECK(std::string(bin_name(Bin::Ambiguous)) == "Ambiguous");
  CHECK(std::string(bin_name(Bin::Fragile)) == "Fragile");
}

TEST_CASE("build_pool keeps the m best scores, clamped to the expert count") {
  std::vector<float> scores{0.5f, 2.0f, -1.0f, 1.5f, 0.9f};
  CHECK(build_pool(scores, 3, 2) == std::vector<int>{1, 3, 4});
  CHECK(build_pool(scores, 99, 2) == std::vector<int>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS(build_pool(scores, 1, 2), InvalidConfig);
}

TEST_CASE("sample_alternatives keeps duplicates and gates from original scores") {
  std::vector<float> scores{0.2f, 1.1f, 0.7f, -0.3f, 0.9f, 0.05f};
  auto pool = build_pool(scores, 4, 2);
  Rng rng(21);
  auto alts = sample_alternatives(scores, pool, 2, 64, rng, 1.0);
  REQUIRE(alts.size() == 64);
  for (const auto& r : alts) {
    REQUIRE(r.experts.size() == 2);
    CHECK(r.experts[0] < r.experts[1]);
    for (int e : r.experts)
      CHECK(std::find(pool.begin(), pool.end(), e) != pool.end());
    Route rebuilt = make_route<float>(scores, r.experts);
    CHECK(r.gates == rebuilt.gates);
  }
  // same stream position -> same draws
  Rng r2(21);
  auto again = sample_alternatives(scores, pool, 2, 64, r2, 1.0);
  bool same = true;
  for (size_t i = 0; i < alts.size(); ++i) same &= alts[i].experts == again[i].experts;
  CHECK(same);

  // vanishing noise: every draw is the plain top-k of the pooled scores
  Rng r3(5);
  auto frozen = sample_alternatives(scores, pool, 2, 16, r3, 1e-12);
  auto plain = top_k_indices<float>(scores, 2);
  for (const auto& r : frozen) CHECK(r.experts == plain);

  CHECK_THROWS_AS(sample_alternatives(scores, pool, 2, 0, rng, 1.0), InvalidConfig);
}

TEST_CASE("analyze_token replays exactly from its public pieces") {
  auto params = testsupport::tiny_params(81);
  Rng trng(4);
  auto toks = testsupport::random_tokens(trng, 9, params.cfg.vocab_size);
  Trace trace = forward(params, std::span<const int>(toks));
  uint64_t ph = hash_params(params);

  AnalysisConfig cfg;
  cfg.alternatives = 24;
  cfg.pool_size = 4;
  cfg.seed = 3;

  const int t = 5, layer = 1, realized = toks[6];
  const int N = params.cfg.experts_per_layer, k = params.cfg.active_experts;
  Rng rng(1234);
  TokenRouteReport rep =
      analyze_token(params, ph, trace, 77, realized, t, layer, cfg, rng);
  CHECK(rep.trajectory_id == 77);
  CHECK(rep.t == t);
  CHECK(rep.layer == layer);

  // replay with the same stream and the public building blocks
  const auto& bt = trace.blocks[size_t(layer)];
  std::span<const float> scores(bt.scores.data() + size_t(t) * N, size_t(N));
  std::span<const float> logits(trace.logits.data() + size_t(t) * params.cfg.vocab_size,
                                size_t(params.cfg.vocab_size));
  double p_std = double(softmax<float>(logits)[size_t(realized)]);
  auto pool = build_pool(scores, std::min(cfg.pool_size, N), k);
  Rng replay(1234);
  auto alts = sample_alternatives(scores, pool, k, cfg.alternatives, replay, cfg.noise_scale);
  std::vector<double> p_alts;
  const Route& std_route = bt.routes[size_t(t)];
  for (const auto& alt : alts) {
    if (alt.same_experts(std_route)) {
      p_alts.push_back(p_std);
      continue;
    }
    auto dist = intervene_cached(params, ph, trace, t, layer, alt.experts);
    p_alts.push_back(double(dist[size_t(realized)]));
  }
  auto s = summarize_candidates(p_std, p_alts, cfg.hi, cfg.lo);

  CHECK(rep.p_std == p_std);
  CHECK(rep.p_best == s.p_best);
  CHECK(rep.gap == s.gap);
  CHECK(rep.p_bar == s.p_bar);
  CHECK(rep.rank == s.rank);
  CHECK(rep.bin == s.bin);

  CHECK_THROWS_AS(
      analyze_token(params, ph, trace, 0, realized, -1, layer, cfg, Rng(0)), InvalidInput);
  CHECK_THROWS_AS(
      analyze_token(params, ph, trace, 0, realized, t, 9, cfg, Rng(0)), InvalidInput);
  CHECK_THROWS_AS(
      analyze_token(params, ph, trace, 0, params.cfg.vocab_size, t, layer, cfg, Rng(0)),
      InvalidInput);
}

TEST_CASE("aggregate matches hand counts, omits empty bins, keeps bin order") {
  auto rep = [](double p_std, double p_best, double p_bar, int rank, Bin b) {
    TokenRouteReport r;
    r.p_std = p_std;
    r.p_best = p_best;
    r.gap = p_best - p_std;
    r.p_bar = p_bar;
    r.rank = rank;
    r.bin = b;
    return r;
  };
  std::vector<TokenRouteReport> reports{
      rep(0.95, 0.97, 0.95, 1, Bin::Confident),
      rep(0.92, 0.92, 0.93, 1, Bin::Confident),
      rep(0.10, 0.60, 0.30, 7, Bin::Fragile),
      rep(0.20, 0.80, 0.40, 2, Bin::Fragile),
      rep(0.40, 0.45, 0.25, 12, Bin::Fragile),
  };
  std::vector<int> k_list{1, 5, 10};
  BinSummary s = aggregate(reports, k_list);
  CHECK(s.total_tokens == 5);
  REQUIRE(s.bins.size() == 2);  // no Ambiguous rows
  CHECK(s.bins[0].first == Bin::Confident);
  CHECK(s.bins[1].first == Bin::Fragile);
  CHECK(s.find(Bin::Ambiguous) == nullptr);

  const BinStats& conf = *s.find(Bin::Confident);
  CHECK(conf.count == 2);
  CHECK(conf.share_pct == doctest::Approx(40.0).epsilon(1e-12));
  CHECK(conf.topk_pct[0] == doctest::Approx(100.0).epsilon(1e-12));  // both rank 1
  CHECK(conf.mean_p_std_pct == doctest::Approx(93.5).epsilon(1e-12));
  CHECK(conf.mean_p_best_pct == doctest::Approx(94.5).epsilon(1e-12));
  CHECK(conf.mean_gap_pp == doctest::Approx(1.0).epsilon(1e-9));

  const BinStats& frag = *s.find(Bin::Fragile);
  CHECK(frag.count == 3);
  CHECK(frag.share_pct == doctest::Approx(60.0).epsilon(1e-12));
  CHECK(frag.topk_pct[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(frag.topk_pct[1] == doctest::Approx(100.0 / 3).epsilon(1e-12));      // only rank 2
  CHECK(frag.topk_pct[2] == doctest::Approx(100.0 * 2 / 3).epsilon(1e-12));  // ranks 7, 2; 12 misses
  CHECK(frag.mean_gap_pp ==
        doctest::Approx(100.0 * (0.50 + 0.60 + 0.05) / 3).epsilon(1e-9));

  CHECK_THROWS_AS(aggregate(std::vector<TokenRouteReport>{}, k_list), InvalidInput);
  CHECK_THROWS_AS(aggregate(reports, std::vector<int>{}), InvalidInput);
}

TEST_CASE("token report CSV round-trips, skips comments, rejects junk") {
  TempDir dir("reports");
  std::vector<TokenRouteReport> reports;
  TokenRouteReport r;
  r.trajectory_id = 42;
  r.t = 3;
  r.layer = 1;
  r.p_std = 0.125;
  r.p_best = 0.5;
  r.gap = 0.375;
  r.p_bar = 0.25;
  r.rank = 4;
  r.bin = Bin::Fragile;
  reports.push_back(r);
  r.trajectory_id = 7;
  r.bin = Bin::Confident;
  reports.push_back(r);

  std::string path = dir.file("r.csv");
  write_token_reports_csv(path, reports, "alternatives=24 pool=4");
  auto loaded = load_token_reports_csv(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].trajectory_id == 42);
  CHECK(loaded[0].p_std == 0.125);
  CHECK(loaded[0].gap == 0.375);
  CHECK(loaded[0].rank == 4);
  CHECK(loaded[0].bin == Bin::Fragile);
  CHECK(loaded[1].bin == Bin::Confident);

  std::string junk = dir.file("junk.csv");
  std::ofstream(junk) << "trajectory_id,t,layer,p_std,p_best,gap,rank,p_bar,bin\n1,2\n";
  CHECK_THROWS_AS(load_token_reports_csv(junk), CorruptData);

  std::string badbin = dir.file("badbin.csv");
  std::ofstream(badbin) << "trajectory_id,t,layer,p_std,p_best,gap,rank,p_bar,bin\n"
                        << "1,0,0,0.1,0.2,0.1,1,0.1,Sturdy\n";
  CHECK_THROWS_AS(load_token_reports_csv(badbin), CorruptData);
}

TEST_CASE("run_analysis is thread-count independent and resolves layer -1") {
  auto params = testsupport::tiny_params(91);
  Rng rng(31);
  std::vector<Trajectory> trajs;
  for (int i = 0; i < 6; ++i) {
    Problem p = gen_problem(rng, 1 + i % 2, 11, 100 + i);
    trajs.push_back(make_trajectory(p, canonical_response(p), true));
  }

  AnalysisConfig cfg;
  cfg.alternatives = 8;
  cfg.pool_size = 4;
  cfg.seed = 17;

  cfg.threads = 1;
  auto serial = run_analysis(params, trajs, cfg);
  cfg.threads = 4;
  auto parallel = run_analysis(params, trajs, cfg);

  CHECK(serial.layer == params.cfg.blocks - 1);
  REQUIRE(serial.reports.size() == parallel.reports.size());
  for (size_t i = 0; i < serial.reports.size(); ++i) {
    CHECK(serial.reports[i].trajectory_id == parallel.reports[i].trajectory_id);
    CHECK(serial.reports[i].t == parallel.reports[i].t);
    CHECK(serial.reports[i].p_std == parallel.reports[i].p_std);
    CHECK(serial.reports[i].p_bar == parallel.reports[i].p_bar);
    CHECK(serial.reports[i].rank == parallel.reports[i].rank);
  }

  // every response-predicting position of every trajectory is audited
  size_t expected = 0;
  for (const auto& t : trajs) expected += t.response.size();
  CHECK(serial.reports.size() == expected);

  Trajectory unverified = trajs[0];
  unverified.verified = false;
  CHECK_THROWS_AS(run_analysis(params, std::vector<Trajectory>{unverified}, cfg),
                  InvalidInput);
}
