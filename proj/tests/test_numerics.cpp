#include <cmath>
#include <set>

#include "doctest.h"
#include "moelab/numerics.hpp"
#include "moelab/pretrain.hpp"
#include "moelab/rng.hpp"

using namespace moelab;

TEST_CASE("rng is a pure function of (seed, position)") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng c(123);
  c.next_u64();
  Rng replay(123, 1);  // resume mid-stream
  CHECK(c.next_u64() == replay.next_u64());
}

TEST_CASE("rng child streams are independent of parent position") {
  Rng a(9);
  Rng before = a.child(5);
  for (int i = 0; i < 17; ++i) a.next_u64();
  Rng after = a.child(5);
  CHECK(before.next_u64() == after.next_u64());
  // distinct stream ids diverge
  CHECK(Rng(9).child(5).next_u64() != Rng(9).child(6).next_u64());
}

TEST_CASE("uniform01 stays inside (0, 1) so log(u) and log1p(-u) are finite") {
  Rng rng(2024);
  for (int i = 0; i < 200000; ++i) {
    double u = rng.uniform01();
    CHECK(u > 0.0);
    CHECK(u < 1.0);
    CHECK(std::isfinite(std::log(u)));
    CHECK(std::isfinite(std::log(1.0 - u)));
  }
}

TEST_CASE("uniform_below covers the range and respects the bound") {
  Rng rng(5);
  std::set<uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    uint64_t v = rng.uniform_below(7);
    CHECK(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
  CHECK_THROWS_AS(rng.uniform_below(0), InvalidInput);
}

TEST_CASE("softmax and log_softmax agree and normalize") {
  std::vector<double> logits{0.3, -1.2, 2.0, 0.0};
  auto p = softmax<double>(logits);
  auto lp = log_softmax<double>(logits);
  double sum = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    sum += p[i];
    CHECK(std::abs(std::log(p[i]) - lp[i]) < 1e-12);
  }
  CHECK(std::abs(sum - 1.0) < 1e-12);

  // invariance under a large common shift (the stability the max-trick buys)
  std::vector<double> shifted = logits;
  for (auto& x : shifted) x += 700.0;
  auto p2 = softmax<double>(shifted);
  for (size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - p2[i]) < 1e-12);

  CHECK_THROWS_AS(softmax<double>(std::vector<double>{}), InvalidInput);
  CHECK_THROWS_AS(
      softmax<double>(std::vector<double>{1.0, std::numeric_limits<double>::infinity()}),
      InvalidInput);
}

TEST_CASE("top_k_indices picks the largest, ties toward the lower index") {
  std::vector<float> s{1.0f, 3.0f, 3.0f, -2.0f, 0.5f};
  CHECK(top_k_indices<float>(s, 2) == std::vector<int>{1, 2});
  CHECK(top_k_indices<float>(s, 3) == std::vector<int>{0, 1, 2});
  std::vector<float> ties{2.0f, 2.0f, 2.0f};
  CHECK(top_k_indices<float>(ties, 2) == std::vector<int>{0, 1});
  CHECK_THROWS_AS(top_k_indices<float>(s, 6), InvalidConfig);
}

TEST_CASE("gumbel noise has the standard Gumbel moments") {
  Rng rng(77);
  const int n = 1000000;
  auto g = gumbel_noise(rng, n, 1.0);
  double mean = 0.0;
  for (double x : g) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : g) var += (x - mean) * (x - mean);
  var /= n;
  constexpr double kEuler = 0.57721566490153286;
  constexpr double kVar = 1.6449340668482264;  // pi^2 / 6
  CHECK(std::abs(mean - kEuler) < 0.01);
  CHECK(std::abs(var - kVar) < 0.02);
  CHECK_THROWS_AS(gumbel_noise(rng, 1, 0.0), InvalidConfig);
}

TEST_CASE("gumbel_top_k at vanishing scale recovers plain top-k exactly") {
  Rng rng(3);
  std::vector<float> scores{0.1f, 2.0f, -1.0f, 1.5f, 0.9f, 0.4f};
  auto plain = top_k_indices<float>(scores, 3);
  for (double scale : {1e-12, 1e-9}) {
    Rng r2(11);
    for (int rep = 0; rep < 50; ++rep)
      CHECK(gumbel_top_k<float>(scores, 3, r2, scale) == plain);
  }
  std::vector<int> bad_pool{0, 99};
  CHECK_THROWS_AS(gumbel_top_k<float>(scores, std::span<const int>(bad_pool), 1, rng, 1.0),
                  InvalidInput);
  std::vector<int> small_pool{0, 1};
  CHECK_THROWS_AS(gumbel_top_k<float>(scores, std::span<const int>(small_pool), 3, rng, 1.0),
                  InvalidConfig);
}

TEST_CASE("gumbel_top_k draws only from the pool") {
  std::vector<float> scores{5.0f, 4.0f, 3.0f, 2.0f, 1.0f};
  std::vector<int> pool{2, 3, 4};
  Rng rng(8);
  for (int rep = 0; rep < 200; ++rep) {
    auto r = gumbel_top_k<float>(scores, std::span<const int>(pool), 2, rng, 2.0);
    CHECK(r.size() == 2);
    for (int e : r) CHECK((e >= 2 && e <= 4));
    CHECK(r[0] < r[1]);
  }
}

TEST_CASE("finite_difference_grad matches an analytic quadratic") {
  auto f = [](const std::vector<double>& x) {
    return 3.0 * x[0] * x[0] + x[0] * x[1] - 2.0 * x[1];
  };
  auto g = finite_difference_grad(f, {1.5, -0.5}, 1e-6);
  CHECK(std::abs(g[0] - (6.0 * 1.5 - 0.5)) < 1e-6);
  CHECK(std::abs(g[1] - (1.5 - 2.0)) < 1e-6);

  auto nan_f = [](const std::vector<double>& x) { return std::sqrt(x[0]); };
  CHECK_THROWS_AS(finite_difference_grad(nan_f, {-1.0}, 1e-6), OracleFailure);
}

TEST_CASE("percentile interpolates linearly like numpy") {
  std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  CHECK(percentile(v, 0) == 1.0);
  CHECK(percentile(v, 100) == 4.0);
  CHECK(percentile(v, 50) == doctest::Approx(2.5));
  CHECK(percentile(v, 25) == doctest::Approx(1.75));
  CHECK(percentile({42.0}, 97.5) == 42.0);
  CHECK_THROWS_AS(percentile({}, 50), InvalidInput);
  CHECK_THROWS_AS(percentile({1.0}, 101), InvalidInput);
}

TEST_CASE("parallel_for result matches serial and propagates exceptions") {
  const int64_t n = 1000;
  std::vector<int64_t> serial(n), parallel(n);
  parallel_for(n, 1, [&](int64_t i) { serial[i] = i * i; });
  parallel_for(n, 8, [&](int64_t i) { parallel[i] = i * i; });
  CHECK(serial == parallel);
  CHECK_THROWS_AS(parallel_for(10, 4,
                               [](int64_t i) {
                                 if (i == 7) throw InvalidInput("boom");
                               }),
                  InvalidInput);
}

TEST_CASE("AdamW first step matches the hand-computed update") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.999;
  cfg.eps = 1e-8;
  cfg.weight_decay = 0.01;
  std::vector<double> p{1.0, -2.0};
  std::vector<double> g{0.5, 0.25};
  AdamW<double> opt(cfg, {&p});
  opt.step({&p}, {&g}, 0.0);
  CHECK(opt.steps_taken() == 1);
  // bias-corrected m-hat == g on step one, so update = g/(|g|+eps) + wd*p
  for (size_t j = 0; j < p.size(); ++j) {
    double init = j == 0 ? 1.0 : -2.0;
    double gj = g[j];
    double mhat = gj;                       // (1-b1)g / (1-b1)
    double vhat = gj * gj;                  // (1-b2)g^2 / (1-b2)
    double expect = init - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                     cfg.weight_decay * init);
    CHECK(p[j] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("AdamW global-norm clip rescales the whole gradient") {
  AdamWConfig cfg;
  cfg.lr = 1.0;
  cfg.weight_decay = 0.0;
  std::vector<double> g{3.0, 4.0};  // norm 5
  std::vector<double> g_pre{0.6, 0.8};
  std::vector<double> pa{0.0, 0.0}, pb{0.0, 0.0};
  AdamW<double> oa(cfg, {&pa}), ob(cfg, {&pb});
  oa.step({&pa}, {&g}, 1.0);      // clipped by 1/5
  ob.step({&pb}, {&g_pre}, 0.0);  // pre-scaled, no clip
  for (size_t j = 0; j < pa.size(); ++j) CHECK(pa[j] == doctest::Approx(pb[j]).epsilon(1e-12));
}

TEST_CASE("hash_bytes depends on every byte and on the seed") {
  const char a[] = "abcdefgh12345";
  const char b[] = "abcdefgh12346";
  CHECK(hash_bytes(a, sizeof(a)) != hash_bytes(b, sizeof(b)));
  CHECK(hash_bytes(a, sizeof(a)) == hash_bytes(a, sizeof(a)));
  CHECK(hash_bytes(a, sizeof(a), 1) != hash_bytes(a, sizeof(a), 2));
  CHECK(hash_bytes(a, 5) != hash_bytes(a, 6));
}
