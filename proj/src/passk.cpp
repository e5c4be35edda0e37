#include "moelab/passk.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "moelab/numerics.hpp"

namespace moelab {

namespace {

void check_nck(int n, int c, int K, const char* where) {
  if (n < 1) throw InvalidInput(std::string(where) + ": n must be >= 1");
  if (c < 0 || c > n) throw InvalidInput(std::string(where) + ": c must be in [0, n]");
  if (K < 1 || K > n) throw InvalidConfig(std::string(where) + ": K must be in [1, n]");
}

int sample_binomial(Rng& rng, int n, double p) {
  int c = 0;
  for (int i = 0; i < n; ++i)
    if (rng.uniform01() < p) ++c;
  return c;
}

}  // namespace

double pass_at_k(int n, int c, int K) {
  check_nck(n, c, K, "pass_at_k");
  if (c == 0) return 0.0;
  if (K > n - c) return 1.0;  // every size-K subset hits a correct one
  double miss = 1.0;
  for (int i = 0; i < K; ++i)
    miss *= static_cast<double>(n - c - i) / static_cast<double>(n - i);
  return 1.0 - miss;
}

double pass_at_k_log(int n, int c, int K) {
  check_nck(n, c, K, "pass_at_k_log");
  if (c == 0) return 0.0;
  if (K > n - c) return 1.0;
  auto lchoose = [](int a, int b) {
    return std::lgamma(a + 1.0) - std::lgamma(b + 1.0) - std::lgamma(a - b + 1.0);
  };
  return 1.0 - std::exp(lchoose(n - c, K) - lchoose(n, K));
}

std::pair<double, double> bootstrap_ci(std::span<const ProblemOutcome> outcomes, int K, int B,
                                       Rng rng) {
  if (outcomes.empty()) throw InvalidInput("bootstrap_ci: no outcomes");
  if (B < 1) throw InvalidConfig("bootstrap_ci: B must be >= 1");
  for (const auto& o : outcomes) check_nck(o.n, o.c, K, "bootstrap_ci");
  std::vector<double> means(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) {
    Rng rep = rng.child(static_cast<uint64_t>(b));
    double sum = 0.0;
    for (const auto& o : outcomes) {
      double p = static_cast<double>(o.c) / static_cast<double>(o.n);
      sum += pass_at_k(o.n, sample_binomial(rep, o.n, p), K);
    }
    means[static_cast<size_t>(b)] = sum / static_cast<double>(outcomes.size());
  }
  return {percentile(means, 2.5), percentile(means, 97.5)};
}

PassKCurve passk_curve(std::span<const ProblemOutcome> outcomes, std::span<const int> k_values,
                       int B, Rng rng) {
  if (outcomes.empty()) throw InvalidInput("passk_curve: no outcomes");
  if (k_values.empty()) throw InvalidConfig("passk_curve: empty K grid");
  PassKCurve curve;
  curve.k_values.assign(k_values.begin(), k_values.end());
  curve.bootstrap_resamples = B;
  curve.seed = rng.seed();
  for (int K : k_values) {
    double sum = 0.0;
    for (const auto& o : outcomes) sum += pass_at_k(o.n, o.c, K);
    curve.mean.push_back(sum / static_cast<double>(outcomes.size()));
    auto [lo, hi] = bootstrap_ci(outcomes, K, B, rng.child(static_cast<uint64_t>(K)));
    curve.ci_lo.push_back(lo);
    curve.ci_hi.push_back(hi);
  }
  return curve;
}

PassKEval eval_passk(const Sampler& sampler, std::span<const Problem> problems, int n,
                     std::span<const int> k_values, int B, Rng rng, int threads) {
  if (problems.empty()) throw InvalidInput("eval_passk: no problems");
  if (n < 1) throw InvalidConfig("eval_passk: n must be >= 1");
  for (int K : k_values)
    if (K < 1 || K > n) throw InvalidConfig("eval_passk: K must be in [1, n]");
  PassKEval ev;
  ev.outcomes.resize(problems.size());
  parallel_for(static_cast<int64_t>(problems.size()), threads, [&](int64_t i) {
    const Problem& p = problems[static_cast<size_t>(i)];
    Rng prng = rng.child(static_cast<uint64_t>(p.id));
    int c = 0;
    for (int s = 0; s < n; ++s) {
      Rng srng = prng.child(static_cast<uint64_t>(s));
      if (verify(p, sampler(p, srng))) ++c;
    }
    ev.outcomes[static_cast<size_t>(i)] = {p.id, n, c};
  });
  ev.curve = passk_curve(ev.outcomes, k_values, B, rng.child(~uint64_t{0}));
  return ev;
}

PassKEval eval_passk(const Params& params, std::span<const Problem> problems, int n,
                     const DecodeConfig& decode, std::span<const int> k_values, int B, Rng rng,
                     int threads) {
  return eval_passk(model_sampler(params, decode), problems, n, k_values, B, rng, threads);
}

void save_outcomes_csv(const std::string& path, std::span<const ProblemOutcome> outcomes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("save_outcomes_csv: cannot open " + path);
  out << "problem_id,n,c\n";
  for (const auto& o : outcomes)
    out << o.problem_id << "," << o.n << "," << o.c << "\n";
}

std::vector<ProblemOutcome> load_outcomes_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("load_outcomes_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "problem_id,n,c")
    throw CorruptData("load_outcomes_csv: bad header in " + path);
  std::vector<ProblemOutcome> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ProblemOutcome o;
    long long id = 0;
    if (std::sscanf(line.c_str(), "%lld,%d,%d", &id, &o.n, &o.c) != 3)
      throw CorruptData("load_outcomes_csv: bad row: " + line);
    o.problem_id = id;
    if (o.n < 1 || o.c < 0 || o.c > o.n)
      throw CorruptData("load_outcomes_csv: inconsistent counts: " + line);
    out.push_back(o);
  }
  return out;
}

void save_curve_csv(const std::string& path, const PassKCurve& curve) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("save_curve_csv: cannot open " + path);
  out << "K,mean,ci_lo,ci_hi\n";
  char buf[160];
  for (size_t i = 0; i < curve.k_values.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g\n", curve.k_values[i], curve.mean[i],
                  curve.ci_lo[i], curve.ci_hi[i]);
    out << buf;
  }
}

PassKCurve load_curve_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("load_curve_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "K,mean,ci_lo,ci_hi")
    throw CorruptData("load_curve_csv: bad header in " + path);
  PassKCurve curve;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    int K = 0;
    double mean = 0, lo = 0, hi = 0;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &K, &mean, &lo, &hi) != 4)
      throw CorruptData("load_curve_csv: bad row: " + line);
    curve.k_values.push_back(K);
    curve.mean.push_back(mean);
    curve.ci_lo.push_back(lo);
    curve.ci_hi.push_back(hi);
  }
  return curve;
}

}  // namespace moelab
