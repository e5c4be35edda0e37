#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/rng.hpp"

namespace moelab {

template <class Real>
void require_finite(std::span<const Real> v, const char* where) {
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(static_cast<double>(v[i]))) {
      throw InvalidInput(std::string(where) + ": non-finite entry at index " +
                         std::to_string(i));
    }
  }
}

template <class Real>
Real log_sum_exp(std::span<const Real> v) {
  if (v.empty()) throw InvalidInput("log_sum_exp: empty input");
  require_finite(v, "log_sum_exp");
  Real m = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (Real x : v) acc += std::exp(static_cast<double>(x - m));
  return m + static_cast<Real>(std::log(acc));
}

template <class Real>
std::vector<Real> softmax(std::span<const Real> logits) {
  if (logits.empty()) throw InvalidInput("softmax: empty input");
  require_finite(logits, "softmax");
  Real m = *std::max_element(logits.begin(), logits.end());
  std::vector<Real> out(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    double e = std::exp(static_cast<double>(logits[i] - m));
    out[i] = static_cast<Real>(e);
    sum += e;
  }
  Real inv = static_cast<Real>(1.0 / sum);
  for (Real& x : out) x *= inv;
  return out;
}

template <class Real>
std::vector<Real> log_softmax(std::span<const Real> logits) {
  Real lse = log_sum_exp(logits);
  std::vector<Real> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

// Indices of the k largest values; ties break toward the lower index.
// Result is sorted ascending by index (canonical route order).
template <class Real>
std::vector<int> top_k_indices(std::span<const Real> scores, int k) {
  if (k < 0 || static_cast<size_t>(k) > scores.size())
    throw InvalidConfig("top_k_indices: k out of range");
  require_finite(scores, "top_k_indices");
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// n iid standard Gumbel draws scaled by `scale`; scale must be positive.
inline std::vector<double> gumbel_noise(Rng& rng, int n, double scale) {
  if (n < 0) throw InvalidInput("gumbel_noise: negative count");
  if (!(scale > 0.0)) throw InvalidConfig("gumbel_noise: scale must be > 0");
  std::vector<double> out(static_cast<size_t>(n));
  for (auto& g : out) g = -scale * std::log(-std::log(rng.uniform01()));
  return out;
}

// Perturbed top-k over a candidate pool: add scaled Gumbel noise to each
// pooled score, keep the k highest. Noise is drawn in pool order, one draw
// per candidate. Ties break toward the lower expert index. Returns expert
// ids sorted ascending.
template <class Real>
std::vector<int> gumbel_top_k(std::span<const Real> scores,
                              std::span<const int> pool, int k, Rng& rng,
                              double scale) {
  if (k < 0 || static_cast<size_t>(k) > pool.size())
    throw InvalidConfig("gumbel_top_k: k exceeds pool size");
  require_finite(scores, "gumbel_top_k");
  for (int id : pool) {
    if (id < 0 || static_cast<size_t>(id) >= scores.size())
      throw InvalidInput("gumbel_top_k: pool index out of range");
  }
  std::vector<double> noise = gumbel_noise(rng, static_cast<int>(pool.size()), scale);
  std::vector<double> perturbed(pool.size());
  for (size_t i = 0; i < pool.size(); ++i)
    perturbed[i] = static_cast<double>(scores[pool[i]]) + noise[i];
  std::vector<int> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](int a, int b) {
                      if (perturbed[a] != perturbed[b])
                        return perturbed[a] > perturbed[b];
                      return pool[a] < pool[b];
                    });
  std::vector<int> out(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) out[static_cast<size_t>(i)] = pool[order[static_cast<size_t>(i)]];
  std::sort(out.begin(), out.end());
  return out;
}

template <class Real>
std::vector<int> gumbel_top_k(std::span<const Real> scores, int k, Rng& rng,
                              double scale) {
  std::vector<int> pool(scores.size());
  std::iota(pool.begin(), pool.end(), 0);
  return gumbel_top_k(scores, std::span<const int>(pool), k, rng, scale);
}

// Central differences, always in double. Throws OracleFailure if f goes
// non-finite at any probe point, naming the coordinate.
inline std::vector<double> finite_difference_grad(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double eps) {
  if (!(eps > 0.0)) throw InvalidConfig("finite_difference_grad: eps must be > 0");
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    double saved = x[i];
    x[i] = saved + eps;
    double fp = f(x);
    x[i] = saved - eps;
    double fm = f(x);
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw OracleFailure("finite_difference_grad: non-finite value at coordinate " +
                          std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

// Percentile with numpy-style linear interpolation; q in [0, 100].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw InvalidInput("percentile: empty input");
  if (!(q >= 0.0 && q <= 100.0)) throw InvalidInput("percentile: q out of range");
  std::sort(v.begin(), v.end());
  double pos = (q / 100.0) * static_cast<double>(v.size() - 1);
  size_t lo = static_cast<size_t>(pos);
  size_t hi = std::min(lo + 1, v.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

// Static index-chunked parallel loop. With threads <= 1 runs inline; results
// must not depend on execution order (callers write to disjoint slots).
inline void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& body) {
  if (n <= 0) return;
  if (threads <= 1 || n == 1) {
    for (int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  int workers = static_cast<int>(std::min<int64_t>(threads, n));
  std::vector<std::thread> pool;
  std::exception_ptr first_error = nullptr;
  std::mutex err_mu;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (int64_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace moelab
