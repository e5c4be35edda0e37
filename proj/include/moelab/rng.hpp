#pragma once

#include <cmath>
#include <cstdint>

#include "moelab/errors.hpp"

namespace moelab {

namespace detail {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

// splitmix64 finalizer
constexpr uint64_t mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

}  // namespace detail

// Counter-based generator: the i-th output is a pure function of (seed, i),
// so state is just (seed, position) and any draw can be replayed exactly.
// Child streams are derived by mixing a stream id into the seed, which lets
// per-item work (one trajectory, one token, one bootstrap replicate) own an
// independent stream whose draws do not depend on processing order.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), pos_(0) {}
  Rng(uint64_t seed, uint64_t position) : seed_(seed), pos_(position) {}

  uint64_t seed() const noexcept { return seed_; }
  uint64_t position() const noexcept { return pos_; }

  uint64_t next_u64() {
    ++pos_;
    return detail::mix64(seed_ + detail::kGolden * pos_);
  }

  // Uniform on [2^-53, 1 - 2^-53]: both log(u) and log(1-u) stay finite.
  double uniform01() {
    constexpr double kScale = 0x1.0p-53;
    double u = static_cast<double>(next_u64() >> 11) * kScale;
    return u < kScale ? kScale : u;
  }

  // Unbiased enough for shuffles: bias is < 2^-64 per draw (fixed-point
  // multiply), and deterministic across platforms.
  uint64_t uniform_below(uint64_t n) {
    if (n == 0) throw InvalidInput("uniform_below: n must be positive");
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Box-Muller; consumes two draws per value.
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

  // Independent stream keyed by `stream`; position starts at zero.
  Rng child(uint64_t stream) const {
    return Rng(detail::mix64(seed_ ^ detail::mix64(stream + detail::kGolden)));
  }

 private:
  uint64_t seed_;
  uint64_t pos_;
};

}  // namespace moelab
