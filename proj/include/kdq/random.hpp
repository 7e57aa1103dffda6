// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "kdq/common.hpp"

namespace kdq {

// splitmix64; used to derive independent substreams from one master seed.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Derive a substream seed from (seed, tag). Streams for disjoint tags are
/// independent, so stages can consume randomness without affecting each other.
inline uint64_t derive_seed(uint64_t seed, std::string_view tag) {
  uint64_t s = seed ^ fnv1a64(tag.data(), tag.size());
  return splitmix64(s);
}

inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index) {
  uint64_t s = seed ^ fnv1a64(tag.data(), tag.size()) ^ (index * 0x9e3779b97f4a7c15ull);
  return splitmix64(s);
}

/// PCG32: small, fast, and bit-reproducible on every platform. The standard
/// library engines are portable but its distributions are not, so both live
/// here.
class Pcg32 {
 public:
  explicit Pcg32(uint64_t seed = 0x853c49e6748fea9bull, uint64_t seq = 0xda3e39cb94b95bdbull) {
    state_ = 0u;
    inc_ = (seq << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ull + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  /// Uniform in [0, 1).
  double uniform() { return (next_u32() >> 8) * 0x1.0p-24; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  float uniform_f(float lo, float hi) { return static_cast<float>(uniform(lo, hi)); }

  /// Uniform integer in [0, n).
  uint32_t below(uint32_t n) {
    // Lemire-style rejection for an unbiased bounded draw.
    uint64_t m = uint64_t(next_u32()) * n;
    uint32_t l = static_cast<uint32_t>(m);
    if (l < n) {
      uint32_t t = (-n) % n;
      while (l < t) {
        m = uint64_t(next_u32()) * n;
        l = static_cast<uint32_t>(m);
      }
    }
    return static_cast<uint32_t>(m >> 32);
  }

  /// Standard normal via Box-Muller (pairs cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = below(static_cast<uint32_t>(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  uint64_t inc_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace kdq
