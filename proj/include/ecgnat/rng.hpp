#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ecgnat/common.hpp"

namespace ecgnat {

// xoshiro256** with an explicit, serializable 4-word state. Every sampling
// routine the trainer uses goes through this type so that checkpoint
// resume reproduces the exact random stream.
class Rng {
 public:
  Rng() : Rng(0x9e3779b97f4a7c15ull) {}

  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    // splitmix64 expansion of the seed into the xoshiro state
    uint64_t x = seed;
    for (auto& w : s_) {
      x += 0x9e3779b97f4a7c15ull;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      w = z ^ (z >> 31);
    }
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n) {
    check(n > 0, "Rng::next_below: n must be positive");
    // rejection sampling to avoid modulo bias
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // standard normal via Box-Muller; the spare value is discarded so the
  // sampler carries no hidden state across calls
  double gaussian() {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double gaussian(double mean, double std) { return mean + std * gaussian(); }

  // normal truncated to [-2 std, 2 std], rejection sampled
  double trunc_gaussian(double std) {
    double v = gaussian() * std;
    while (std::fabs(v) > 2.0 * std) v = gaussian() * std;
    return v;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = size_t(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from [0, n), ascending
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k) {
    check(k >= 0 && k <= n, "Rng::sample_without_replacement: k out of range");
    std::vector<int64_t> pool(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pool[size_t(i)] = i;
    // partial Fisher-Yates: first k entries become the sample
    for (int64_t i = 0; i < k; ++i) {
      const int64_t j = i + int64_t(next_below(uint64_t(n - i)));
      std::swap(pool[size_t(i)], pool[size_t(j)]);
    }
    pool.resize(size_t(k));
    std::sort(pool.begin(), pool.end());
    return pool;
  }

  std::array<uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<uint64_t, 4> s_{};
};

// stable mix for deriving per-stream seeds (per split repeat, per dataset)
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed ^ (0x9e3779b97f4a7c15ull + (stream << 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace ecgnat
