#pragma once

#include <cstdint>
#include <initializer_list>
#include <utility>
#include <vector>

namespace stacktag {

/// xoshiro256** (Blackman & Vigna), seeded through splitmix64.
///
/// Every random decision in the toolkit flows from one of these so that runs
/// are reproducible across platforms; std::shuffle and the std distributions
/// are implementation-defined and are deliberately not used.
class Xoshiro256 {
 public:
  static constexpr const char* kName = "xoshiro256**";

  explicit Xoshiro256(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  /// Stream derived from a base seed and a list of salts (e.g. seed, epoch).
  static Xoshiro256 derive(std::uint64_t seed, std::initializer_list<std::uint64_t> salts) {
    std::uint64_t x = seed;
    std::uint64_t mixed = splitmix64(x);
    for (std::uint64_t s : salts) {
      std::uint64_t y = mixed ^ (s + 0x9e3779b97f4a7c15ULL);
      mixed = splitmix64(y);
    }
    return Xoshiro256(mixed);
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound), unbiased (Lemire's rejection method).
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) return 0;
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = next();
      if (r >= threshold) return r % bound;
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_[4];
};

/// Fisher-Yates shuffle driven by Xoshiro256.
template <typename T>
void shuffle_in_place(std::vector<T>& v, Xoshiro256& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Xoshiro256& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  shuffle_in_place(idx, rng);
  return idx;
}

}  // namespace stacktag
