#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace dtlab {

// Deterministic random source. mt19937_64 is bit-stable across platforms, but
// the standard <random> distributions are not, so every draw that ends up in a
// dataset, parameter, or metric goes through the explicit helpers below.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Inclusive range [lo, hi] via Lemire's unbiased multiply-shift rejection.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t bound = static_cast<uint64_t>(hi - lo) + 1;
    uint64_t r = next_u64();
    __uint128_t m = static_cast<__uint128_t>(r) * bound;
    auto low = static_cast<uint64_t>(m);
    if (low < bound) {
      uint64_t threshold = (0ULL - bound) % bound;
      while (low < threshold) {
        r = next_u64();
        m = static_cast<__uint128_t>(r) * bound;
        low = static_cast<uint64_t>(m);
      }
    }
    return lo + static_cast<int64_t>(m >> 64);
  }

  int bit() { return static_cast<int>(next_u64() >> 63); }

  // Uniform float in [0, 1) with 24 mantissa bits.
  float uniform01() { return static_cast<float>(next_u64() >> 40) * 0x1p-24f; }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; the pair is computed in double and cached.
  float normal(float mu, float sigma) {
    if (have_spare_) {
      have_spare_ = false;
      return mu + sigma * static_cast<float>(spare_);
    }
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mu + sigma * static_cast<float>(r * std::cos(theta));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent substream seed, so e.g. model init, data shuffling
  // and perturbation noise never share a stream.
  static uint64_t substream(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dtlab
