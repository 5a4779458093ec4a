#pragma once
// Deterministic RNG: splitmix64 streams with hand-rolled transforms so results
// are identical across standard libraries and build modes.
#include <cmath>
#include <cstdint>

namespace fgl {

inline uint64_t splitmix64_next(uint64_t& s) {
  s += 0x9e3779b97f4a7c15ull;
  uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from a base seed and up to three tags.
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t s = base;
  uint64_t h = splitmix64_next(s);
  s ^= a * 0x9e3779b97f4a7c15ull;
  h ^= splitmix64_next(s);
  s ^= b * 0xc2b2ae3d27d4eb4full;
  h ^= splitmix64_next(s);
  s ^= c * 0x165667b19e3779f9ull;
  h ^= splitmix64_next(s);
  return h;
}

class Rng {
public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64_next(state_); }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n), n >= 1; rejection sampling keeps it unbiased
  uint64_t uniform_int(uint64_t n) {
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // standard normal via Box-Muller; two uniforms per draw, no cached spare
  double normal() {
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

private:
  uint64_t state_;
};

}  // namespace fgl
