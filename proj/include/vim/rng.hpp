#pragma once

#include <cstdint>
#include <initializer_list>

namespace vim {

// SplitMix64 counter-based generator. Chosen because it is trivially
// portable: identical integer output on every platform, and cheap to
// fork into independent per-sample streams.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1). Derived from the top 53 bits, so the value is a
  // pure function of integer state and bit-identical across platforms.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  float uniform_f() { return static_cast<float>(next() >> 40) * 0x1.0p-24f; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next() % n; }

  int range(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

 private:
  uint64_t state_;
};

// Mixes an arbitrary list of 64-bit tags into one stream seed, so that
// (seed, split, index) and similar tuples get statistically independent
// generators without storing any state.
inline uint64_t derive_seed(std::initializer_list<uint64_t> tags) {
  uint64_t h = 0x8B72E7D0F9C1A35Bull;
  for (uint64_t t : tags) {
    h ^= t + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
    Rng mix(h);
    h = mix.next();
  }
  return h;
}

}  // namespace vim
