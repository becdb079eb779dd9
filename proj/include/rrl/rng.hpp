#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace rrl {

// splitmix64, used for seed derivation and stream splitting.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return splitmix64(a ^ (0x9e3779b97f4a7c15ull + b + (a << 6) + (a >> 2)));
}

inline uint64_t hash_str(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// Derives a named substream seed from a base seed.
inline uint64_t substream(uint64_t seed, std::string_view tag, uint64_t index = 0) {
  return splitmix64(hash_combine(hash_combine(seed, hash_str(tag)), index));
}

// Demonstration seeds keep bit 63 clear, evaluation seeds set it. The two
// families can never collide regardless of base seed or index.
inline uint64_t demo_seed(uint64_t seed, uint64_t index) {
  return substream(seed, "demo", index) & ~(1ull << 63);
}
inline uint64_t eval_seed(uint64_t seed, uint64_t index) {
  return substream(seed, "eval", index) | (1ull << 63);
}

// mt19937_64 engine with local distribution functions. The standard engine is
// bit-stable across implementations; the standard distributions are not, so
// uniforms and normals are generated here.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    const uint64_t limit = ~0ull - ~0ull % n;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (no cached second value, so the stream
  // position is a pure function of call count).
  double normal() {
    double u1;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace rrl
