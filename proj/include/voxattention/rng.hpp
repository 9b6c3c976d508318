#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace vox {

// Portable deterministic generator (xoshiro256**). All randomness in the
// project flows through this type so that seeded runs reproduce bit-exactly
// on any platform, independent of the C++ standard library's distributions.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    // fill the state with splitmix64, the seeding scheme recommended for
    // the xoshiro family
    for (auto& word : state_) word = split_mix(seed);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform in [0, n) without modulo bias (rejection sampling)
  uint64_t next_below(uint64_t n) {
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      const uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // uniform in [0, 1) with 53 random bits
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller; consumes two uniforms per pair, caches the second
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  bool next_bernoulli(double p) { return next_double() < p; }

  const std::array<uint64_t, 4>& state() const { return state_; }
  void set_state(const std::array<uint64_t, 4>& s) {
    state_ = s;
    have_spare_ = false;
  }

  // Stable derivation of sub-stream seeds, e.g. per-epoch shuffles or
  // per-item samplers: mixes the tag words into a fresh 64-bit seed.
  static uint64_t derive(uint64_t seed, uint64_t tag0, uint64_t tag1 = 0, uint64_t tag2 = 0) {
    uint64_t x = seed;
    x = mix(x ^ 0x9e3779b97f4a7c15ull);
    x = mix(x ^ tag0);
    x = mix(x ^ tag1);
    x = mix(x ^ tag2);
    return x;
  }

  static uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t split_mix(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    return mix(x);
  }

  std::array<uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace vox
