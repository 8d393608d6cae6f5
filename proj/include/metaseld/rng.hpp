#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace metaseld {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_str(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic RNG. All sampling is hand-rolled on top of the raw 64-bit
/// stream so sequences are identical across platforms and standard libraries.
/// Substreams are derived by mixing a tag into the seed, which keeps parallel
/// generation (one substream per clip / per purpose) order-independent.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : s_(splitmix64(seed ^ 0x5851f42d4c957f2dULL)) {}

  static Rng substream(uint64_t seed, std::string_view tag, uint64_t index = 0) {
    uint64_t s = splitmix64(seed);
    s = splitmix64(s ^ hash_str(tag));
    s = splitmix64(s ^ index);
    return Rng(s);
  }

  uint64_t next_u64() {
    // xorshift128+ on state expanded from the seed
    if (!init_) {
      a_ = splitmix64(s_);
      b_ = splitmix64(a_);
      init_ = true;
    }
    uint64_t x = a_, y = b_;
    a_ = y;
    x ^= x << 23;
    b_ = x ^ y ^ (x >> 17) ^ (y >> 26);
    return b_ + y;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

 private:
  uint64_t s_ = 0, a_ = 0, b_ = 0;
  bool init_ = false;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace metaseld
