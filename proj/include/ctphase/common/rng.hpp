#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "ctphase/common/hash.hpp"

namespace ctphase {

// Deterministic random source.  Wraps mt19937_64 with explicitly coded
// transforms (no std::*_distribution, whose output may differ across standard
// library implementations).  normal() is a cache-free Box-Muller: it burns two
// uniforms per draw so the draw count, and therefore the stream state, is a
// pure function of the number of calls.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).  n must be positive.
  uint64_t uniform_index(uint64_t n) {
    return static_cast<uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Standard normal.  Cache-free: always consumes exactly two uniforms.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    // Guard against log(0).
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  uint64_t raw() { return engine_(); }

  // Engine state round trip, used by training checkpoints so that a resumed
  // run replays the same draw sequence as an uninterrupted one.
  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void deserialize(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
  }

 private:
  std::mt19937_64 engine_;
};

// Named stream derivation: independent generators for independent purposes
// ("noise", "uptake-jitter", ...) all reproducible from one root seed.  The
// purpose string is folded into the seed with FNV-1a.
inline Rng stream_rng(uint64_t root_seed, std::string_view purpose) {
  uint64_t h = fnv1a64(purpose);
  // Mix the root seed in with a splitmix64 finalization round so nearby
  // root seeds give unrelated streams.
  uint64_t z = root_seed + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  z = z ^ (z >> 31);
  return Rng(z);
}

}  // namespace ctphase
