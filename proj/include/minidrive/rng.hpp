#pragma once
// Deterministic, platform-stable random streams. std::uniform_*_distribution
// is implementation-defined, so everything here is hand-rolled on top of
// splitmix64 to keep artifacts byte-identical across toolchains.

#include <cmath>
#include <cstdint>

namespace md {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // Derive an independent stream, e.g. per scenario or per module.
  Rng fork(std::uint64_t tag) const {
    std::uint64_t s = state_ ^ (0x517cc1b727220a95ULL * (tag + 1));
    splitmix64(s);
    return Rng(s);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  std::uint32_t next_u32(std::uint32_t bound) {  // [0, bound)
    return static_cast<std::uint32_t>(next_u64() % bound);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller; one draw per call keeps the stream position predictable.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::uint64_t state_;
};

}  // namespace md
