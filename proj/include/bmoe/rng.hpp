#pragma once

#include <cmath>
#include <cstdint>

namespace bmoe {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Deterministic generator used for every initialization and data draw.
/// Self-contained so that a seed reproduces bit-identical streams on any
/// platform, independent of the standard library's distributions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ^ 0xd1b54a32d192ed03ULL) {
    // burn-in decorrelates nearby seeds
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  /// uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// uniform integer in [lo, hi], inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(next_u64() %
                                     static_cast<uint64_t>(hi - lo + 1));
  }

  /// standard normal, Box-Muller with cached pair
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925287 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Independent child stream; forking with distinct ids never aliases the
  /// parent sequence.
  Rng fork(uint64_t stream_id) const {
    uint64_t s = state_ + (stream_id + 1) * 0x9e3779b97f4a7c15ULL;
    splitmix64(s);
    return Rng(splitmix64(s));
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace bmoe
