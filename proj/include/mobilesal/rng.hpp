#pragma once

#include <cmath>
#include <cstdint>

namespace mobilesal {

// PCG32 generator. Self-contained so that seeded runs are bit-reproducible
// across platforms and standard library versions.
class Pcg32 {
 public:
  explicit Pcg32(uint64_t seed = 0x853c49e6748fea9bULL, uint64_t stream = 1) {
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  // Uniform integer in [0, n), n > 0. Unbiased via rejection.
  uint32_t below(uint32_t n) {
    uint32_t threshold = (-n) % n;
    for (;;) {
      uint32_t r = next_u32();
      if (r >= threshold) return r % n;
    }
  }

  // Uniform double in [0, 1).
  double uniform() { return next_u32() * (1.0 / 4294967296.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; one value per call, cache the pair.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 1e-12);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  bool coin() { return (next_u32() & 1u) != 0; }

  // Derive an independent child generator; used to give each epoch or
  // sample its own stream without coupling draw counts.
  Pcg32 fork(uint64_t salt) {
    uint64_t s = (static_cast<uint64_t>(next_u32()) << 32) | next_u32();
    return Pcg32(s ^ (salt * 0x9e3779b97f4a7c15ULL), salt | 1);
  }

 private:
  uint64_t state_ = 0;
  uint64_t inc_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace mobilesal
