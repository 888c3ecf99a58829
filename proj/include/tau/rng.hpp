#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

namespace tau {

// Deterministic pseudorandom generator built on the splitmix64 mixer
// (Vigna, 2015). One 64-bit word of state, the same draw sequence for a
// given seed on every platform. Gaussian draws use Box-Muller without a
// cached spare, so the full generator state is always the single word
// returned by state().
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 significant bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n). Modulo bias is below 2^-53 for desk-scale n and
  // irrelevant next to the determinism requirement.
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Standard normal draw; consumes exactly two uniforms per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();  // log(0) guard; astronomically rare
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates shuffle in descending index order.
  template <typename V>
  void shuffle(V& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

  // Derives an independent stream, e.g. per-sample generators keyed by index.
  static uint64_t mix(uint64_t seed, uint64_t stream) {
    Rng r(seed ^ (0x632BE59BD9B4E019ULL * (stream + 1)));
    return r.next_u64();
  }

 private:
  uint64_t state_;
};

}  // namespace tau
