#pragma once

#include <cmath>
#include <cstdint>

namespace selfroll {

// Counter-based generator: draw i is a hash of (key, i), so the full state is
// two integers and any draw sequence can be reproduced or checkpointed exactly.
// Streams are derived with split(); no global RNG state exists anywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x5bf0'3635'dcb2'9d7full)) {}

  static Rng from_state(std::uint64_t key, std::uint64_t counter) {
    Rng r(0);
    r.key_ = key;
    r.counter_ = counter;
    return r;
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  // Independent stream; does not consume draws from this one.
  Rng split(std::uint64_t stream) const {
    Rng r(0);
    r.key_ = mix(key_ ^ mix(stream + 0x9e3779b97f4a7c15ull));
    r.counter_ = 0;
    return r;
  }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(key_ ^ (counter_ * 0x9e3779b97f4a7c15ull));
  }

  // [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1p-53; }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    auto v = static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
    return v >= n ? n - 1 : v;
  }

  // Box-Muller; each call consumes exactly two draws so the counter alone
  // captures the state.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace selfroll
