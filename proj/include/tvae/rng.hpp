#pragma once

#include <array>
#include <cstdint>

namespace tvae {

/// xoshiro256** (Blackman & Vigna), seeded by running splitmix64 over the
/// 64-bit seed. Every derived distribution below is written out explicitly
/// so that a seed reproduces the same stream on every platform and compiler;
/// the <random> distributions are implementation-defined and are not used.
class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform integer in [0, n). Uses rejection so the result is unbiased.
  std::uint64_t below(std::uint64_t n);

  /// Standard normal via the Box-Muller transform. Two uniforms are consumed
  /// per call and no spare value is cached, so the state is only `state()`.
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  /// Independent child stream, derived from this one's next output.
  Rng split() { return Rng(next_u64()); }

  const State& state() const { return s_; }
  void set_state(const State& s) { s_ = s; }

 private:
  State s_{};
};

}  // namespace tvae
