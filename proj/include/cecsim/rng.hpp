#ifndef CECSIM_RNG_HPP_
#define CECSIM_RNG_HPP_

#include <cstdint>
#include <random>
#include <string_view>

namespace cecsim {

// Deterministic random stream. Distributions are implemented here rather
// than through <random> distributions so traces are identical across
// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent stream derived from a root seed and a stream name.
  static Rng stream(std::uint64_t seed, std::string_view name);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::size_t uniform_index(std::size_t n);

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

// splitmix64 finalizer, used for seed derivation.
std::uint64_t mix_seed(std::uint64_t x);

}  // namespace cecsim

#endif  // CECSIM_RNG_HPP_
