#pragma once

#include <cstdint>
#include <random>

#include "cadenza/core/mat.hpp"

namespace cadenza {

// Seeded random source. All randomness in the project flows through this
// type so that runs are reproducible from a single root seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  double normal() { return normal_(engine_); }
  std::uint64_t next_u64() { return engine_(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  Mat normal_mat(std::size_t rows, std::size_t cols, double stddev = 1.0) {
    Mat m(rows, cols);
    for (auto& x : m.data) x = stddev * normal();
    return m;
  }

  // Independent child stream; the parent advances by one draw.
  Rng fork() { return Rng(derive_seed(next_u64(), 0)); }

  static std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
    // splitmix64 finalizer over (root, stream)
    std::uint64_t z = root + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace cadenza
