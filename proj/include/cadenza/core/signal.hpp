#pragma once

#include <cstddef>
#include <vector>

#include "cadenza/core/rng.hpp"

namespace cadenza {

struct ToySignalConfig {
  double sample_rate = 800.0;
  std::size_t chunk = 32;      // samples per 25 Hz frame
  std::size_t harmonics = 8;   // cycles per chunk 1..harmonics
  double drift = 0.25;         // per-chunk random-walk step of the coefficients
};

// Piecewise-harmonic toy audio: every chunk is a sum of sines and cosines
// with 1..harmonics cycles per chunk, so each chunk lies exactly in a
// 2*harmonics dimensional subspace. Coefficients drift between chunks.
std::vector<double> toy_signal(double seconds, const ToySignalConfig& cfg, Rng& rng);

}  // namespace cadenza
