#include "cadenza/core/signal.hpp"

#include <cmath>
#include <numbers>

namespace cadenza {

std::vector<double> toy_signal(double seconds, const ToySignalConfig& cfg, Rng& rng) {
  const auto n = static_cast<std::size_t>(std::llround(seconds * cfg.sample_rate));
  std::vector<double> out(n, 0.0);
  std::vector<double> coef(2 * cfg.harmonics);
  for (std::size_t h = 0; h < coef.size(); ++h) coef[h] = rng.normal() / static_cast<double>(1 + h / 2);
  for (std::size_t start = 0; start < n; start += cfg.chunk) {
    for (std::size_t s = start; s < std::min(n, start + cfg.chunk); ++s) {
      const double phase = 2.0 * std::numbers::pi * static_cast<double>(s - start) / static_cast<double>(cfg.chunk);
      double v = 0.0;
      for (std::size_t h = 0; h < cfg.harmonics; ++h) {
        const double k = static_cast<double>(h + 1);
        v += coef[2 * h] * std::cos(k * phase) + coef[2 * h + 1] * std::sin(k * phase);
      }
      out[s] = 0.25 * v;
    }
    for (std::size_t h = 0; h < coef.size(); ++h) coef[h] = 0.9 * coef[h] + cfg.drift * rng.normal() / static_cast<double>(1 + h / 2);
  }
  return out;
}

}  // namespace cadenza
