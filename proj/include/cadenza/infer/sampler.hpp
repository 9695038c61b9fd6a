#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace cadenza::infer {

inline constexpr double kDefaultCfgScale = 1.5;
inline constexpr double kDefaultTemperature = 1.0;
inline constexpr std::size_t kDefaultTopK = 50;

struct SamplerConfig {
  double temperature = kDefaultTemperature;
  std::size_t top_k = kDefaultTopK;
  double cfg_scale = kDefaultCfgScale;
  bool cfg_local = false;  // also guide residual-layer logits

  void validate() const;  // BadConfig
};

// l_uncond + scale * (l_cond - l_uncond); scale 1 returns l_cond exactly.
// Throws ShapeMismatch.
std::vector<double> cfg_logits(std::span<const double> cond, std::span<const double> uncond, double scale);
void cfg_logits_into(std::span<const double> cond, std::span<const double> uncond, double scale, std::span<double> out);

// Reusable buffers so the sampler can run without allocating.
struct SampleScratch {
  std::vector<std::uint32_t> order;
  std::vector<double> weight;
  void reserve(std::size_t vocab);
};

// Keeps the top_k largest logits (ties to the lower index), applies the
// temperature (0 means argmax) and inverts the CDF, accumulated in ascending
// index order, at `u`: the first kept index whose running mass exceeds
// u * total wins. `u` must come from outside; nothing random happens here.
std::size_t top_k_sample(std::span<const double> logits, const SamplerConfig& cfg, double u);
std::size_t top_k_sample(std::span<const double> logits, const SamplerConfig& cfg, double u, SampleScratch& scratch);

}  // namespace cadenza::infer
