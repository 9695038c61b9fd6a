#include "cadenza/infer/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "cadenza/core/error.hpp"

namespace cadenza::infer {

void SamplerConfig::validate() const {
  if (!(temperature >= 0.0)) throw Error(ErrorCode::BadConfig, "temperature must be >= 0");
  if (top_k < 1) throw Error(ErrorCode::BadConfig, "top_k must be >= 1");
  if (!std::isfinite(cfg_scale)) throw Error(ErrorCode::BadConfig, "cfg scale must be finite");
}

void cfg_logits_into(std::span<const double> cond, std::span<const double> uncond, double scale, std::span<double> out) {
  if (cond.size() != uncond.size() || out.size() != cond.size()) throw Error(ErrorCode::ShapeMismatch, "guidance logits");
  if (scale == 1.0) {
    std::copy(cond.begin(), cond.end(), out.begin());
    return;
  }
  for (std::size_t i = 0; i < cond.size(); ++i) out[i] = uncond[i] + scale * (cond[i] - uncond[i]);
}

std::vector<double> cfg_logits(std::span<const double> cond, std::span<const double> uncond, double scale) {
  std::vector<double> out(cond.size());
  cfg_logits_into(cond, uncond, scale, out);
  return out;
}

void SampleScratch::reserve(std::size_t vocab) {
  order.reserve(vocab);
  weight.reserve(vocab);
}

std::size_t top_k_sample(std::span<const double> logits, const SamplerConfig& cfg, double u) {
  SampleScratch s;
  return top_k_sample(logits, cfg, u, s);
}

std::size_t top_k_sample(std::span<const double> logits, const SamplerConfig& cfg, double u, SampleScratch& s) {
  const std::size_t V = logits.size();
  if (V == 0) throw Error(ErrorCode::ShapeMismatch, "empty logits");
  const std::size_t k = std::min(cfg.top_k == 0 ? 1 : cfg.top_k, V);
  s.order.resize(V);
  for (std::size_t i = 0; i < V; ++i) s.order[i] = static_cast<std::uint32_t>(i);
  const auto better = [&](std::uint32_t a, std::uint32_t b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  };
  std::partial_sort(s.order.begin(), s.order.begin() + static_cast<long>(k), s.order.end(), better);
  const std::uint32_t best = s.order[0];
  if (k == 1 || cfg.temperature == 0.0) return best;

  s.order.resize(k);
  std::sort(s.order.begin(), s.order.end());
  s.weight.resize(k);
  const double top = logits[best];
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += (s.weight[i] = std::exp((logits[s.order[i]] - top) / cfg.temperature));
  const double target = std::clamp(u, 0.0, 1.0) * total;
  double cum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    cum += s.weight[i];
    if (cum > target) return s.order[i];
  }
  return s.order[k - 1];
}

}  // namespace cadenza::infer
