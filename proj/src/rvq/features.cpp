#include "cadenza/rvq/features.hpp"

#include <algorithm>
#include <cmath>

#include "cadenza/core/error.hpp"

namespace cadenza::rvq {

std::size_t frame_count(double duration_s, double frame_rate) {
  return static_cast<std::size_t>(std::llround(duration_s * frame_rate));
}

FeatureSeq resample_linear(const FeatureSeq& in, double target_rate, std::size_t frames) {
  FeatureSeq out{Mat(frames, in.channels()), target_rate, 0};
  const std::size_t n = in.frames();
  if (n == 0) return out;
  const double ratio = in.frame_rate / target_rate;
  for (std::size_t j = 0; j < frames; ++j) {
    double p = (static_cast<double>(j) + 0.5) * ratio - 0.5;
    p = std::clamp(p, 0.0, static_cast<double>(n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(p));
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    const double w = p - static_cast<double>(i0);
    for (std::size_t c = 0; c < in.channels(); ++c) out.data(j, c) = (1.0 - w) * in.data(i0, c) + w * in.data(i1, c);
  }
  return out;
}

SyntheticFeatureLevels::SyntheticFeatureLevels(double sample_rate, std::vector<LevelSpec> levels, std::uint64_t seed)
    : sample_rate_(sample_rate), levels_(std::move(levels)) {
  Rng rng(seed);
  for (const auto& lv : levels_) {
    const auto win = static_cast<std::size_t>(std::llround(sample_rate_ / lv.rate));
    if (win == 0 || lv.dim == 0) throw Error(ErrorCode::BadConfig, "feature level window or dim is zero");
    proj_.push_back(rng.normal_mat(win, lv.dim, 1.0 / std::sqrt(static_cast<double>(win)) * 2.0));
  }
}

std::vector<FeatureSeq> SyntheticFeatureLevels::extract_native(std::span<const double> signal) const {
  const double duration = static_cast<double>(signal.size()) / sample_rate_;
  std::vector<FeatureSeq> out;
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    const Mat& P = proj_[l];
    const std::size_t win = P.rows;
    const std::size_t n = frame_count(duration, levels_[l].rate);
    FeatureSeq f{Mat(n, P.cols), levels_[l].rate, 0};
    for (std::size_t t = 0; t < n; ++t) {
      auto row = f.data.row(t);
      for (std::size_t s = 0; s < win; ++s) {
        const std::size_t idx = t * win + s;
        const double x = idx < signal.size() ? signal[idx] : 0.0;
        if (x == 0.0) continue;
        for (std::size_t c = 0; c < P.cols; ++c) row[c] += x * P(s, c);
      }
      for (auto& v : row) v = std::tanh(v);
    }
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<FeatureSeq> SyntheticFeatureLevels::extract(std::span<const double> signal) const {
  const std::size_t n = frame_count(static_cast<double>(signal.size()) / sample_rate_, kHighRate);
  auto native = extract_native(signal);
  for (auto& f : native)
    if (f.frame_rate != kHighRate || f.frames() != n) f = resample_linear(f, kHighRate, n);
  return native;
}

ag::Var FeatureFuser::forward(const std::vector<ag::Var>& levels) const { return proj(ag::concat_cols(levels)); }

FeatureSeq fuse_features(std::span<const FeatureSeq> levels, const FeatureFuser& fuser) {
  if (levels.empty()) throw Error(ErrorCode::LengthMismatch, "no feature levels");
  std::vector<ag::Var> vars;
  std::size_t width = 0;
  for (const auto& l : levels) {
    if (l.frames() != levels[0].frames()) throw Error(ErrorCode::LengthMismatch, "feature levels differ in frame count");
    width += l.channels();
    vars.emplace_back(l.data);
  }
  if (width != fuser.proj.in()) throw Error(ErrorCode::DimMismatch, "fused width does not match projection");
  return FeatureSeq{fuser.forward(vars).value(), levels[0].frame_rate, 0};
}

}  // namespace cadenza::rvq
