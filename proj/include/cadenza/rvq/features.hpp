#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cadenza/core/autograd.hpp"
#include "cadenza/core/layers.hpp"
#include "cadenza/core/mat.hpp"
#include "cadenza/core/rng.hpp"

namespace cadenza::rvq {

inline constexpr double kHighRate = 25.0;
inline constexpr double kLowRate = 12.5;

struct FeatureSeq {
  Mat data;  // frames x channels
  double frame_rate = kHighRate;
  std::size_t pad_frames = 0;  // zero frames appended before downsampling

  std::size_t frames() const { return data.rows; }
  std::size_t channels() const { return data.cols; }
};

std::size_t frame_count(double duration_s, double frame_rate);

// Linear interpolation onto `frames` frames at `target_rate`, sampling the
// source at frame centres. Edges clamp.
FeatureSeq resample_linear(const FeatureSeq& in, double target_rate, std::size_t frames);

struct LevelSpec {
  std::size_t dim;
  double rate;
};

// Four toy feature extractors standing in for pretrained encoders. Each level
// projects windows of the raw signal with a fixed random matrix and applies
// tanh, at its own native frame rate.
class SyntheticFeatureLevels {
 public:
  static std::vector<LevelSpec> default_levels() { return {{32, 25.0}, {32, 50.0}, {24, 50.0}, {24, 25.0}}; }

  SyntheticFeatureLevels(double sample_rate, std::vector<LevelSpec> levels, std::uint64_t seed);

  std::vector<FeatureSeq> extract_native(std::span<const double> signal) const;
  // All levels resampled to 25 Hz with round(duration * 25) frames.
  std::vector<FeatureSeq> extract(std::span<const double> signal) const;

  const std::vector<LevelSpec>& levels() const { return levels_; }
  double sample_rate() const { return sample_rate_; }

 private:
  double sample_rate_;
  std::vector<LevelSpec> levels_;
  std::vector<Mat> proj_;  // window x dim per level
};

// Concatenate levels along channels, then project to C channels.
struct FeatureFuser {
  nn::Linear proj;

  FeatureFuser() = default;
  FeatureFuser(std::size_t in_channels, std::size_t out_channels, Rng& rng) : proj(in_channels, out_channels, rng) {}

  ag::Var forward(const std::vector<ag::Var>& levels) const;
  void collect(std::vector<ag::Var>& out) const { proj.collect(out); }
};

// Throws LengthMismatch when frame counts differ, DimMismatch when the
// concatenated width does not match the projection.
FeatureSeq fuse_features(std::span<const FeatureSeq> levels, const FeatureFuser& fuser);

}  // namespace cadenza::rvq
