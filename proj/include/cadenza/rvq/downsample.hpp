#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "cadenza/core/autograd.hpp"
#include "cadenza/core/layers.hpp"
#include "cadenza/rvq/features.hpp"

namespace cadenza::rvq {

class SequenceMixer {
 public:
  virtual ~SequenceMixer() = default;
  virtual ag::Var forward(const ag::Var& x) const = 0;
  virtual void collect(std::vector<ag::Var>& out) const = 0;
};

// Returns its input unchanged.
class IdentityMixer final : public SequenceMixer {
 public:
  ag::Var forward(const ag::Var& x) const override { return x; }
  void collect(std::vector<ag::Var>&) const override {}
};

// Bidirectional transformer encoder.
class AttentionMixer final : public SequenceMixer {
 public:
  AttentionMixer(std::size_t channels, std::size_t n_blocks, std::size_t n_heads, Rng& rng);
  ag::Var forward(const ag::Var& x) const override;
  void collect(std::vector<ag::Var>& out) const override;

 private:
  std::vector<nn::TransformerBlock> blocks_;
};

// Inserts a learnable query after every two frames, mixes the interleaved
// sequence and keeps the query outputs: 25 Hz in, 12.5 Hz out.
struct QueryDownsampler {
  ag::Var query;  // 1 x C
  std::shared_ptr<SequenceMixer> mixer;

  QueryDownsampler() = default;
  QueryDownsampler(std::size_t channels, std::shared_ptr<SequenceMixer> m, Rng& rng);

  // x must have an even number of rows.
  ag::Var forward(const ag::Var& x) const;
  void collect(std::vector<ag::Var>& out) const;
};

// Odd inputs get one zero frame appended (recorded in pad_frames).
FeatureSeq downsample_queries(const FeatureSeq& y_h, const QueryDownsampler& q);

// Maps L x C low-rate features to (L * ratio) x C_i at a target level rate:
// a linear layer to ratio * C_i, then each row split into `ratio` frames.
struct Upsampler {
  nn::Linear proj;
  std::size_t ratio = 2;
  std::size_t out_channels = 0;

  Upsampler() = default;
  Upsampler(std::size_t in_channels, std::size_t out_channels, std::size_t ratio, Rng& rng);

  ag::Var forward(const ag::Var& y) const;
  void collect(std::vector<ag::Var>& out) const { proj.collect(out); }
};

}  // namespace cadenza::rvq
