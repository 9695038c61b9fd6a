#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "cadenza/core/autograd.hpp"
#include "cadenza/core/mat.hpp"

namespace cadenza::flow {

// frames x D continuous latents
struct LatentSeq {
  Mat data;
  std::size_t frames() const { return data.rows; }
  std::size_t dim() const { return data.cols; }
};

// Linear chunk codec: each chunk of `chunk` samples maps to D latents through
// an orthonormal basis fit by PCA. Trailing partial chunks are zero padded.
struct LatentCodec {
  Mat basis;    // chunk x D, orthonormal columns (encoder)
  Mat mean;     // 1 x chunk
  Mat decoder;  // chunk x D; starts equal to basis, moved by decoder finetuning
  Mat bias;     // 1 x chunk; starts equal to mean

  std::size_t chunk() const { return basis.rows; }
  std::size_t dim() const { return basis.cols; }

  LatentSeq encode(std::span<const double> signal) const;
  std::vector<double> decode(const LatentSeq& z) const;
  // Differentiable decode with the decoder weights as explicit inputs:
  // rows of z times decoder^T plus bias, flattened to 1 x (frames * chunk).
  static ag::Var decode_var(const ag::Var& z, const ag::Var& decoder, const ag::Var& bias);
};

// Throws EmptyCorpus when the corpus holds no full chunk.
LatentCodec fit_codec(std::span<const std::vector<double>> corpus, std::size_t chunk, std::size_t dim);

std::vector<std::uint8_t> encode_codec(const LatentCodec& c);
LatentCodec decode_codec(std::span<const std::uint8_t> bytes);

}  // namespace cadenza::flow
