#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cadenza/core/autograd.hpp"
#include "cadenza/core/rng.hpp"

namespace cadenza::nn {

// y = x W + b, W is in x out.
struct Linear {
  ag::Var weight;
  ag::Var bias;  // undefined when built without bias

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);

  ag::Var operator()(const ag::Var& x) const;
  void collect(std::vector<ag::Var>& out) const;
  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }
};

// Pre-norm transformer block: x + Attn(norm(x)), then x + MLP(norm(x)) with a
// SiLU hidden layer of width 4d. Rotary positions are applied to q and k.
struct TransformerBlock {
  ag::Var attn_norm;
  Linear wq, wk, wv, wo;
  ag::Var mlp_norm;
  Linear up, down;
  std::size_t n_heads = 1;

  TransformerBlock() = default;
  TransformerBlock(std::size_t d, std::size_t n_heads, Rng& rng);

  ag::Var operator()(const ag::Var& x, std::span<const std::size_t> positions, const ag::KeySpans& spans) const;
  void collect(std::vector<ag::Var>& out) const;
};

}  // namespace cadenza::nn

namespace cadenza {
class ByteWriter;
class ByteReader;
}  // namespace cadenza

namespace cadenza::nn {

// Parameter blobs: u32 count, then each tensor as f32 with its shape.
void write_params(ByteWriter& w, const std::vector<ag::Var>& params);
// Shapes must match the receiving model; throws BadCheckpoint otherwise.
void read_params(ByteReader& r, std::vector<ag::Var>& params);

// Deep copies of parameter values, for frozen snapshots.
std::vector<Mat> snapshot(const std::vector<ag::Var>& params);
void restore(std::vector<ag::Var>& params, const std::vector<Mat>& values);

}  // namespace cadenza::nn
