#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cadenza/core/autograd.hpp"
#include "cadenza/core/layers.hpp"
#include "cadenza/core/rng.hpp"
#include "cadenza/lyrics/condition.hpp"
#include "cadenza/lyrics/tokenizer.hpp"
#include "cadenza/rvq/quantizer.hpp"

namespace cadenza::lm {

struct LMConfig {
  std::size_t num_books = 8;  // K
  std::size_t vocab = 256;    // V
  std::size_t d_global = 128;
  std::size_t d_local = 64;
  std::size_t global_blocks = 4;
  std::size_t local_blocks = 2;
  std::size_t global_heads = 4;
  std::size_t local_heads = 4;
  std::size_t max_frames = 1024;
  std::size_t text_vocab = lyrics::tok::kVocabSize;
  std::size_t ref_dim = 32;

  // Throws BadConfig on K < 2, V < 2 or head/width mismatches.
  void validate() const;
  friend bool operator==(const LMConfig&, const LMConfig&) = default;
};

// h_l = sum_k table_k[a_{l,k}]. Throws IndexOutOfRange.
Mat frame_embed(std::span<const std::uint32_t> frame, std::span<const Mat> tables);

// Global/local factorized token model. The global transformer reads
// [C; BOS; h_0 .. h_{L-2}] and predicts layer 0 of every frame; the local
// transformer reads [proj(g_l); e(a_l0) .. e(a_l,K-2)] per frame and predicts
// layers 1..K-1.
class HierLM {
 public:
  HierLM(const LMConfig& cfg, Rng& rng);

  const LMConfig& config() const { return cfg_; }

  struct Output {
    std::vector<ag::Var> layer_logits;  // K entries, each L x V
    ag::Var global_hidden;              // L x d_global, normalized
  };

  // Teacher-forced pass. Throws TooLong when frames exceed max_frames.
  Output forward(const lyrics::CondSequence& cond, const rvq::TokenFrameSeq& frames) const;

  ag::Var joint_logprob_var(const lyrics::CondSequence& cond, const rvq::TokenFrameSeq& frames) const;
  double joint_logprob(const lyrics::CondSequence& cond, const rvq::TokenFrameSeq& frames) const;

  // Condition rows: text tokens through the shared text table, reference
  // vectors through the adapter.
  ag::Var embed_condition(const lyrics::CondSequence& cond) const;

  std::vector<ag::Var> params() const;
  std::size_t parameter_count() const;
  void copy_from(const HierLM& other);
  // Copies share parameter storage; clone() makes an independent model.
  HierLM clone() const;

  // Weights are public so the inference engine can read them directly.
  ag::Var text_embed;  // text_vocab x d_global
  nn::Linear ref_adapter;
  ag::Var bos;                        // 1 x d_global
  std::vector<ag::Var> frame_tables;  // K of V x d_global
  std::vector<nn::TransformerBlock> global_blocks;
  ag::Var global_norm;
  nn::Linear head0;  // d_global -> V, no bias

  nn::Linear to_local;                // d_global -> d_local
  std::vector<ag::Var> local_tables;  // K-1 of V x d_local
  std::vector<nn::TransformerBlock> local_blocks;
  ag::Var local_norm;
  std::vector<nn::Linear> local_heads;  // K-1 of d_local -> V

 private:
  LMConfig cfg_;
};

std::vector<std::uint8_t> encode_lm(const HierLM& m);
HierLM decode_lm(std::span<const std::uint8_t> bytes);

}  // namespace cadenza::lm
