#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cadenza/core/autograd.hpp"
#include "cadenza/core/layers.hpp"
#include "cadenza/lyrics/condition.hpp"
#include "cadenza/rvq/features.hpp"

namespace cadenza::clap {

struct MaskingConfig {
  double p_a = 0.1;  // drop a whole category
  double p_t = 0.1;  // drop one tag inside a multi-tag category
  void validate() const;
};

// One draw per present category, then one per tag of every surviving
// category that holds more than one tag. Emptied categories are removed.
lyrics::TagSet mask_description(const lyrics::TagSet& tags, const MaskingConfig& cfg, Rng& rng);

enum class DescriptionStyle { LabeledTags, BareTags, Sentence };

// "mood: soft, warm, genre: pop" / "soft, warm, pop" / a templated sentence.
// Categories appear in canonical order. Empty sets give "".
std::string format_description(const lyrics::TagSet& tags, DescriptionStyle style);
// Samples the style uniformly (one draw) when none is given.
std::string format_description(const lyrics::TagSet& tags, std::optional<DescriptionStyle> style, Rng& rng);

// Lower-cased alphanumeric words hashed into `buckets` ids.
std::vector<std::uint32_t> text_tokens(std::string_view text, std::size_t buckets);

struct DualEncoderConfig {
  std::size_t feature_dim = 32;
  std::size_t proj_dim = 32;
  std::size_t text_buckets = 1024;
  std::size_t text_embed_dim = 64;
  double tau_init = 0.07;
};

inline constexpr double kTauMin = 1e-2;
inline constexpr double kTauMax = 100.0;

class DualEncoder {
 public:
  DualEncoder(const DualEncoderConfig& cfg, Rng& rng);

  const DualEncoderConfig& config() const { return cfg_; }
  // N x proj_dim, unit rows. Mean over frames, then a linear map.
  ag::Var encode_music(std::span<const rvq::FeatureSeq> music) const;
  // N x proj_dim, unit rows. Mean of word embeddings, then a linear map.
  ag::Var encode_text(std::span<const std::string> texts) const;
  // exp(log_tau) with log_tau clamped so tau stays in [1e-2, 100].
  ag::Var tau() const;
  double tau_value() const { return tau().item(); }
  std::vector<ag::Var> params() const;

  ag::Var word_embed;  // buckets x text_embed_dim
  nn::Linear music_proj, text_proj;
  ag::Var log_tau;  // 1 x 1

 private:
  DualEncoderConfig cfg_;
};

// -sum_i log softmax_j(s_ij / tau)[i] - sum_i log softmax_j(s_ji / tau)[i]
// over unit-norm rows (s is the cosine). Throws BatchMismatch.
ag::Var infonce_loss(const ag::Var& music, const ag::Var& text, const ag::Var& tau);
double infonce_loss(const Mat& music, const Mat& text, double tau);

struct DirectionMetrics {
  std::map<std::size_t, double> recall;  // k -> R@k
  double map10 = 0.0;
};

struct RetrievalReport {
  DirectionMetrics text_to_music, music_to_text;
  std::string to_json() const;
};

// Row i of `music` matches row i of `text`. Ranks by cosine; ties go to the
// lower index. With a single relevant item mAP@10 is the truncated
// reciprocal rank. Throws DimMismatch.
RetrievalReport retrieval_metrics(const Mat& music, const Mat& text, std::span<const std::size_t> ks);

struct ClapExample {
  rvq::FeatureSeq music;
  lyrics::TagSet tags;
};

// Music built from per-tag latent vectors through a fixed random projection
// plus frame noise, so tags and audio features are correlated.
std::vector<ClapExample> synthetic_pairs(std::size_t n, std::size_t frames, std::size_t feature_dim, std::uint64_t seed);

struct ClapTrainConfig {
  std::size_t steps = 200;
  std::size_t batch = 32;
  double lr = 1e-2;
  MaskingConfig masking;
  std::uint64_t seed = 0;
};

struct ClapStep {
  std::size_t step = 0;
  double loss = 0.0;
  double tau = 0.0;
};

// Each step masks and re-formats every sampled description in a random style.
std::vector<ClapStep> train_clap(DualEncoder& enc, std::span<const ClapExample> data, const ClapTrainConfig& cfg,
                                 const std::function<void(const ClapStep&)>& on_step = {});

// Evaluation with unmasked labeled-tag descriptions.
RetrievalReport evaluate(const DualEncoder& enc, std::span<const ClapExample> data, std::span<const std::size_t> ks);

// "CEMB" v1: u32 N, u32 d, then N x d f32.
std::vector<std::uint8_t> encode_embeddings(const Mat& m);
Mat decode_embeddings(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_encoder(const DualEncoder& e);
DualEncoder decode_encoder(std::span<const std::uint8_t> bytes);

}  // namespace cadenza::clap
