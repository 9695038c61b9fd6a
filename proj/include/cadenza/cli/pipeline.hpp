#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cadenza/cli/config.hpp"
#include "cadenza/cli/manifest.hpp"
#include "cadenza/flow/codec.hpp"
#include "cadenza/flow/field.hpp"
#include "cadenza/lm/model.hpp"
#include "cadenza/lm/train.hpp"
#include "cadenza/rvq/downsample.hpp"
#include "cadenza/rvq/quantizer.hpp"

namespace cadenza::cli {

namespace fs = std::filesystem;

// "SIGL" v1: f64 sample rate, u32 count, f32 samples.
struct Signal {
  double sample_rate = 800.0;
  std::vector<double> samples;
};
void save_signal(const fs::path& path, const Signal& s);
Signal load_signal(const fs::path& path);

// "CKPT" v1: kind, training stage, config hash, then the module payload.
struct Checkpoint {
  std::string kind;   // codec, lm, clap
  std::string stage;  // codec, warmup, pretrain, sft, dpo, clap
  std::string config_hash;
  std::vector<std::uint8_t> payload;
};
void save_checkpoint(const fs::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const fs::path& path, std::string_view kind);  // BadCheckpoint on a wrong kind

// Compressor plus latent decoder: signal -> fused features -> 12.5 Hz queries
// -> RVQ tokens, and tokens -> flow-sampled latents -> signal.
class Codec {
 public:
  static Codec train(const ProjectConfig& cfg, std::span<const std::vector<double>> corpus, std::ostream* log = nullptr);

  rvq::FeatureSeq fused_features(std::span<const double> signal) const;  // 25 Hz
  rvq::FeatureSeq low_rate_features(std::span<const double> signal) const;  // 12.5 Hz
  rvq::TokenFrameSeq tokenize(std::span<const double> signal) const;
  // Dequantized tokens lifted back to 25 Hz by the learned upsampler; each
  // latent frame gets its own condition row.
  rvq::FeatureSeq flow_condition(const rvq::TokenFrameSeq& tokens) const;
  std::vector<double> detokenize(const rvq::TokenFrameSeq& tokens, std::size_t steps, double cfg_scale,
                                 std::uint64_t seed) const;

  std::vector<std::uint8_t> encode() const;
  static Codec decode(std::span<const std::uint8_t> bytes);  // BadCheckpoint on malformed payloads

  double sample_rate() const { return sample_rate_; }
  std::size_t feature_dim() const { return feature_dim_; }
  const rvq::CodebookSet& codebooks() const { return books_; }
  const flow::LatentCodec& latent_codec() const { return latent_; }

 private:
  Codec() = default;
  double sample_rate_ = 800.0;
  std::uint64_t feature_seed_ = 0;
  std::size_t feature_dim_ = 0, mixer_blocks_ = 0, mixer_heads_ = 0;
  rvq::FeatureFuser fuser_;
  rvq::QueryDownsampler down_;
  rvq::Upsampler up_;
  rvq::CodebookSet books_;
  flow::LatentCodec latent_;
  std::optional<flow::MlpVectorField> field_;
};

// Relative reconstruction error: MSE over the overlapping prefix divided by the
// variance of the reference.
double relative_error(std::span<const double> reference, std::span<const double> estimate);

// Toy signals at the configured sample rate; one 25 Hz frame per chunk.
std::vector<double> toy_clip(const ProjectConfig& cfg, Rng& rng);

// A random tag set and a short structured lyric used as synthetic prompts.
lyrics::TagSet synthetic_tags(Rng& rng);
lyrics::LyricsDoc synthetic_lyrics(Rng& rng);

lm::LMConfig lm_config(const ProjectConfig& cfg);
std::vector<lm::LMExample> build_lm_corpus(const ProjectConfig& cfg, const Codec& codec);

enum class TrainStage { Codec, Warmup, Pretrain, Sft, Dpo, Clap };
std::string stage_name(TrainStage s);
TrainStage parse_stage(std::string_view name);  // BadConfig

struct TrainArgs {
  TrainStage stage = TrainStage::Codec;
  fs::path out;
  std::optional<fs::path> codec;  // warmup, pretrain, sft
  std::optional<fs::path> init;   // pretrain (optional), sft (required)
  std::optional<fs::path> ref;    // dpo (required)
  std::optional<fs::path> pairs;  // dpo; built from the reference when absent
};

struct GenerateArgs {
  fs::path lm;
  std::optional<fs::path> lyrics;
  std::string tags;
  fs::path out;  // token file; a directory of item_<i>.toks when batch > 1
  bool stream = false;
  std::optional<fs::path> codec;       // decode to a toy signal when given
  std::optional<fs::path> signal_out;
};

struct BenchArgs {
  fs::path lm;
  fs::path out;
};

struct BuildPairsArgs {
  fs::path lm;
  fs::path out_dir;
};

// Every command writes <primary output>.manifest.json and returns the manifest.
RunManifest cmd_tokenize(const ProjectConfig& cfg, const fs::path& input, const fs::path& codec, const fs::path& out);
RunManifest cmd_detokenize(const ProjectConfig& cfg, const fs::path& tokens, const fs::path& codec, const fs::path& out);
RunManifest cmd_train(const ProjectConfig& cfg, const TrainArgs& args, std::ostream& log);
RunManifest cmd_generate(const ProjectConfig& cfg, const GenerateArgs& args, std::ostream& log);
RunManifest cmd_bench(const ProjectConfig& cfg, const BenchArgs& args, std::ostream& log);
RunManifest cmd_clap_train(const ProjectConfig& cfg, const fs::path& out, std::ostream& log);
RunManifest cmd_clap_eval(const ProjectConfig& cfg, const fs::path& ckpt, const fs::path& out, std::ostream& log);
RunManifest cmd_build_pairs(const ProjectConfig& cfg, const BuildPairsArgs& args, std::ostream& log);

}  // namespace cadenza::cli
