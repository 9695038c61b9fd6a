#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "cadenza/core/autograd.hpp"
#include "cadenza/core/rng.hpp"
#include "cadenza/flow/codec.hpp"
#include "cadenza/flow/field.hpp"
#include "cadenza/rvq/features.hpp"

namespace cadenza::flow {

inline constexpr double kLatentRate = 25.0;
inline constexpr double kDefaultCfgScale = 1.25;
inline constexpr std::size_t kTeacherSteps = 50;
inline constexpr std::size_t kStudentSteps = 10;

// 1 = frame to predict, 0 = frame given as clean context.
struct MaskSpec {
  std::vector<std::uint8_t> mask;

  static MaskSpec full(std::size_t frames) { return {std::vector<std::uint8_t>(frames, 1)}; }
  std::size_t frames() const { return mask.size(); }
  std::size_t masked_count() const;
};

// One contiguous masked span covering a U(0.3, 1.0) fraction of the frames
// (at least one frame).
MaskSpec sample_mask(std::size_t frames, Rng& rng);

// z_t = t z1 + (1 - t) z0. Throws ShapeMismatch.
LatentSeq interpolate(const LatentSeq& z0, const LatentSeq& z1, double t);

// Repeats low-rate condition frames onto the latent frame grid; frames past
// the end of the condition reuse its last frame.
Mat align_cond(const rvq::FeatureSeq& cond, std::size_t frames, std::size_t cond_dim);

// (1 - m) * z1
Mat partial_latent(const Mat& z1, const MaskSpec& mask);

// Masked-frame MSE between v(z_t, t, cond, (1-m) z1) and z1 - z0 with the
// given noise and time.
ag::Var fm_loss_at(const VectorField& v, const Mat& z1, const Mat& z0, double t, const Mat& cond_rows,
                   const MaskSpec& mask);
// Draws t ~ U(0,1), then z0 ~ N(0, I), and evaluates fm_loss_at.
ag::Var fm_loss(const VectorField& v, const LatentSeq& z1, const rvq::FeatureSeq& cond, const MaskSpec& mask, Rng& rng);

struct Partial {
  MaskSpec mask;
  LatentSeq clean;
};

// v_u + s (v_c - v_u) with v_u evaluated on a zeroed condition; s == 1 uses
// the conditional field alone.
Mat guided_velocity(const VectorField& v, const Mat& z, std::span<const double> t, const Mat& cond_rows,
                    const Mat& partial, double cfg_scale);

// Uniform Euler steps from t=0 to t=1 starting at z0. Unmasked frames are
// replaced by the clean latents before every field evaluation and at the end.
LatentSeq euler_integrate(const VectorField& v, const Mat& z0, const Mat& cond_rows, const std::optional<Partial>& partial,
                          std::size_t steps, double cfg_scale);
LatentSeq euler_sample(const VectorField& v, const rvq::FeatureSeq& cond, std::size_t frames,
                       const std::optional<Partial>& partial, std::size_t steps, double cfg_scale, Rng& rng);

struct FlowExample {
  rvq::FeatureSeq cond;
  LatentSeq z1;
  std::optional<Mat> z0;  // fixed noise for reflow pairs; drawn fresh when absent
};

struct FlowTrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 8;
  double lr = 1e-3;
  double cond_drop = 0.1;  // whole-sequence condition dropout for guidance
  bool random_masks = true;
  std::uint64_t seed = 0;
};

// Adam on the batched masked MSE; returns per-step losses.
std::vector<double> train_flow(MlpVectorField& v, std::span<const FlowExample> data, const FlowTrainConfig& cfg,
                               const std::function<void(std::size_t, double)>& on_step = {});

// Integrates the frozen teacher from fresh noise for each condition, keeping
// (cond, z0, z1) endpoint pairs.
std::vector<FlowExample> make_reflow_pairs(const VectorField& teacher, std::span<const FlowExample> conds,
                                           std::size_t steps, double cfg_scale, Rng& rng);

// Student starts as a copy of the teacher and is trained on straight-line
// targets between the teacher's endpoints. Throws EmptyCorpus.
MlpVectorField reflow_distill(const MlpVectorField& teacher, std::span<const FlowExample> pairs, const FlowTrainConfig& cfg);

// Frame-wise mean L2 distance between two latent sequences.
double mean_l2(const Mat& a, const Mat& b);

using AdversarialHook = std::function<ag::Var(const ag::Var& x_hat, const ag::Var& x)>;

struct FinetuneLossCfg {
  double lambda_adv = 0.0;
  std::vector<std::size_t> stft_windows{16, 32, 64};
  AdversarialHook adversarial;  // empty hook contributes zero
};

// Frames of `win` samples with hop win/4 under a periodic Hann window; one row
// per full frame, win/2 + 1 magnitude bins.
ag::Var magnitude_spectrogram(const ag::Var& signal, std::size_t win);

// mean |x_hat - x| + mean over windows of the spectrogram MSE, plus
// lambda_adv * hook. Signals are 1 x N. Throws LengthMismatch, BadConfig.
ag::Var decoder_finetune_loss(const ag::Var& x_hat, const ag::Var& x, const FinetuneLossCfg& cfg);
double decoder_finetune_loss(std::span<const double> x_hat, std::span<const double> x, const FinetuneLossCfg& cfg);

struct DecoderPair {
  LatentSeq z;             // latents produced by the flow model
  std::vector<double> x;   // ground-truth signal
};

// Adapts the codec decoder (weights and bias only) to flow-produced latents.
std::vector<double> finetune_decoder(LatentCodec& codec, std::span<const DecoderPair> data, const FinetuneLossCfg& loss,
                                     std::size_t steps, double lr);

std::vector<std::uint8_t> encode_field(const MlpVectorField& v);
MlpVectorField decode_field(std::span<const std::uint8_t> bytes);

// "RFL1": u32 count then (cond, z0, z1) matrices as f32.
std::vector<std::uint8_t> encode_triplets(std::span<const FlowExample> pairs);
std::vector<FlowExample> decode_triplets(std::span<const std::uint8_t> bytes);

}  // namespace cadenza::flow
