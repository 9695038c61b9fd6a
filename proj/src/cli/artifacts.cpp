#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "cadenza/cli/pipeline.hpp"
#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"
#include "cadenza/core/layers.hpp"
#include "cadenza/core/optim.hpp"
#include "cadenza/core/signal.hpp"
#include "cadenza/flow/flow.hpp"
#include "cadenza/rvq/features.hpp"

namespace cadenza::cli {

using ag::Var;

void save_signal(const fs::path& path, const Signal& s) {
  ByteWriter w;
  w.magic("SIGL", 1);
  w.f64(s.sample_rate);
  w.u32(static_cast<std::uint32_t>(s.samples.size()));
  for (double x : s.samples) w.f32(static_cast<float>(x));
  write_file(path, w.bytes());
}

Signal load_signal(const fs::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  r.expect_magic("SIGL", 1);
  Signal s;
  s.sample_rate = r.f64();
  const std::uint32_t n = r.u32();
  if (r.remaining() != 4ull * n) throw Error(ErrorCode::BadCheckpoint, "signal length field disagrees with payload");
  s.samples.resize(n);
  for (auto& x : s.samples) x = r.f32();
  return s;
}

void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  ByteWriter w;
  w.magic("CKPT", 1);
  w.str(c.kind);
  w.str(c.stage);
  w.str(c.config_hash);
  w.u64(c.payload.size());
  for (auto b : c.payload) w.u8(b);
  write_file(path, w.bytes());
}

Checkpoint load_checkpoint(const fs::path& path, std::string_view kind) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  r.expect_magic("CKPT", 1);
  Checkpoint c;
  c.kind = r.str();
  c.stage = r.str();
  c.config_hash = r.str();
  const std::uint64_t n = r.u64();
  if (r.remaining() != n) throw Error(ErrorCode::BadCheckpoint, "checkpoint payload is truncated");
  if (c.kind != kind)
    throw Error(ErrorCode::BadCheckpoint, path.string() + " holds a " + c.kind + " checkpoint, expected " + std::string(kind));
  c.payload.resize(n);
  for (auto& b : c.payload) b = r.u8();
  return c;
}

namespace {

rvq::SyntheticFeatureLevels feature_levels(double sample_rate, std::uint64_t seed) {
  return rvq::SyntheticFeatureLevels(sample_rate, rvq::SyntheticFeatureLevels::default_levels(), seed);
}

std::size_t level_width() {
  std::size_t w = 0;
  for (const auto& l : rvq::SyntheticFeatureLevels::default_levels()) w += l.dim;
  return w;
}

Mat pad_even(Mat x) {
  if (x.rows % 2 == 1) {
    x.data.resize(x.data.size() + x.cols, 0.0);
    ++x.rows;
  }
  return x;
}

ToySignalConfig signal_config(double sample_rate) {
  ToySignalConfig t;
  t.sample_rate = sample_rate;
  t.chunk = static_cast<std::size_t>(std::llround(sample_rate / flow::kLatentRate));
  return t;
}

}  // namespace

std::vector<double> toy_clip(const ProjectConfig& cfg, Rng& rng) {
  return toy_signal(cfg.rvq.clip_seconds, signal_config(cfg.rvq.sample_rate), rng);
}

double relative_error(std::span<const double> reference, std::span<const double> estimate) {
  const std::size_t n = std::min(reference.size(), estimate.size());
  if (n == 0) throw Error(ErrorCode::LengthMismatch, "nothing to compare");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += reference[i];
  mean /= double(n);
  double err = 0.0, var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    err += (estimate[i] - reference[i]) * (estimate[i] - reference[i]);
    var += (reference[i] - mean) * (reference[i] - mean);
  }
  return var > 0.0 ? err / var : err / double(n);
}

Codec Codec::train(const ProjectConfig& cfg, std::span<const std::vector<double>> corpus, std::ostream* log) {
  if (corpus.empty()) throw Error(ErrorCode::EmptyCorpus, "codec training needs at least one clip");
  Codec c;
  c.sample_rate_ = cfg.rvq.sample_rate;
  c.feature_seed_ = Rng::derive_seed(cfg.seed, 1);
  c.feature_dim_ = cfg.rvq.feature_dim;
  c.mixer_blocks_ = cfg.rvq.mixer_blocks;
  c.mixer_heads_ = cfg.rvq.mixer_heads;

  Rng rng(Rng::derive_seed(cfg.seed, 2));
  c.fuser_ = rvq::FeatureFuser(level_width(), c.feature_dim_, rng);
  c.down_ = rvq::QueryDownsampler(
      c.feature_dim_, std::make_shared<rvq::AttentionMixer>(c.feature_dim_, c.mixer_blocks_, c.mixer_heads_, rng), rng);
  c.up_ = rvq::Upsampler(c.feature_dim_, c.feature_dim_, 2, rng);

  // The fuser stays a fixed projection; the downsampler and upsampler learn to
  // carry the fused features through the half-rate bottleneck.
  std::vector<Mat> fused;
  for (const auto& sig : corpus) fused.push_back(pad_even(c.fused_features(sig).data));
  std::vector<Var> params;
  c.down_.collect(params);
  c.up_.collect(params);
  Adam opt(params, AdamConfig{cfg.rvq.compressor_lr});
  Rng crop_rng(Rng::derive_seed(cfg.seed, 5));
  for (std::size_t step = 0; step < cfg.rvq.compressor_steps; ++step) {
    // Random even-aligned crops keep the full-attention mixer cheap.
    const Mat& clip = fused[crop_rng.index(fused.size())];
    const std::size_t len = std::min(clip.rows, 2 * (cfg.rvq.compressor_crop / 2));
    const std::size_t start = 2 * crop_rng.index((clip.rows - len) / 2 + 1);
    Mat x(len, clip.cols);
    std::copy(clip.row(start).begin(), clip.row(start).begin() + static_cast<std::ptrdiff_t>(len * clip.cols),
              x.data.begin());
    Var xv(std::move(x));
    Var loss = ag::mean(ag::square(ag::sub(c.up_.forward(c.down_.forward(xv)), xv)));
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (log && (step % 100 == 0 || step + 1 == cfg.rvq.compressor_steps))
      *log << "compressor step " << step << " recon " << loss.item() << "\n";
  }

  std::vector<rvq::FeatureSeq> low;
  for (const auto& sig : corpus) low.push_back(c.low_rate_features(sig));
  c.books_ = rvq::train_codebooks(low, rvq::KMeansConfig{cfg.rvq.num_books, cfg.rvq.vocab, cfg.rvq.kmeans_iters,
                                                         Rng::derive_seed(cfg.seed, 3)});

  const auto sc = signal_config(cfg.rvq.sample_rate);
  c.latent_ = flow::fit_codec(corpus, sc.chunk, cfg.flow.latent_dim);

  std::vector<flow::FlowExample> examples;
  // The field is frame-wise, so clips are cut into short segments to keep
  // training batches small.
  const std::size_t seg = std::max<std::size_t>(1, cfg.flow.segment);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto cond = c.flow_condition(rvq::rvq_encode(low[i], c.books_).tokens);
    const auto z = c.latent_.encode(corpus[i]);
    const std::size_t n = std::min(cond.frames(), z.frames());
    for (std::size_t s0 = 0; s0 < n; s0 += seg) {
      const std::size_t len = std::min(seg, n - s0);
      rvq::FeatureSeq cs{Mat(len, cond.channels()), rvq::kHighRate, 0};
      flow::LatentSeq zs{Mat(len, z.dim())};
      for (std::size_t r = 0; r < len; ++r) {
        std::copy(cond.data.row(s0 + r).begin(), cond.data.row(s0 + r).end(), cs.data.row(r).begin());
        std::copy(z.data.row(s0 + r).begin(), z.data.row(s0 + r).end(), zs.data.row(r).begin());
      }
      examples.push_back({std::move(cs), std::move(zs), std::nullopt});
    }
  }
  flow::MlpFieldConfig fc;
  fc.latent_dim = cfg.flow.latent_dim;
  fc.cond_dim = c.feature_dim_;
  fc.hidden = cfg.flow.hidden;
  fc.blocks = cfg.flow.blocks;
  c.field_.emplace(fc, rng);
  flow::FlowTrainConfig tc;
  tc.steps = cfg.flow.train_steps;
  tc.batch = cfg.flow.batch;
  tc.lr = cfg.flow.lr;
  tc.cond_drop = cfg.flow.cond_drop;
  tc.random_masks = cfg.flow.random_masks;
  tc.seed = Rng::derive_seed(cfg.seed, 4);
  flow::train_flow(*c.field_, examples, tc, [&](std::size_t step, double loss) {
    if (log && (step % 50 == 0 || step + 1 == tc.steps)) *log << "flow step " << step << " loss " << loss << "\n";
  });
  return c;
}

rvq::FeatureSeq Codec::fused_features(std::span<const double> signal) const {
  const auto levels = feature_levels(sample_rate_, feature_seed_).extract(signal);
  return rvq::fuse_features(levels, fuser_);
}

rvq::FeatureSeq Codec::low_rate_features(std::span<const double> signal) const {
  return rvq::downsample_queries(fused_features(signal), down_);
}

rvq::TokenFrameSeq Codec::tokenize(std::span<const double> signal) const {
  return rvq::rvq_encode(low_rate_features(signal), books_).tokens;
}

rvq::FeatureSeq Codec::flow_condition(const rvq::TokenFrameSeq& tokens) const {
  const auto low = rvq::rvq_decode(tokens, books_);
  return {up_.forward(Var(low.data)).value(), rvq::kHighRate, 0};
}

std::vector<double> Codec::detokenize(const rvq::TokenFrameSeq& tokens, std::size_t steps, double cfg_scale,
                                      std::uint64_t seed) const {
  if (tokens.num_books != books_.num_books())
    throw Error(ErrorCode::DimMismatch, "token file has a different number of codebooks than the codec");
  const auto cond = flow_condition(tokens);
  Rng rng(seed);
  const auto z = flow::euler_sample(*field_, cond, 2 * tokens.frames, std::nullopt, steps, cfg_scale, rng);
  return latent_.decode(z);
}

std::vector<std::uint8_t> Codec::encode() const {
  ByteWriter w;
  w.magic("CDEC", 1);
  w.f64(sample_rate_);
  w.u64(feature_seed_);
  w.u32(static_cast<std::uint32_t>(feature_dim_));
  w.u32(static_cast<std::uint32_t>(mixer_blocks_));
  w.u32(static_cast<std::uint32_t>(mixer_heads_));
  std::vector<Var> params;
  fuser_.collect(params);
  down_.collect(params);
  up_.collect(params);
  nn::write_params(w, params);
  auto blob = [&](const std::vector<std::uint8_t>& b) {
    w.u64(b.size());
    for (auto x : b) w.u8(x);
  };
  blob(rvq::encode_codebooks(books_));
  blob(flow::encode_codec(latent_));
  blob(flow::encode_field(*field_));
  return w.bytes();
}

Codec Codec::decode(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("CDEC", 1);
  Codec c;
  c.sample_rate_ = r.f64();
  c.feature_seed_ = r.u64();
  c.feature_dim_ = r.u32();
  c.mixer_blocks_ = r.u32();
  c.mixer_heads_ = r.u32();
  if (c.feature_dim_ == 0 || c.mixer_heads_ == 0 || c.feature_dim_ % c.mixer_heads_ != 0)
    throw Error(ErrorCode::BadCheckpoint, "codec architecture fields are inconsistent");
  Rng rng(0);
  c.fuser_ = rvq::FeatureFuser(level_width(), c.feature_dim_, rng);
  c.down_ = rvq::QueryDownsampler(
      c.feature_dim_, std::make_shared<rvq::AttentionMixer>(c.feature_dim_, c.mixer_blocks_, c.mixer_heads_, rng), rng);
  c.up_ = rvq::Upsampler(c.feature_dim_, c.feature_dim_, 2, rng);
  std::vector<Var> params;
  c.fuser_.collect(params);
  c.down_.collect(params);
  c.up_.collect(params);
  nn::read_params(r, params);
  auto blob = [&] {
    const std::uint64_t n = r.u64();
    if (n > r.remaining()) throw Error(ErrorCode::BadCheckpoint, "codec section is truncated");
    std::vector<std::uint8_t> b(n);
    for (auto& x : b) x = r.u8();
    return b;
  };
  c.books_ = rvq::decode_codebooks(blob());
  c.latent_ = flow::decode_codec(blob());
  c.field_.emplace(flow::decode_field(blob()));
  if (!r.at_end()) throw Error(ErrorCode::BadCheckpoint, "trailing bytes after codec");
  if (c.books_.dim() != c.feature_dim_ || c.field_->cond_dim() != c.feature_dim_ ||
      c.field_->latent_dim() != c.latent_.dim())
    throw Error(ErrorCode::BadCheckpoint, "codec parts disagree on widths");
  return c;
}

}  // namespace cadenza::cli
