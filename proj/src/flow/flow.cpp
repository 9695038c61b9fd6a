#include "cadenza/flow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"
#include "cadenza/core/optim.hpp"

namespace cadenza::flow {

using namespace ag;

std::size_t MaskSpec::masked_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

MaskSpec sample_mask(std::size_t frames, Rng& rng) {
  MaskSpec m{std::vector<std::uint8_t>(frames, 0)};
  if (frames == 0) return m;
  const double frac = rng.uniform(0.3, 1.0);
  const std::size_t len = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(frac * double(frames))), 1, frames);
  const std::size_t start = rng.index(frames - len + 1);
  std::fill(m.mask.begin() + std::ptrdiff_t(start), m.mask.begin() + std::ptrdiff_t(start + len), 1);
  return m;
}

LatentSeq interpolate(const LatentSeq& z0, const LatentSeq& z1, double t) {
  if (!z0.data.same_shape(z1.data)) throw Error(ErrorCode::ShapeMismatch, "interpolation endpoints");
  LatentSeq out{Mat(z0.frames(), z0.dim())};
  for (std::size_t i = 0; i < out.data.data.size(); ++i) out.data.data[i] = t * z1.data.data[i] + (1.0 - t) * z0.data.data[i];
  return out;
}

Mat align_cond(const rvq::FeatureSeq& cond, std::size_t frames, std::size_t cond_dim) {
  Mat out(frames, cond_dim);
  if (cond.frames() == 0) return out;
  if (cond.channels() != cond_dim) throw Error(ErrorCode::DimMismatch, "condition width");
  const double ratio = cond.frame_rate / kLatentRate;
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t src = std::min(cond.frames() - 1, static_cast<std::size_t>(std::floor(double(f) * ratio + 1e-9)));
    std::copy(cond.data.row(src).begin(), cond.data.row(src).end(), out.row(f).begin());
  }
  return out;
}

Mat partial_latent(const Mat& z1, const MaskSpec& mask) {
  if (mask.frames() != z1.rows) throw Error(ErrorCode::ShapeMismatch, "mask length");
  Mat p = z1;
  for (std::size_t f = 0; f < z1.rows; ++f)
    if (mask.mask[f]) std::fill(p.row(f).begin(), p.row(f).end(), 0.0);
  return p;
}

namespace {

std::vector<std::size_t> masked_rows(const MaskSpec& m, std::size_t offset = 0) {
  std::vector<std::size_t> rows;
  for (std::size_t f = 0; f < m.frames(); ++f)
    if (m.mask[f]) rows.push_back(offset + f);
  return rows;
}

Mat interp(const Mat& z0, const Mat& z1, double t) {
  Mat out(z0.rows, z0.cols);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = t * z1.data[i] + (1.0 - t) * z0.data[i];
  return out;
}

Mat diff(const Mat& a, const Mat& b) {
  Mat out(a.rows, a.cols);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
  return out;
}

}  // namespace

Var fm_loss_at(const VectorField& v, const Mat& z1, const Mat& z0, double t, const Mat& cond_rows, const MaskSpec& mask) {
  if (!z0.same_shape(z1) || mask.frames() != z1.rows) throw Error(ErrorCode::ShapeMismatch, "flow loss operands");
  const auto rows = masked_rows(mask);
  if (rows.empty()) return Var::scalar(0.0);
  std::vector<double> ts(z1.rows, t);
  auto pred = v.velocity(Var(interp(z0, z1, t)), ts, Var(cond_rows), Var(partial_latent(z1, mask)));
  auto err = sub(gather_rows(pred, rows), gather_rows(Var(diff(z1, z0)), rows));
  return mean(square(err));
}

Var fm_loss(const VectorField& v, const LatentSeq& z1, const rvq::FeatureSeq& cond, const MaskSpec& mask, Rng& rng) {
  const double t = rng.uniform();
  Mat z0 = rng.normal_mat(z1.frames(), z1.dim());
  return fm_loss_at(v, z1.data, z0, t, align_cond(cond, z1.frames(), v.cond_dim()), mask);
}

Mat guided_velocity(const VectorField& v, const Mat& z, std::span<const double> t, const Mat& cond_rows, const Mat& partial,
                    double cfg_scale) {
  Mat vc = v.velocity(Var(z), t, Var(cond_rows), Var(partial)).value();
  if (cfg_scale == 1.0) return vc;
  Mat vu = v.velocity(Var(z), t, Var(Mat(cond_rows.rows, cond_rows.cols)), Var(partial)).value();
  for (std::size_t i = 0; i < vc.data.size(); ++i) vc.data[i] = vu.data[i] + cfg_scale * (vc.data[i] - vu.data[i]);
  return vc;
}

LatentSeq euler_integrate(const VectorField& v, const Mat& z0, const Mat& cond_rows, const std::optional<Partial>& partial,
                          std::size_t steps, double cfg_scale) {
  if (steps == 0) throw Error(ErrorCode::BadConfig, "euler integration needs at least one step");
  Mat z = z0;
  Mat context(z0.rows, z0.cols);
  auto pin = [&] {
    if (!partial) return;
    for (std::size_t f = 0; f < z.rows; ++f)
      if (!partial->mask.mask[f]) std::copy(partial->clean.data.row(f).begin(), partial->clean.data.row(f).end(), z.row(f).begin());
  };
  if (partial) {
    if (partial->mask.frames() != z0.rows || !partial->clean.data.same_shape(z0))
      throw Error(ErrorCode::ShapeMismatch, "partial latent shape");
    context = partial_latent(partial->clean.data, partial->mask);
  }
  const double dt = 1.0 / static_cast<double>(steps);
  std::vector<double> ts(z0.rows);
  for (std::size_t i = 0; i < steps; ++i) {
    pin();
    std::fill(ts.begin(), ts.end(), static_cast<double>(i) * dt);
    const Mat vel = guided_velocity(v, z, ts, cond_rows, context, cfg_scale);
    for (std::size_t k = 0; k < z.data.size(); ++k) z.data[k] += dt * vel.data[k];
  }
  pin();
  return LatentSeq{std::move(z)};
}

LatentSeq euler_sample(const VectorField& v, const rvq::FeatureSeq& cond, std::size_t frames,
                       const std::optional<Partial>& partial, std::size_t steps, double cfg_scale, Rng& rng) {
  Mat z0 = rng.normal_mat(frames, v.latent_dim());
  return euler_integrate(v, z0, align_cond(cond, frames, v.cond_dim()), partial, steps, cfg_scale);
}

std::vector<double> train_flow(MlpVectorField& v, std::span<const FlowExample> data, const FlowTrainConfig& cfg,
                               const std::function<void(std::size_t, double)>& on_step) {
  if (data.empty()) throw Error(ErrorCode::EmptyCorpus, "no flow training examples");
  if (cfg.batch == 0) throw Error(ErrorCode::BadConfig, "batch must be positive");
  auto params = v.params();
  Adam opt(params, AdamConfig{cfg.lr});
  Rng rng(cfg.seed);
  std::vector<double> losses;
  const std::size_t D = v.latent_dim();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    // Stack the batch along rows; the field is frame-wise so sequences do not mix.
    std::vector<Mat> zt, cond, part, target;
    std::vector<double> ts;
    std::vector<std::size_t> picked;
    std::size_t offset = 0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& ex = data[rng.index(data.size())];
      const std::size_t n = ex.z1.frames();
      if (ex.z1.dim() != D) throw Error(ErrorCode::DimMismatch, "latent width");
      const double t = rng.uniform();
      Mat z0 = ex.z0 ? *ex.z0 : rng.normal_mat(n, D);
      if (!z0.same_shape(ex.z1.data)) throw Error(ErrorCode::ShapeMismatch, "reflow noise shape");
      MaskSpec m = cfg.random_masks ? sample_mask(n, rng) : MaskSpec::full(n);
      const bool drop = rng.bernoulli(cfg.cond_drop);
      zt.push_back(interp(z0, ex.z1.data, t));
      cond.push_back(drop ? Mat(n, v.cond_dim()) : align_cond(ex.cond, n, v.cond_dim()));
      part.push_back(partial_latent(ex.z1.data, m));
      target.push_back(diff(ex.z1.data, z0));
      ts.insert(ts.end(), n, t);
      for (auto r : masked_rows(m, offset)) picked.push_back(r);
      offset += n;
    }
    auto stack = [](const std::vector<Mat>& ms) {
      std::vector<Var> vs;
      for (const auto& m : ms) vs.emplace_back(m);
      return concat_rows(vs);
    };
    opt.zero_grad();
    auto pred = v.velocity(stack(zt), ts, stack(cond), stack(part));
    auto loss = mean(square(sub(gather_rows(pred, picked), gather_rows(stack(target), picked))));
    loss.backward();
    opt.step();
    losses.push_back(loss.item());
    if (on_step) on_step(step, loss.item());
  }
  return losses;
}

std::vector<FlowExample> make_reflow_pairs(const VectorField& teacher, std::span<const FlowExample> conds, std::size_t steps,
                                           double cfg_scale, Rng& rng) {
  std::vector<FlowExample> out;
  for (const auto& c : conds) {
    const std::size_t n = c.z1.frames();
    Mat z0 = rng.normal_mat(n, teacher.latent_dim());
    auto z1 = euler_integrate(teacher, z0, align_cond(c.cond, n, teacher.cond_dim()), std::nullopt, steps, cfg_scale);
    out.push_back(FlowExample{c.cond, std::move(z1), std::move(z0)});
  }
  return out;
}

MlpVectorField reflow_distill(const MlpVectorField& teacher, std::span<const FlowExample> pairs, const FlowTrainConfig& cfg) {
  if (pairs.empty()) throw Error(ErrorCode::EmptyCorpus, "no reflow pairs");
  Rng init(0);
  MlpVectorField student(teacher.config(), init);
  student.copy_from(teacher);
  train_flow(student, pairs, cfg);
  return student;
}

double mean_l2(const Mat& a, const Mat& b) {
  if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, "mean_l2 operands");
  if (a.rows == 0) return 0.0;
  double s = 0.0;
  for (std::size_t r = 0; r < a.rows; ++r) {
    double d2 = 0.0;
    for (std::size_t c = 0; c < a.cols; ++c) d2 += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
    s += std::sqrt(d2);
  }
  return s / static_cast<double>(a.rows);
}

namespace {

// Overlapping frames of a 1 x N signal, frames x win.
Var frame_signal(const Var& x, std::size_t win, std::size_t hop) {
  const std::size_t n = x.cols();
  const std::size_t frames = n < win ? 0 : (n - win) / hop + 1;
  Mat out(frames, win);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t s = 0; s < win; ++s) out(f, s) = x.value().data[f * hop + s];
  return make_result(std::move(out), {x}, [win, hop](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t f = 0; f < self.grad.rows; ++f)
      for (std::size_t s = 0; s < win; ++s) g.data[f * hop + s] += self.grad(f, s);
  });
}

}  // namespace

Var magnitude_spectrogram(const Var& signal, std::size_t win) {
  if (win < 4 || win % 4 != 0) throw Error(ErrorCode::BadConfig, "stft window must be a positive multiple of 4");
  const std::size_t bins = win / 2 + 1;
  Mat hann(1, win), cosm(win, bins), sinm(win, bins);
  for (std::size_t s = 0; s < win; ++s) {
    hann.data[s] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(s) / double(win));
    for (std::size_t k = 0; k < bins; ++k) {
      const double a = 2.0 * std::numbers::pi * double(k * s % win) / double(win);
      cosm(s, k) = std::cos(a);
      sinm(s, k) = -std::sin(a);
    }
  }
  auto frames = mul_rowvec(frame_signal(signal, win, win / 4), Var(hann));
  if (frames.rows() == 0) return Var(Mat(0, bins));
  auto re = matmul(frames, Var(cosm));
  auto im = matmul(frames, Var(sinm));
  return sqrt_eps(add(square(re), square(im)), 1e-12);
}

Var decoder_finetune_loss(const Var& x_hat, const Var& x, const FinetuneLossCfg& cfg) {
  if (!x_hat.value().same_shape(x.value()) || x.rows() != 1) throw Error(ErrorCode::LengthMismatch, "finetune signals differ in length");
  if (cfg.lambda_adv < 0.0) throw Error(ErrorCode::BadConfig, "lambda_adv must be non-negative");
  if (x.cols() == 0) return Var::scalar(0.0);
  Var loss = mean(abs(sub(x_hat, x)));
  std::vector<Var> spectral;
  for (auto win : cfg.stft_windows) {
    auto a = magnitude_spectrogram(x_hat, win);
    if (a.rows() == 0) continue;
    spectral.push_back(mean(square(sub(a, magnitude_spectrogram(x, win)))));
  }
  if (!spectral.empty()) {
    Var s = spectral[0];
    for (std::size_t i = 1; i < spectral.size(); ++i) s = add(s, spectral[i]);
    loss = add(loss, scale(s, 1.0 / double(spectral.size())));
  }
  if (cfg.lambda_adv > 0.0 && cfg.adversarial) loss = add(loss, scale(cfg.adversarial(x_hat, x), cfg.lambda_adv));
  return loss;
}

double decoder_finetune_loss(std::span<const double> x_hat, std::span<const double> x, const FinetuneLossCfg& cfg) {
  if (x_hat.size() != x.size()) throw Error(ErrorCode::LengthMismatch, "finetune signals differ in length");
  Mat a(1, x.size()), b(1, x.size());
  std::copy(x_hat.begin(), x_hat.end(), a.data.begin());
  std::copy(x.begin(), x.end(), b.data.begin());
  return decoder_finetune_loss(Var(a), Var(b), cfg).item();
}

std::vector<double> finetune_decoder(LatentCodec& codec, std::span<const DecoderPair> data, const FinetuneLossCfg& loss_cfg,
                                     std::size_t steps, double lr) {
  if (data.empty()) throw Error(ErrorCode::EmptyCorpus, "no decoder finetune pairs");
  auto dec = Var::param(codec.decoder), bias = Var::param(codec.bias);
  Adam opt({dec, bias}, AdamConfig{lr});
  std::vector<double> losses;
  for (std::size_t step = 0; step < steps; ++step) {
    const auto& ex = data[step % data.size()];
    Mat target(1, ex.z.frames() * codec.chunk());
    for (std::size_t i = 0; i < target.cols && i < ex.x.size(); ++i) target.data[i] = ex.x[i];
    opt.zero_grad();
    auto loss = decoder_finetune_loss(LatentCodec::decode_var(Var(ex.z.data), dec, bias), Var(target), loss_cfg);
    loss.backward();
    opt.step();
    losses.push_back(loss.item());
  }
  codec.decoder = dec.value();
  codec.bias = bias.value();
  return losses;
}

std::vector<std::uint8_t> encode_field(const MlpVectorField& v) {
  ByteWriter w;
  w.magic("FLOW", 1);
  const auto& c = v.config();
  for (auto x : {c.latent_dim, c.cond_dim, c.hidden, c.blocks, c.time_features}) w.u32(static_cast<std::uint32_t>(x));
  nn::write_params(w, v.params());
  return w.bytes();
}

MlpVectorField decode_field(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("FLOW", 1);
  MlpFieldConfig c;
  c.latent_dim = r.u32();
  c.cond_dim = r.u32();
  c.hidden = r.u32();
  c.blocks = r.u32();
  c.time_features = r.u32();
  if (c.latent_dim == 0 || c.hidden == 0 || c.hidden > 1 << 16 || c.blocks > 64)
    throw Error(ErrorCode::BadCheckpoint, "flow architecture descriptor");
  Rng rng(0);
  MlpVectorField v(c, rng);
  auto params = v.params();
  nn::read_params(r, params);
  if (!r.at_end()) throw Error(ErrorCode::BadCheckpoint, "trailing bytes in flow checkpoint");
  return v;
}

std::vector<std::uint8_t> encode_triplets(std::span<const FlowExample> pairs) {
  ByteWriter w;
  w.magic("RFL1", 1);
  w.u32(static_cast<std::uint32_t>(pairs.size()));
  for (const auto& p : pairs) {
    if (!p.z0) throw Error(ErrorCode::MissingPrerequisite, "reflow triplet without noise");
    w.f64(p.cond.frame_rate);
    w.mat_f32(p.cond.data);
    w.mat_f32(*p.z0);
    w.mat_f32(p.z1.data);
  }
  return w.bytes();
}

std::vector<FlowExample> decode_triplets(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("RFL1", 1);
  const std::size_t n = r.u32();
  std::vector<FlowExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    FlowExample ex;
    ex.cond.frame_rate = r.f64();
    ex.cond.data = r.mat_f32();
    ex.z0 = r.mat_f32();
    ex.z1.data = r.mat_f32();
    if (!ex.z0->same_shape(ex.z1.data)) throw Error(ErrorCode::BadCheckpoint, "triplet shapes");
    out.push_back(std::move(ex));
  }
  if (!r.at_end()) throw Error(ErrorCode::BadCheckpoint, "trailing bytes in triplet file");
  return out;
}

}  // namespace cadenza::flow
