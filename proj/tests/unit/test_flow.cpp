#include <cmath>
#include <numbers>

#include "cadenza/core/error.hpp"
#include "cadenza/core/signal.hpp"
#include "cadenza/flow/flow.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace cadenza;
using namespace cadenza::flow;
using cadenza::testing::grad_check;

namespace {

rvq::FeatureSeq cond_seq(Rng& rng, std::size_t frames, std::size_t dim) { return {rng.normal_mat(frames, dim), 12.5, 0}; }

FunctionField constant_field(const Mat& z0, const Mat& z1) {
  Mat d(z0.rows, z0.cols);
  for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = z1.data[i] - z0.data[i];
  return FunctionField(z0.cols, 2, [d](const Mat&, std::span<const double>, const Mat&, const Mat&) { return d; });
}

// Naive single-frame DFT magnitude for the spectrogram oracle.
std::vector<double> dft_magnitudes(const std::vector<double>& frame) {
  const std::size_t n = frame.size();
  std::vector<double> out(n / 2 + 1);
  for (std::size_t k = 0; k <= n / 2; ++k) {
    double re = 0.0, im = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(s) / double(n));
      re += w * frame[s] * std::cos(2.0 * std::numbers::pi * double(k * s) / double(n));
      im -= w * frame[s] * std::sin(2.0 * std::numbers::pi * double(k * s) / double(n));
    }
    out[k] = std::hypot(re, im);
  }
  return out;
}

}  // namespace

TEST_CASE("interpolation endpoints and midpoint") {
  LatentSeq z0{Mat(1, 1, 0.0)}, z1{Mat(1, 1, 2.0)};
  CHECK(interpolate(z0, z1, 0.0).data == z0.data);
  CHECK(interpolate(z0, z1, 1.0).data == z1.data);
  CHECK(interpolate(z0, z1, 0.5).data(0, 0) == 1.0);
  CHECK_THROWS_AS(interpolate(z0, LatentSeq{Mat(2, 1)}, 0.5), Error);
}

TEST_CASE("condition frames repeat onto the latent grid") {
  rvq::FeatureSeq c{Mat(2, 1), 12.5, 0};
  c.data(0, 0) = 1.0;
  c.data(1, 0) = 2.0;
  auto rows = align_cond(c, 5, 1);
  CHECK(rows.data == std::vector<double>{1, 1, 2, 2, 2});
}

TEST_CASE("sampled masks are one contiguous span of at least 30 percent") {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    auto m = sample_mask(20, rng);
    const auto n = m.masked_count();
    CHECK(n >= 6);
    std::size_t runs = 0;
    for (std::size_t f = 0; f < 20; ++f) runs += m.mask[f] && (f == 0 || !m.mask[f - 1]);
    CHECK(runs == 1);
  }
  CHECK(sample_mask(1, rng).masked_count() == 1);
}

TEST_CASE("flow loss vanishes for the exact target field") {
  Rng rng(2);
  Mat z1 = rng.normal_mat(6, 3), z0 = rng.normal_mat(6, 3);
  auto oracle = constant_field(z0, z1);
  auto m = sample_mask(6, rng);
  CHECK(fm_loss_at(oracle, z1, z0, 0.37, Mat(6, 2), m).item() == 0.0);
}

TEST_CASE("flow loss of the zero field equals the noise second moment") {
  FunctionField zero(1, 1, [](const Mat& z, std::span<const double>, const Mat&, const Mat&) { return Mat(z.rows, z.cols); });
  const std::size_t n = 100000;
  Rng rng(3);
  auto loss = fm_loss(zero, LatentSeq{Mat(n, 1)}, rvq::FeatureSeq{Mat(0, 1), 12.5, 0}, MaskSpec::full(n), rng).item();
  CHECK(std::abs(loss - 1.0) < 0.02);
}

TEST_CASE("flow loss only counts masked frames and is seed deterministic") {
  Rng rng(4);
  MlpVectorField v(MlpFieldConfig{3, 2, 16, 1, 4}, rng);
  LatentSeq z1{rng.normal_mat(6, 3)};
  auto cond = cond_seq(rng, 3, 2);
  MaskSpec m{{0, 0, 1, 1, 0, 0}};
  Rng a(10), b(10);
  const double la = fm_loss(v, z1, cond, m, a).item();
  CHECK(la == fm_loss(v, z1, cond, m, b).item());
  CHECK(la > 0.0);

  // changing an unmasked target frame moves only the context input, not the target
  Mat z0 = rng.normal_mat(6, 3);
  auto base = fm_loss_at(v, z1.data, z0, 0.5, align_cond(cond, 6, 2), MaskSpec{{0, 0, 0, 0, 0, 0}}).item();
  CHECK(base == 0.0);
}

TEST_CASE("flow loss gradients match finite differences") {
  Rng rng(5);
  MlpVectorField v(MlpFieldConfig{3, 2, 8, 2, 2}, rng);
  Mat z1 = rng.normal_mat(5, 3), z0 = rng.normal_mat(5, 3), cond = rng.normal_mat(5, 2);
  MaskSpec m{{1, 1, 0, 1, 0}};
  CHECK(grad_check(v.params(), [&] { return fm_loss_at(v, z1, z0, 0.6, cond, m); }).rel_error < 1e-3);
}

TEST_CASE("constant fields integrate exactly for any step count") {
  Rng rng(6);
  Mat z0 = rng.normal_mat(4, 3), z1 = rng.normal_mat(4, 3);
  auto field = constant_field(z0, z1);
  for (std::size_t steps : {1, 2, 7, 50, 500}) {
    auto out = euler_integrate(field, z0, Mat(4, 2), std::nullopt, steps, 1.0);
    for (std::size_t i = 0; i < z1.data.size(); ++i) CHECK(std::abs(out.data.data[i] - z1.data[i]) < 1e-12);
  }
  CHECK_THROWS_AS(euler_integrate(field, z0, Mat(4, 2), std::nullopt, 0, 1.0), Error);
}

TEST_CASE("guidance combines conditional and unconditional velocities") {
  Rng rng(7);
  MlpVectorField v(MlpFieldConfig{3, 2, 16, 1, 4}, rng);
  Mat z = rng.normal_mat(4, 3), cond = rng.normal_mat(4, 2), part(4, 3);
  std::vector<double> t(4, 0.3);
  Mat vc = v.velocity(ag::Var(z), t, ag::Var(cond), ag::Var(part)).value();
  Mat vu = v.velocity(ag::Var(z), t, ag::Var(Mat(4, 2)), ag::Var(part)).value();
  CHECK(guided_velocity(v, z, t, cond, part, 1.0) == vc);
  auto g = guided_velocity(v, z, t, cond, part, 1.25);
  for (std::size_t i = 0; i < g.data.size(); ++i) CHECK(g.data[i] == doctest::Approx(vu.data[i] + 1.25 * (vc.data[i] - vu.data[i])));
}

TEST_CASE("unmasked frames come back as the clean latents") {
  Rng rng(8);
  MlpVectorField v(MlpFieldConfig{3, 2, 16, 1, 4}, rng);
  LatentSeq clean{rng.normal_mat(6, 3)};
  MaskSpec m{{0, 1, 1, 0, 1, 0}};
  auto out = euler_sample(v, cond_seq(rng, 3, 2), 6, Partial{m, clean}, 10, 1.25, rng);
  for (std::size_t f = 0; f < 6; ++f) {
    if (m.mask[f]) continue;
    for (std::size_t d = 0; d < 3; ++d) CHECK(out.data(f, d) == clean.data(f, d));
  }
}

TEST_CASE("training drives a deterministic coupling to low masked error") {
  Rng rng(9);
  const std::size_t D = 2, C = 2, F = 4;
  std::vector<FlowExample> data;
  for (int i = 0; i < 16; ++i) {
    FlowExample ex{cond_seq(rng, F / 2, C), LatentSeq{Mat(F, D)}, rng.normal_mat(F, D)};
    auto rows = align_cond(ex.cond, F, C);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t d = 0; d < D; ++d) ex.z1.data(f, d) = rows(f, d) + 0.5 * (*ex.z0)(f, d);
    data.push_back(ex);
  }
  MlpVectorField v(MlpFieldConfig{D, C, 32, 2, 4}, rng);
  FlowTrainConfig cfg;
  cfg.steps = 400;
  cfg.lr = 3e-3;
  cfg.cond_drop = 0.0;
  auto losses = train_flow(v, data, cfg);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 20; ++i) {
    head += losses[i];
    tail += losses[losses.size() - 1 - i];
  }
  CHECK(tail < 0.2 * head);
}

TEST_CASE("reflow on a single pair reproduces its endpoint") {
  Rng rng(10);
  MlpVectorField teacher(MlpFieldConfig{2, 2, 32, 2, 4}, rng);
  FlowExample ex{cond_seq(rng, 2, 2), LatentSeq{rng.normal_mat(4, 2)}, rng.normal_mat(4, 2)};
  std::vector<FlowExample> pairs{ex};
  FlowTrainConfig cfg;
  cfg.steps = 4000;
  cfg.batch = 4;
  cfg.lr = 2e-3;
  cfg.cond_drop = 0.0;
  cfg.random_masks = false;
  auto student = reflow_distill(teacher, pairs, cfg);
  auto out = euler_integrate(student, *ex.z0, align_cond(ex.cond, 4, 2), std::nullopt, kStudentSteps, 1.0);
  CHECK(mean_l2(out.data, ex.z1.data) < 1e-2);
  CHECK_THROWS_AS(reflow_distill(teacher, std::vector<FlowExample>{}, cfg), Error);
}

TEST_CASE("PCA codec reconstructs the harmonic signal family") {
  Rng rng(11);
  std::vector<std::vector<double>> corpus;
  for (int i = 0; i < 8; ++i) corpus.push_back(toy_signal(2.0, {}, rng));
  auto codec = fit_codec(corpus, 32, 16);
  auto probe = toy_signal(1.0, {}, rng);
  auto z = codec.encode(probe);
  CHECK(z.frames() == 25);
  auto back = codec.decode(z);
  double err = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) err = std::max(err, std::abs(back[i] - probe[i]));
  CHECK(err < 1e-9);
  auto again = decode_codec(encode_codec(codec));
  CHECK(again.dim() == 16);
  CHECK(again.chunk() == 32);
  CHECK_THROWS_AS(fit_codec(std::vector<std::vector<double>>{{1.0, 2.0}}, 32, 16), Error);
}

TEST_CASE("spectrogram matches a direct DFT") {
  Rng rng(12);
  std::vector<double> x(40);
  for (auto& v : x) v = rng.normal();
  Mat m(1, x.size());
  m.data = x;
  auto spec = magnitude_spectrogram(ag::Var(m), 16).value();
  REQUIRE(spec.rows == 7);  // (40 - 16) / 4 + 1
  for (std::size_t f = 0; f < spec.rows; ++f) {
    auto mags = dft_magnitudes(std::vector<double>(x.begin() + f * 4, x.begin() + f * 4 + 16));
    for (std::size_t k = 0; k < mags.size(); ++k) CHECK(spec(f, k) == doctest::Approx(mags[k]).epsilon(1e-6));
  }
}

TEST_CASE("finetune loss closed forms") {
  FinetuneLossCfg cfg;
  cfg.stft_windows = {16};
  std::vector<double> x(64, 0.0), c(64, 0.7);
  CHECK(decoder_finetune_loss(x, x, cfg) == 0.0);
  // constant signal under a periodic Hann window: bins 0 and 1 carry N/2 and N/4
  const double n = 16.0;
  const double spectral = (std::pow(n / 2, 2) + std::pow(n / 4, 2)) * 0.49 / (n / 2 + 1);
  CHECK(decoder_finetune_loss(c, x, cfg) == doctest::Approx(0.7 + spectral).epsilon(1e-6));

  int calls = 0;
  cfg.adversarial = [&](const ag::Var&, const ag::Var&) {
    ++calls;
    return ag::Var::scalar(5.0);
  };
  const double base = decoder_finetune_loss(c, x, cfg);
  CHECK(base == doctest::Approx(0.7 + spectral).epsilon(1e-6));
  cfg.lambda_adv = 0.5;
  CHECK(decoder_finetune_loss(c, x, cfg) == doctest::Approx(base + 2.5));
  CHECK(calls == 1);
  cfg.lambda_adv = -1.0;
  CHECK_THROWS_AS(decoder_finetune_loss(c, x, cfg), Error);
  CHECK_THROWS_AS(decoder_finetune_loss(std::vector<double>(3), x, FinetuneLossCfg{}), Error);
}

TEST_CASE("finetune loss gradient matches finite differences") {
  Rng rng(13);
  auto xh = ag::Var::param(rng.normal_mat(1, 48));
  auto x = ag::Var(rng.normal_mat(1, 48));
  FinetuneLossCfg cfg;
  cfg.stft_windows = {8, 16};
  CHECK(grad_check({xh}, [&] { return decoder_finetune_loss(xh, x, cfg); }, 1e-6).rel_error < 1e-3);
}

TEST_CASE("decoder finetuning adapts to perturbed latents") {
  Rng rng(14);
  std::vector<std::vector<double>> corpus;
  for (int i = 0; i < 4; ++i) corpus.push_back(toy_signal(1.0, {}, rng));
  auto codec = fit_codec(corpus, 32, 16);
  std::vector<DecoderPair> pairs;
  for (const auto& sig : corpus) {
    auto z = codec.encode(sig);
    for (auto& v : z.data.data) v = 1.2 * v + 0.05;  // systematic drift a decoder can undo
    pairs.push_back({z, sig});
  }
  FinetuneLossCfg cfg;
  auto losses = finetune_decoder(codec, pairs, cfg, 300, 1e-2);
  CHECK(losses.back() < 0.5 * losses.front());
}

TEST_CASE("field checkpoints and triplet files round-trip") {
  Rng rng(15);
  MlpVectorField v(MlpFieldConfig{3, 2, 8, 2, 2}, rng);
  auto back = decode_field(encode_field(v));
  CHECK(back.config() == v.config());
  Mat z = rng.normal_mat(2, 3), c = rng.normal_mat(2, 2);
  std::vector<double> t{0.1, 0.9};
  auto a = v.velocity(ag::Var(z), t, ag::Var(c), ag::Var(z)).value();
  auto b = back.velocity(ag::Var(z), t, ag::Var(c), ag::Var(z)).value();
  for (std::size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-5));

  std::vector<FlowExample> trip{{cond_seq(rng, 2, 2), LatentSeq{rng.normal_mat(4, 3)}, rng.normal_mat(4, 3)}};
  auto bytes = encode_triplets(trip);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "RFL1");
  auto got = decode_triplets(bytes);
  REQUIRE(got.size() == 1);
  CHECK(got[0].z0->rows == 4);
  CHECK(got[0].cond.frame_rate == 12.5);
  bytes[0] = 'X';
  CHECK_THROWS_AS(decode_triplets(bytes), Error);
}
