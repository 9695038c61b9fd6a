// Acceptance run: one PASS/FAIL line per criterion. Each criterion owns its
// tolerance and its wall-clock budget; a criterion that finishes over budget
// fails even when its numbers are right.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cadenza/clap/clap.hpp"
#include "cadenza/dpo/dpo.hpp"
#include "cadenza/flow/flow.hpp"
#include "cadenza/infer/engine.hpp"
#include "cadenza/lm/train.hpp"
#include "cadenza/lyrics/condition.hpp"
#include "cadenza/lyrics/lyrics.hpp"
#include "cadenza/rvq/quantizer.hpp"
#include "gradcheck.hpp"
#include "lyrics_corpus.hpp"

using namespace cadenza;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  // Records a sub-check; the first failing one is named in the detail line.
  void check(bool ok, const std::string& what) {
    if (!ok && pass) detail << "failed: " << what << "; ";
    pass = pass && ok;
  }
};

using Criterion = std::function<void(Outcome&)>;

struct Entry {
  int id;
  const char* name;
  double budget_s;
  Criterion run;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// ---- shared fixtures ----

lm::LMConfig small_lm(std::size_t K, std::size_t V, std::size_t max_frames) {
  lm::LMConfig c;
  c.num_books = K;
  c.vocab = V;
  c.d_global = 32;
  c.d_local = 16;
  c.global_blocks = 2;
  c.local_blocks = 1;
  c.global_heads = 2;
  c.local_heads = 2;
  c.max_frames = max_frames;
  c.ref_dim = 8;
  return c;
}

lm::LMConfig tiny_lm(std::size_t K, std::size_t V) {
  lm::LMConfig c = small_lm(K, V, 16);
  c.d_global = 8;
  c.d_local = 4;
  c.global_blocks = 1;
  c.text_vocab = 64;
  c.ref_dim = 4;
  return c;
}

lyrics::TagSet random_tags(Rng& rng) {
  static const char* kWords[] = {"pop", "rock", "soft", "warm", "piano", "night", "female", "dark", "jazz", "club"};
  lyrics::TagSet t;
  for (auto c : lyrics::kAllCategories)
    if (rng.bernoulli(0.6)) t.entries[c] = {kWords[rng.index(10)]};
  return t;
}

// Full prompt through the real conditioning path: sampled tags, optional
// reference embedding, generated lyrics.
// Redrawn until it fits in max_len prefix rows.
lyrics::CondSequence random_condition(Rng& rng, std::size_t ref_dim, std::size_t max_len = 256) {
  for (;;) {
    auto doc = testdata::random_document(rng, rng.bernoulli(0.5)).doc;
    std::vector<float> ref(ref_dim);
    for (auto& x : ref) x = static_cast<float>(rng.normal());
    auto cond = lyrics::build_condition(random_tags(rng), std::span<const float>(ref), doc, 0.5, rng);
    if (cond.length() <= max_len) return cond;
  }
}

// Small condition whose token ids fit a 64-entry text table.
lyrics::CondSequence tiny_condition(Rng& rng, std::size_t ref_dim) {
  lyrics::CondSequence c;
  lyrics::CondSegment tag{lyrics::SegmentRole::Tag, {}, {}}, ly{lyrics::SegmentRole::Lyrics, {}, {}};
  for (int i = 0; i < 3; ++i) tag.tokens.push_back(static_cast<std::uint32_t>(rng.index(64)));
  for (int i = 0; i < 5; ++i) ly.tokens.push_back(static_cast<std::uint32_t>(rng.index(64)));
  lyrics::CondSegment ref{lyrics::SegmentRole::RefEmbed, {}, {}};
  for (std::size_t i = 0; i < ref_dim; ++i) ref.embedding.push_back(static_cast<float>(rng.normal()));
  c.segments = {tag, ref, ly};
  return c;
}

rvq::TokenFrameSeq random_frames(Rng& rng, std::size_t L, std::size_t K, std::size_t V) {
  rvq::TokenFrameSeq s(L, K);
  for (auto& v : s.indices) v = static_cast<std::uint32_t>(rng.index(V));
  return s;
}

// log-softmax picks read straight off teacher-forced logits
double pick_sum(const lm::HierLM::Output& out, const rvq::TokenFrameSeq& a) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.num_books; ++k) {
    const Mat& lg = out.layer_logits[k].value();
    for (std::size_t l = 0; l < a.frames; ++l) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t v = 0; v < lg.cols; ++v) mx = std::max(mx, lg(l, v));
      double z = 0.0;
      for (std::size_t v = 0; v < lg.cols; ++v) z += std::exp(lg(l, v) - mx);
      s += lg(l, a.at(l, k)) - mx - std::log(z);
    }
  }
  return s;
}

rvq::TokenFrameSeq generate_streamed(const infer::Engine& eng, const lyrics::CondSequence& cond, std::size_t frames,
                                     const infer::SamplerConfig& sc, infer::Mode mode, std::uint64_t seed) {
  const std::size_t K = eng.model_config().num_books;
  rvq::TokenFrameSeq out(frames, K);
  eng.generate(cond, frames, sc, mode, 1, seed, [&](std::size_t, std::size_t f, std::span<const std::uint32_t> fr) {
    for (std::size_t k = 0; k < K; ++k) out.at(f, k) = fr[k];
  });
  return out;
}

// ---- 1 ----
void cross_mode_equality(Outcome& o) {
  Rng rng(101);
  lm::HierLM model(small_lm(4, 64, 256), rng);
  infer::Engine eng(model);
  std::size_t frames_total = 0;
  for (int c = 0; c < 20; ++c) {
    const std::uint64_t seed = rng.next_u64();
    const auto cond = random_condition(rng, model.config().ref_dim);
    const std::size_t L = 1 + rng.index(256);
    infer::SamplerConfig sc;
    sc.cfg_local = rng.bernoulli(0.5);
    frames_total += L;
    const auto r = eng.generate(cond, L, sc, infer::Mode::Recompute, 1, seed).items[0];
    const auto k = eng.generate(cond, L, sc, infer::Mode::Kv, 1, seed).items[0];
    const auto f = eng.generate(cond, L, sc, infer::Mode::FixedShape, 1, seed).items[0];
    const auto sk = generate_streamed(eng, cond, L, sc, infer::Mode::Kv, seed);
    const auto sf = generate_streamed(eng, cond, L, sc, infer::Mode::FixedShape, seed);
    const std::string tag = "case " + std::to_string(c) + " (L=" + std::to_string(L) + ")";
    o.check(r.frames == L, tag + " length");
    o.check(r == k, tag + " recompute vs kv");
    o.check(k == f, tag + " kv vs fixed_shape");
    o.check(sk == k, tag + " streamed kv");
    o.check(sf == k, tag + " streamed fixed_shape");
  }
  o.detail << "20 cases, " << frames_total << " frames, 5 outputs each";
}

// ---- 2 ----
void inference_speedup(Outcome& o) {
  Rng rng(202);
  lm::HierLM model(lm::LMConfig{}, rng);
  infer::Engine eng(model);
  const auto cond = random_condition(rng, model.config().ref_dim);
  infer::SamplerConfig sc;
  const auto rec = eng.generate(cond, 512, sc, infer::Mode::Recompute, 1, 7).metrics;
  const auto kv = eng.generate(cond, 512, sc, infer::Mode::Kv, 1, 7).metrics;
  const auto fixed = eng.generate(cond, 512, sc, infer::Mode::FixedShape, 1, 7).metrics;
  o.check(kv.wall_time <= 0.5 * rec.wall_time, "kv wall time <= 0.5 x recompute");
  o.check(kv.dispatch_count < rec.dispatch_count, "kv dispatches < recompute");
  o.check(fixed.steady_alloc_count == 0, "fixed_shape steady-state allocations == 0");
  o.detail << "recompute " << fmt(rec.wall_time) << " s / " << rec.dispatch_count << " dispatches, kv "
           << fmt(kv.wall_time) << " s / " << kv.dispatch_count << ", fixed " << fmt(fixed.wall_time)
           << " s with " << fixed.steady_alloc_count << " steady allocs, speedup "
           << fmt(rec.wall_time / kv.wall_time) << "x";
}

// ---- 3 ----
std::vector<rvq::FeatureSeq> mixture_frames(Rng& rng, const Mat& centres, std::size_t seqs, std::size_t frames) {
  std::vector<rvq::FeatureSeq> out;
  for (std::size_t s = 0; s < seqs; ++s) {
    rvq::FeatureSeq f{Mat(frames, centres.cols), rvq::kLowRate, 0};
    for (std::size_t t = 0; t < frames; ++t) {
      const auto c = rng.index(centres.rows);
      for (std::size_t d = 0; d < centres.cols; ++d) f.data(t, d) = centres(c, d) + 0.5 * rng.normal();
    }
    out.push_back(std::move(f));
  }
  return out;
}

void rvq_properties(Outcome& o) {
  Rng rng(303);
  const std::size_t dim = 16;
  const Mat centres = rng.normal_mat(32, dim, 2.0);
  const auto train = mixture_frames(rng, centres, 16, 500);
  const auto held = mixture_frames(rng, centres, 1, 1000)[0];
  const auto cb = rvq::train_codebooks(train, {8, 256, 25, 1});

  // Per-frame increases are reported, not gated: greedy nearest-entry
  // quantization has no per-frame guarantee, only the stage norms over the
  // whole held-out set are required to fall.
  std::size_t violations = 0;
  double worst = 0.0;
  for (std::size_t t = 0; t < held.data.rows; ++t) {
    rvq::FeatureSeq one{Mat(1, dim), rvq::kLowRate, 0};
    double n0 = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      one.data(0, d) = held.data(t, d);
      n0 += held.data(t, d) * held.data(t, d);
    }
    const auto r = rvq::rvq_encode(one, cb);
    double prev = std::sqrt(n0);
    for (double n : r.residual_norms) {
      if (n > prev) {
        ++violations;
        worst = std::max(worst, n - prev);
      }
      prev = n;
    }
  }

  const auto enc = rvq::rvq_encode(held, cb);
  const auto dec = rvq::rvq_decode(enc.tokens, cb);
  o.check(dec.data == enc.quantized.data, "decode(encode(y)) == quantized, bit-exact");
  o.check(rvq::decode_tokens(rvq::encode_tokens(enc.tokens)) == enc.tokens, "token file round trip");

  double input_norm = 0.0;
  for (std::size_t t = 0; t < held.data.rows; ++t) {
    double n = 0.0;
    for (std::size_t d = 0; d < dim; ++d) n += held.data(t, d) * held.data(t, d);
    input_norm += std::sqrt(n) / double(held.data.rows);
  }
  bool non_increasing = enc.residual_norms.front() <= input_norm, falling = enc.residual_norms.front() < input_norm;
  for (std::size_t k = 1; k < enc.residual_norms.size(); ++k) {
    non_increasing = non_increasing && enc.residual_norms[k] <= enc.residual_norms[k - 1];
    falling = falling && enc.residual_norms[k] < enc.residual_norms[k - 1];
  }
  o.check(non_increasing, "stage residual norms non-increasing over the 1000 frames");
  o.check(falling, "held-out residual norm strictly falls at every k-means stage");
  o.check(enc.residual_norms.size() == 8, "8 stages");
  o.detail << "1000 held-out frames, mean norm " << fmt(input_norm) << " -> " << fmt(enc.residual_norms.front()) << " -> "
           << fmt(enc.residual_norms.back()) << " over 8 stages; per-frame increases " << violations << " of 8000 (worst "
           << fmt(worst) << ")";
}

// ---- 4 ----
void loss_oracles(Outcome& o) {
  const double tol = 1e-5;
  auto close = [&](double got, double want, const std::string& what) {
    o.check(std::abs(got - want) <= tol, what + " got " + fmt(got) + " want " + fmt(want));
  };
  auto seq = [](std::initializer_list<std::initializer_list<double>> rows) {
    Mat m(rows.size(), rows.begin()->size());
    std::size_t r = 0;
    for (const auto& row : rows) {
      std::size_t c = 0;
      for (double v : row) m(r, c++) = v;
      ++r;
    }
    return rvq::FeatureSeq{m, rvq::kLowRate, 0};
  };
  // (|(1,2)|^2 + |(-3,-4)|^2) / 2
  close(rvq::commitment_loss(seq({{1, 2}, {0, 0}}), seq({{0, 0}, {3, 4}})), 15.0, "commitment");
  const auto u = seq({{1, 0}});
  close(rvq::alignment_loss(u, u), std::log1p(std::exp(-1.0)), "alignment cos 1");
  close(rvq::alignment_loss(u, seq({{0, 1}})), std::log(2.0), "alignment cos 0");
  close(rvq::alignment_loss(u, seq({{-1, 0}})), std::log1p(std::exp(1.0)), "alignment cos -1");
  close(std::log1p(std::exp(-1.0)), 0.31326, "closed form -log sigmoid(1)");
  close(std::log1p(std::exp(1.0)), 1.31326, "closed form -log sigmoid(-1)");

  for (std::size_t V : {2u, 256u, 1024u}) {
    std::vector<ag::Var> logits(8, ag::Var(Mat(5, V)));
    rvq::TokenFrameSeq t(5, 8);
    for (std::size_t i = 0; i < t.indices.size(); ++i) t.indices[i] = static_cast<std::uint32_t>((i * 37) % V);
    const double ce = lm::weighted_ce_loss(logits, t, lm::LossWeights::balanced(8)).total.item();
    close(ce, 2.0 * std::log(double(V)), "weighted CE uniform V=" + std::to_string(V));
  }

  Rng rng(404);
  lm::HierLM policy(tiny_lm(2, 4), rng);
  const auto ref = policy.clone();
  std::vector<dpo::PreferencePair> pairs;
  for (int i = 0; i < 3; ++i)
    pairs.push_back({tiny_condition(rng, 4), random_frames(rng, 4, 2, 4), random_frames(rng, 4, 2, 4)});
  close(dpo::dpo_loss(policy, ref, pairs, {0.1}).item(), std::log(2.0), "DPO at policy == reference");

  Mat one(1, 3);
  one(0, 2) = 1.0;
  close(clap::infonce_loss(one, one, 0.07), 0.0, "InfoNCE N=1");
  Mat basis(2, 4);
  basis(0, 0) = basis(1, 1) = 1.0;
  const double n2 = clap::infonce_loss(basis, basis, 1.0);
  close(n2, 4.0 * std::log1p(std::exp(-1.0)), "InfoNCE N=2 orthogonal");
  o.check(std::abs(n2 - 1.2532) < 5e-4, "InfoNCE N=2 near 1.2532");
  o.detail << "12 oracles within " << fmt(tol) << ", InfoNCE N=2 = " << fmt(n2);
}

// ---- 5 ----
void factorization_identity(Outcome& o) {
  Rng rng(505);
  lm::HierLM m(small_lm(4, 16, 32), rng);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto cond = random_condition(rng, m.config().ref_dim);
    const auto a = random_frames(rng, 1 + rng.index(12), 4, 16);
    worst = std::max(worst, std::abs(m.joint_logprob(cond, a) - pick_sum(m.forward(cond, a), a)));
  }
  o.check(worst <= 1e-5, "joint_logprob vs log-softmax picks");

  lm::HierLM tiny(tiny_lm(2, 2), rng);
  const auto cond = tiny_condition(rng, 4);
  double total = 0.0;
  for (std::uint32_t code = 0; code < 4; ++code) {
    rvq::TokenFrameSeq a(1, 2);
    a.at(0, 0) = code & 1u;
    a.at(0, 1) = code >> 1;
    total += std::exp(tiny.joint_logprob(cond, a));
  }
  o.check(std::abs(total - 1.0) <= 1e-6, "enumeration sums to one");
  o.detail << "max pick gap " << fmt(worst) << ", enumeration |sum - 1| = " << fmt(std::abs(total - 1.0));
}

// ---- 6 ----
flow::MaskSpec span_mask(std::size_t frames, std::size_t lo, std::size_t hi) {
  flow::MaskSpec m{std::vector<std::uint8_t>(frames, 0)};
  for (std::size_t f = lo; f < hi; ++f) m.mask[f] = 1;
  return m;
}

double masked_l2(const Mat& a, const Mat& b, const flow::MaskSpec& m) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t f = 0; f < a.rows; ++f) {
    if (!m.mask[f]) continue;
    double d = 0.0;
    for (std::size_t c = 0; c < a.cols; ++c) d += (a(f, c) - b(f, c)) * (a(f, c) - b(f, c));
    total += std::sqrt(d);
    ++n;
  }
  return n ? total / double(n) : 0.0;
}

void flow_matching(Outcome& o) {
  Rng rng(606);
  const std::size_t D = 2, C = 4, F = 8;

  // constant field: Euler is exact at any step count
  const Mat z0c = rng.normal_mat(F, D), z1c = rng.normal_mat(F, D);
  Mat diff(F, D);
  for (std::size_t i = 0; i < diff.data.size(); ++i) diff.data[i] = z1c.data[i] - z0c.data[i];
  flow::FunctionField constant(D, C, [diff](const Mat&, std::span<const double>, const Mat&, const Mat&) { return diff; });
  double const_err = 0.0;
  for (std::size_t steps : {1u, 2u, 3u, 7u, 10u, 50u, 500u}) {
    const auto out = flow::euler_integrate(constant, z0c, Mat(F, C), std::nullopt, steps, 1.0);
    for (std::size_t i = 0; i < out.data.data.size(); ++i) const_err = std::max(const_err, std::abs(out.data.data[i] - z1c.data[i]));
  }
  o.check(const_err <= 1e-12, "constant-field Euler exact");

  // fixed-coupling family: every example carries its own noise
  std::vector<flow::FlowExample> family;
  for (int i = 0; i < 8; ++i)
    family.push_back({rvq::FeatureSeq{rng.normal_mat(F, C), flow::kLatentRate, 0}, flow::LatentSeq{rng.normal_mat(F, D)},
                      rng.normal_mat(F, D)});
  flow::MlpVectorField v(flow::MlpFieldConfig{D, C, 64, 2, 4}, rng);
  flow::FlowTrainConfig tc;
  tc.steps = 6000;
  tc.batch = 8;
  tc.lr = 2e-3;
  tc.cond_drop = 0.0;
  tc.seed = 1;
  flow::train_flow(v, family, tc);
  // second phase at a tenth of the rate to settle the Adam noise
  tc.steps = 4000;
  tc.lr = 2e-4;
  tc.seed = 5;
  flow::train_flow(v, family, tc);
  const auto mask = span_mask(F, 2, 6);
  double recon = 0.0;
  bool passthrough = true;
  for (const auto& ex : family) {
    const auto out = flow::euler_integrate(v, *ex.z0, flow::align_cond(ex.cond, F, C), flow::Partial{mask, ex.z1},
                                           flow::kTeacherSteps, 1.0);
    recon += masked_l2(out.data, ex.z1.data, mask) / double(family.size());
    for (std::size_t f = 0; f < F; ++f)
      if (!mask.mask[f])
        for (std::size_t d = 0; d < D; ++d) passthrough = passthrough && out.data(f, d) == ex.z1.data(f, d);
  }
  o.check(recon < 1e-2, "masked-frame reconstruction < 1e-2");
  o.check(passthrough, "unmasked frames pass through exactly");

  // reflow: teacher on fresh noise, student on the teacher's endpoints
  std::vector<flow::FlowExample> conds;
  const Mat proj = rng.normal_mat(C, D);
  for (int i = 0; i < 16; ++i) {
    flow::FlowExample ex{rvq::FeatureSeq{rng.normal_mat(F, C), flow::kLatentRate, 0}, flow::LatentSeq{Mat(F, D)}, std::nullopt};
    const Mat rows = flow::align_cond(ex.cond, F, C);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t d = 0; d < D; ++d) {
        double s = 0.3 * rng.normal();
        for (std::size_t c = 0; c < C; ++c) s += rows(f, c) * proj(c, d);
        ex.z1.data(f, d) = s;
      }
    conds.push_back(ex);
  }
  flow::MlpVectorField teacher(flow::MlpFieldConfig{D, C, 64, 2, 4}, rng);
  flow::FlowTrainConfig ttc;
  ttc.steps = 2000;
  ttc.batch = 8;
  ttc.lr = 2e-3;
  ttc.cond_drop = 0.0;
  ttc.random_masks = false;
  ttc.seed = 2;
  flow::train_flow(teacher, conds, ttc);

  std::vector<flow::FlowExample> repeated;
  for (int r = 0; r < 32; ++r) repeated.insert(repeated.end(), conds.begin(), conds.end());
  Rng pair_rng(3);
  const auto pairs = flow::make_reflow_pairs(teacher, repeated, flow::kTeacherSteps, 1.0, pair_rng);
  flow::FlowTrainConfig stc = ttc;
  stc.steps = 4000;
  stc.seed = 4;
  const auto warm = flow::reflow_distill(teacher, pairs, stc);
  stc.steps = 4000;
  stc.lr = 2e-4;
  stc.seed = 6;
  const auto student = flow::reflow_distill(warm, pairs, stc);

  // held-out noise
  double self_gap = 0.0, student_gap = 0.0;
  for (const auto& ex : conds) {
    const Mat z0 = rng.normal_mat(F, D);
    const Mat rows = flow::align_cond(ex.cond, F, C);
    const auto t50 = flow::euler_integrate(teacher, z0, rows, std::nullopt, flow::kTeacherSteps, 1.0);
    const auto t500 = flow::euler_integrate(teacher, z0, rows, std::nullopt, 500, 1.0);
    const auto s10 = flow::euler_integrate(student, z0, rows, std::nullopt, flow::kStudentSteps, 1.0);
    self_gap += flow::mean_l2(t50.data, t500.data) / double(conds.size());
    student_gap += flow::mean_l2(s10.data, t50.data) / double(conds.size());
  }
  o.check(student_gap <= 5.0 * self_gap, "student(10) vs teacher(50) within 5x teacher 50-vs-500");
  o.detail << "const-field err " << fmt(const_err) << ", masked recon " << fmt(recon) << ", student gap "
           << fmt(student_gap) << " vs 5 x " << fmt(self_gap);
}

// ---- 7 ----
void dpo_descent(Outcome& o) {
  Rng rng(707);
  const auto cfg = tiny_lm(4, 16);
  lm::HierLM policy(cfg, rng);
  const auto ref = policy.clone();
  std::vector<dpo::PreferencePair> pairs;
  for (int i = 0; i < 8; ++i) {
    dpo::PreferencePair p{tiny_condition(rng, cfg.ref_dim), random_frames(rng, 8, 4, 16), random_frames(rng, 8, 4, 16)};
    pairs.push_back(std::move(p));
  }
  dpo::DPOTrainConfig tc;
  tc.steps = 50;
  tc.lr = 1e-3;
  const auto hist = dpo::train_dpo(policy, ref, pairs, tc);
  const double final_loss = dpo::dpo_loss(policy, ref, pairs, tc.dpo).item();
  double final_delta = 0.0, winner_gain = 0.0;
  for (const auto& p : pairs) {
    final_delta += dpo::delta(policy, ref, p) / double(pairs.size());
    winner_gain += (policy.joint_logprob(p.cond, p.winner) - ref.joint_logprob(p.cond, p.winner)) / double(pairs.size());
  }
  std::vector<double> deltas;
  for (const auto& s : hist) deltas.push_back(s.mean_delta);
  deltas.push_back(final_delta);
  bool increasing = true;
  for (std::size_t i = 1; i < deltas.size(); ++i) increasing = increasing && deltas[i] > deltas[i - 1];
  o.check(hist.size() == 50, "50 steps recorded");
  o.check(increasing, "mean delta strictly increases every step");
  o.check(final_loss < 0.6, "final loss < 0.6");
  o.check(winner_gain > 0.0, "winner log-prob rises relative to reference");
  o.detail << "loss " << fmt(hist.front().loss) << " -> " << fmt(final_loss) << ", mean delta " << fmt(deltas.front())
           << " -> " << fmt(final_delta) << ", winner gain " << fmt(winner_gain);
}

// ---- 8 ----
struct GroupCase {
  dpo::Criterion criterion;
  std::vector<dpo::CandidateScores> scores;
  int winner;  // -1: the group is rejected
  int loser;
};

void pair_builder_margins(Outcome& o) {
  using dpo::Criterion;
  // fields: sim, per, songeval, audiobox_avg
  const std::vector<GroupCase> table = {
      // similarity: margin > 0.12 and winner > 0.3
      {Criterion::Sim, {{0.50, 0, 0, 0}, {0.35, 0, 0, 0}}, 0, 1},
      {Criterion::Sim, {{0.29, 0, 0, 0}, {0.10, 0, 0, 0}}, -1, -1},
      {Criterion::Sim, {{0.31, 0, 0, 0}, {0.10, 0, 0, 0}}, 0, 1},
      {Criterion::Sim, {{0.45, 0, 0, 0}, {0.34, 0, 0, 0}}, -1, -1},
      {Criterion::Sim, {{0.20, 0, 0, 0}, {0.80, 0, 0, 0}, {0.50, 0, 0, 0}}, 1, 0},
      {Criterion::Sim, {{0.40, 0, 0, 0}, {0.42, 0, 0, 0}, {0.35, 0, 0, 0}}, -1, -1},
      {Criterion::Sim, {{0.90, 0, 0, 0}, {-0.5, 0, 0, 0}, {0.60, 0, 0, 0}, {0.0, 0, 0, 0}}, 0, 1},
      {Criterion::Sim, {{0.30, 0, 0, 0}, {-0.2, 0, 0, 0}}, -1, -1},
      {Criterion::Sim, {{0.70, 0, 0, 0}, {0.70, 0, 0, 0}, {0.10, 0, 0, 0}}, 0, 2},
      {Criterion::Sim, {{0.60, 0, 0, 0}, {0.60, 0, 0, 0}}, -1, -1},
      // phoneme error: lowest wins, highest loses, gap > 0.1
      {Criterion::Per, {{0, 0.25, 0, 0}, {0, 0.05, 0, 0}}, 1, 0},
      {Criterion::Per, {{0, 0.10, 0, 0}, {0, 0.15, 0, 0}}, -1, -1},
      {Criterion::Per, {{0, 0.00, 0, 0}, {0, 0.11, 0, 0}}, 0, 1},
      {Criterion::Per, {{0, 0.30, 0, 0}, {0, 0.90, 0, 0}, {0, 0.50, 0, 0}}, 0, 1},
      {Criterion::Per, {{0, 0.40, 0, 0}, {0, 0.45, 0, 0}, {0, 0.48, 0, 0}}, -1, -1},
      {Criterion::Per, {{0, 1.20, 0, 0}, {0, 0.20, 0, 0}, {0, 0.20, 0, 0}}, 1, 0},
      {Criterion::Per, {{0, 0.33, 0, 0}, {0, 0.33, 0, 0}}, -1, -1},
      {Criterion::Per, {{0, 0.60, 0, 0}, {0, 0.00, 0, 0}, {0, 0.60, 0, 0}, {0, 0.30, 0, 0}}, 1, 0},
      {Criterion::Per, {{0, 0.00, 0, 0}, {0, 0.08, 0, 0}}, -1, -1},
      {Criterion::Per, {{0, 2.00, 0, 0}, {0, 0.05, 0, 0}}, 1, 0},
      // quality: best on both beats worst on both, gaps > 0.5 and > 0.8
      {Criterion::Quality, {{0, 0, 3.0, 3.0}, {0, 0, 1.0, 1.0}, {0, 0, 0.0, 0.0}}, 0, 2},
      {Criterion::Quality, {{0, 0, 3.0, 1.0}, {0, 0, 1.0, 3.0}, {0, 0, 0.0, 0.0}}, -1, -1},
      {Criterion::Quality, {{0, 0, 2.0, 2.0}, {0, 0, 1.6, 1.0}}, -1, -1},
      {Criterion::Quality, {{0, 0, 2.0, 2.0}, {0, 0, 1.4, 1.1}}, 0, 1},
      {Criterion::Quality, {{0, 0, 2.0, 2.0}, {0, 0, 1.0, 1.3}}, -1, -1},
      {Criterion::Quality, {{0, 0, 1.0, 1.0}, {0, 0, 4.0, 4.5}, {0, 0, 2.0, 2.0}}, 1, 0},
      {Criterion::Quality, {{0, 0, 3.0, 3.0}, {0, 0, 0.0, 2.0}, {0, 0, 2.0, 0.0}}, -1, -1},
      {Criterion::Quality, {{0, 0, 5.0, 5.0}, {0, 0, 5.0, 5.0}, {0, 0, 1.0, 1.0}}, 0, 2},
      {Criterion::Quality, {{0, 0, 2.5, 3.5}, {0, 0, 1.5, 1.5}, {0, 0, 2.0, 2.0}, {0, 0, 1.0, 1.0}}, 0, 3},
      {Criterion::Quality, {{0, 0, 1.0, 1.0}, {0, 0, 1.0, 1.0}}, -1, -1},
  };
  o.check(table.size() == 30, "30 groups");
  std::size_t kept = 0;
  for (std::size_t g = 0; g < table.size(); ++g) {
    const auto& tc = table[g];
    dpo::CandidateGroup group;
    for (std::size_t i = 0; i < tc.scores.size(); ++i) {
      rvq::TokenFrameSeq t(1, 2);
      t.at(0, 0) = static_cast<std::uint32_t>(i);
      group.candidates.push_back({t, tc.scores[i]});
    }
    const auto pairs = dpo::build_pairs(std::span<const dpo::CandidateGroup>(&group, 1), tc.criterion);
    const std::string tag = "group " + std::to_string(g);
    if (tc.winner < 0) {
      o.check(pairs.empty(), tag + " rejected");
      continue;
    }
    ++kept;
    o.check(pairs.size() == 1, tag + " kept");
    if (pairs.size() == 1) {
      o.check(pairs[0].winner.at(0, 0) == static_cast<std::uint32_t>(tc.winner), tag + " winner");
      o.check(pairs[0].loser.at(0, 0) == static_cast<std::uint32_t>(tc.loser), tag + " loser");
    }
  }
  o.detail << table.size() << " groups, " << kept << " kept";
}

// ---- 9 ----
void tag_sampling(Outcome& o) {
  using lyrics::TagCategory;
  const std::vector<std::pair<TagCategory, double>> published = {
      {TagCategory::Genre, 0.95},      {TagCategory::SingerTimbre, 0.5}, {TagCategory::Gender, 0.375},
      {TagCategory::Mood, 0.325},      {TagCategory::Instrument, 0.25},  {TagCategory::Scene, 0.2},
      {TagCategory::Region, 0.125},    {TagCategory::Topic, 0.1}};
  lyrics::TagSet full;
  for (auto c : lyrics::kAllCategories) full.entries[c] = {"a", "b"};
  const auto table = lyrics::TagProbTable::defaults();
  Rng rng(909);
  const int n = 100000;
  std::map<TagCategory, int> kept;
  for (int i = 0; i < n; ++i) {
    const auto s = lyrics::sample_tags(full, table, rng);
    for (const auto& [c, v] : s.entries)
      if (!v.empty()) ++kept[c];
  }
  double worst = 0.0;
  for (const auto& [c, p] : published) {
    const double rate = kept[c] / double(n);
    worst = std::max(worst, std::abs(rate - p));
    o.check(std::abs(rate - p) <= 0.01, std::string(lyrics::category_name(c)) + " keep rate " + fmt(rate));
  }
  o.detail << "1e5 draws, worst deviation " << fmt(worst);
}

// ---- 10 ----
void parser(Outcome& o) {
  using lyrics::MarkerKind;
  const auto structure = lyrics::parse_lyrics(testdata::kStructureBox);
  const std::vector<std::pair<MarkerKind, std::size_t>> want_structure = {
      {MarkerKind::Chorus, 4}, {MarkerKind::Verse, 4},  {MarkerKind::Prechorus, 3},
      {MarkerKind::Chorus, 4}, {MarkerKind::Bridge, 3}, {MarkerKind::Outro, 2}};
  o.check(structure.sections.size() == want_structure.size(), "structure box: 6 sections");
  for (std::size_t i = 0; i < std::min(structure.sections.size(), want_structure.size()); ++i) {
    o.check(structure.sections[i].marker.kind == want_structure[i].first, "structure marker " + std::to_string(i));
    o.check(structure.sections[i].lines.size() == want_structure[i].second, "structure lines " + std::to_string(i));
    o.check(!structure.sections[i].annotation, "structure has no annotations");
  }

  const auto fine = lyrics::parse_finegrained(testdata::kFinegrainedBox);
  const std::vector<std::pair<MarkerKind, std::size_t>> want_fine = {
      {MarkerKind::Intro, 2}, {MarkerKind::Verse, 6},  {MarkerKind::Prechorus, 3},
      {MarkerKind::Chorus, 6}, {MarkerKind::Bridge, 3}, {MarkerKind::Outro, 2}};
  o.check(fine.sections.size() == want_fine.size(), "fine-grained box: 6 sections");
  std::size_t annotations = 0;
  for (std::size_t i = 0; i < std::min(fine.sections.size(), want_fine.size()); ++i) {
    const auto& s = fine.sections[i];
    o.check(s.marker.kind == want_fine[i].first, "fine marker " + std::to_string(i));
    o.check(s.lines.size() == want_fine[i].second, "fine lines " + std::to_string(i));
    o.check(s.annotation && s.annotation->phrases.size() == 4, "fine annotation of 4 phrases " + std::to_string(i));
    annotations += s.annotation.has_value();
  }

  Rng rng(1010);
  std::size_t ok = 0;
  for (int i = 0; i < 500; ++i) {
    const auto gen = testdata::random_document(rng, i % 2 == 0);
    const auto parsed = gen.finegrained ? lyrics::parse_finegrained(gen.raw_text) : lyrics::parse_lyrics(gen.raw_text);
    const auto text = lyrics::serialize(parsed);
    const auto again = gen.finegrained ? lyrics::parse_finegrained(text) : lyrics::parse_lyrics(text);
    ok += parsed == gen.doc && again == parsed && lyrics::serialize(again) == text;
  }
  o.check(ok == 500, "500 generated documents round-trip");
  o.detail << structure.sections.size() << " + " << fine.sections.size() << " sections, " << annotations
           << " annotations, " << ok << "/500 round trips";
}

// ---- 11 ----
void gradient_checks(Outcome& o) {
  using testing::grad_check;
  Rng rng(1111);
  std::vector<std::pair<std::string, double>> results;

  {
    auto y = ag::Var::param(rng.normal_mat(4, 3)), yh = ag::Var::param(rng.normal_mat(4, 3));
    results.emplace_back("commitment", grad_check({yh}, [&] { return rvq::commitment_loss(y, yh); }).rel_error);
  }
  {
    auto u = ag::Var::param(rng.normal_mat(5, 4)), r = ag::Var::param(rng.normal_mat(5, 4));
    results.emplace_back("alignment", grad_check({u, r}, [&] { return rvq::alignment_loss(u, r); }).rel_error);
  }
  {
    lm::HierLM m(tiny_lm(3, 4), rng);
    const auto a = random_frames(rng, 3, 3, 4);
    const auto cond = tiny_condition(rng, 4);
    for (auto w : {lm::LossWeights::balanced(3), lm::LossWeights::finetune(3)})
      results.emplace_back("weighted CE", grad_check(m.params(), [&] {
                                            return lm::weighted_ce_loss(m.forward(cond, a).layer_logits, a, w).total;
                                          }, 1e-4, 8).rel_error);
  }
  {
    lm::HierLM policy(tiny_lm(2, 3), rng), ref(tiny_lm(2, 3), rng);
    std::vector<dpo::PreferencePair> pairs;
    for (int i = 0; i < 2; ++i)
      pairs.push_back({tiny_condition(rng, 4), random_frames(rng, 2, 2, 3), random_frames(rng, 2, 2, 3)});
    results.emplace_back("DPO", grad_check(policy.params(), [&] { return dpo::dpo_loss(policy, ref, pairs, {0.5}); },
                                           1e-4, 8).rel_error);
  }
  {
    flow::MlpVectorField v(flow::MlpFieldConfig{3, 2, 8, 2, 2}, rng);
    const Mat z1 = rng.normal_mat(5, 3), z0 = rng.normal_mat(5, 3), cond = rng.normal_mat(5, 2);
    const flow::MaskSpec m{{1, 1, 0, 1, 0}};
    results.emplace_back("flow matching",
                         grad_check(v.params(), [&] { return flow::fm_loss_at(v, z1, z0, 0.6, cond, m); }).rel_error);
  }
  {
    auto xh = ag::Var::param(rng.normal_mat(1, 96));
    const ag::Var x(rng.normal_mat(1, 96));
    flow::FinetuneLossCfg cfg;
    results.emplace_back("decoder finetune",
                         grad_check({xh}, [&] { return flow::decoder_finetune_loss(xh, x, cfg); }, 1e-5, 96).rel_error);
  }
  {
    clap::DualEncoderConfig cfg;
    cfg.feature_dim = 4;
    cfg.proj_dim = 3;
    cfg.text_buckets = 16;
    cfg.text_embed_dim = 5;
    cfg.tau_init = 0.5;
    clap::DualEncoder enc(cfg, rng);
    const std::vector<rvq::FeatureSeq> music{{rng.normal_mat(3, 4), 25, 0}, {rng.normal_mat(2, 4), 25, 0},
                                             {rng.normal_mat(4, 4), 25, 0}};
    const std::vector<std::string> text{"soft pop", "dark rock piano", "warm"};
    results.emplace_back("InfoNCE", grad_check(enc.params(), [&] {
                                      return clap::infonce_loss(enc.encode_music(music), enc.encode_text(text), enc.tau());
                                    }).rel_error);
  }
  double worst = 0.0;
  for (const auto& [name, err] : results) {
    o.check(err < 1e-3, name + " rel error " + fmt(err));
    worst = std::max(worst, err);
  }
  o.detail << results.size() << " checks, worst relative error " << fmt(worst);
}

// ---- 12 ----
void clap_retrieval(Outcome& o) {
  const auto data = clap::synthetic_pairs(64, 16, 32, 12);
  Rng rng(1212);
  clap::DualEncoder enc({}, rng);
  clap::ClapTrainConfig tc;
  tc.steps = 200;
  tc.batch = 32;
  tc.lr = 1e-2;
  tc.seed = 13;
  const auto hist = clap::train_clap(enc, data, tc);
  const std::size_t ks[] = {1, 5, 10};
  const auto report = clap::evaluate(enc, data, ks);
  const double r1 = report.text_to_music.recall.at(1);
  o.check(hist.size() == 200, "200 steps");
  o.check(r1 > 0.5, "text-to-music R@1 > 0.5");
  o.detail << "loss " << fmt(hist.front().loss) << " -> " << fmt(hist.back().loss) << ", t2m R@1 " << fmt(r1)
           << " (chance " << fmt(1.0 / 64.0) << ")";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criterion numbers");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Entry> entries = {
      {1, "cross-mode decode equality", 120, cross_mode_equality},
      {2, "inference speedup", 300, inference_speedup},
      {3, "rvq properties", 60, rvq_properties},
      {4, "loss oracles", 60, loss_oracles},
      {5, "factorization identity", 60, factorization_identity},
      {6, "flow matching", 600, flow_matching},
      {7, "dpo descent", 120, dpo_descent},
      {8, "pair-builder margins", 1, pair_builder_margins},
      {9, "tag sampling", 10, tag_sampling},
      {10, "lyrics parser", 10, parser},
      {11, "gradient checks", 120, gradient_checks},
      {12, "clap retrieval", 180, clap_retrieval},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (const auto& e : entries) {
    if (!selected.empty() && !selected.count(e.id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      e.run(o);
    } catch (const std::exception& ex) {
      o.check(false, std::string("exception: ") + ex.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.check(secs < e.budget_s, "runtime over budget");
    failed += !o.pass;
    std::printf("%s %2d %-28s %s [%.2f s / %.0f s]\n", o.pass ? "PASS" : "FAIL", e.id, e.name, o.detail.str().c_str(),
                secs, e.budget_s);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
