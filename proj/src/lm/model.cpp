#include "cadenza/lm/model.hpp"

#include <cmath>
#include <numeric>

#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"

namespace cadenza::lm {

using namespace ag;

void LMConfig::validate() const {
  if (num_books < 2 || vocab < 2) throw Error(ErrorCode::BadConfig, "LM needs K >= 2 and V >= 2");
  if (d_global == 0 || d_local == 0 || global_heads == 0 || local_heads == 0 || max_frames == 0 || text_vocab == 0)
    throw Error(ErrorCode::BadConfig, "LM sizes must be positive");
  if (d_global % global_heads != 0 || (d_global / global_heads) % 2 != 0)
    throw Error(ErrorCode::BadConfig, "d_global must split into even-width heads");
  if (d_local % local_heads != 0 || (d_local / local_heads) % 2 != 0)
    throw Error(ErrorCode::BadConfig, "d_local must split into even-width heads");
}

Mat frame_embed(std::span<const std::uint32_t> frame, std::span<const Mat> tables) {
  if (frame.size() != tables.size()) throw Error(ErrorCode::ShapeMismatch, "frame depth differs from table count");
  Mat out(1, tables.empty() ? 0 : tables[0].cols);
  for (std::size_t k = 0; k < frame.size(); ++k) {
    if (frame[k] >= tables[k].rows) throw Error(ErrorCode::IndexOutOfRange, "frame token " + std::to_string(frame[k]));
    auto row = tables[k].row(frame[k]);
    for (std::size_t c = 0; c < out.cols; ++c) out.data[c] += row[c];
  }
  return out;
}

HierLM::HierLM(const LMConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const double es = 0.02 * 10.0 / std::sqrt(static_cast<double>(cfg.d_global));
  text_embed = Var::param(rng.normal_mat(cfg.text_vocab, cfg.d_global, es));
  ref_adapter = nn::Linear(cfg.ref_dim, cfg.d_global, rng);
  bos = Var::param(rng.normal_mat(1, cfg.d_global, es));
  for (std::size_t k = 0; k < cfg.num_books; ++k) frame_tables.push_back(Var::param(rng.normal_mat(cfg.vocab, cfg.d_global, es)));
  for (std::size_t b = 0; b < cfg.global_blocks; ++b) global_blocks.emplace_back(cfg.d_global, cfg.global_heads, rng);
  global_norm = Var::param(Mat(1, cfg.d_global, 1.0));
  head0 = nn::Linear(cfg.d_global, cfg.vocab, rng, false);

  const double ls = 0.02 * 10.0 / std::sqrt(static_cast<double>(cfg.d_local));
  to_local = nn::Linear(cfg.d_global, cfg.d_local, rng);
  for (std::size_t k = 0; k + 1 < cfg.num_books; ++k) local_tables.push_back(Var::param(rng.normal_mat(cfg.vocab, cfg.d_local, ls)));
  for (std::size_t b = 0; b < cfg.local_blocks; ++b) local_blocks.emplace_back(cfg.d_local, cfg.local_heads, rng);
  local_norm = Var::param(Mat(1, cfg.d_local, 1.0));
  for (std::size_t k = 0; k + 1 < cfg.num_books; ++k) local_heads.emplace_back(cfg.d_local, cfg.vocab, rng, false);
}

Var HierLM::embed_condition(const lyrics::CondSequence& cond) const {
  std::vector<Var> parts;
  for (const auto& seg : cond.segments) {
    if (seg.role == lyrics::SegmentRole::RefEmbed) {
      if (seg.embedding.size() != cfg_.ref_dim) throw Error(ErrorCode::DimMismatch, "reference embedding width");
      Mat e(1, cfg_.ref_dim);
      for (std::size_t i = 0; i < cfg_.ref_dim; ++i) e.data[i] = seg.embedding[i];
      parts.push_back(ref_adapter(Var(e)));
    } else if (!seg.tokens.empty()) {
      std::vector<std::size_t> idx(seg.tokens.begin(), seg.tokens.end());
      for (auto i : idx)
        if (i >= cfg_.text_vocab) throw Error(ErrorCode::IndexOutOfRange, "text token " + std::to_string(i));
      parts.push_back(gather_rows(text_embed, idx));
    }
  }
  if (parts.empty()) return Var(Mat(0, cfg_.d_global));
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

HierLM::Output HierLM::forward(const lyrics::CondSequence& cond, const rvq::TokenFrameSeq& frames) const {
  const std::size_t L = frames.frames, K = cfg_.num_books;
  if (L > cfg_.max_frames) throw Error(ErrorCode::TooLong, std::to_string(L) + " frames exceed " + std::to_string(cfg_.max_frames));
  if (frames.num_books != K) throw Error(ErrorCode::ShapeMismatch, "token depth differs from model");
  for (auto v : frames.indices)
    if (v >= cfg_.vocab) throw Error(ErrorCode::IndexOutOfRange, "audio token " + std::to_string(v));
  if (L == 0) throw Error(ErrorCode::ShapeMismatch, "empty frame sequence");

  // Global stream
  std::vector<Var> rows;
  auto c = embed_condition(cond);
  const std::size_t prefix = c.rows();
  if (prefix > 0) rows.push_back(c);
  rows.push_back(bos);
  if (L > 1) {
    Var h;
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<std::size_t> idx(L - 1);
      for (std::size_t l = 0; l + 1 < L; ++l) idx[l] = frames.at(l, k);
      auto e = gather_rows(frame_tables[k], idx);
      h = k == 0 ? e : add(h, e);
    }
    rows.push_back(h);
  }
  Var x = rows.size() == 1 ? rows[0] : concat_rows(rows);
  std::vector<std::size_t> pos(x.rows());
  std::iota(pos.begin(), pos.end(), 0);
  const auto spans = causal_spans(x.rows());
  for (const auto& b : global_blocks) x = b(x, pos, spans);
  auto g = rmsnorm(slice_rows(x, prefix, prefix + L), global_norm);

  Output out;
  out.global_hidden = g;
  out.layer_logits.push_back(head0(g));

  // Local stream: L blocks of K rows.
  std::vector<std::size_t> order(L * K);
  std::vector<Var> table_rows{to_local(g)};
  for (std::size_t k = 0; k + 1 < K; ++k) {
    std::vector<std::size_t> idx(L);
    for (std::size_t l = 0; l < L; ++l) idx[l] = frames.at(l, k);
    table_rows.push_back(gather_rows(local_tables[k], idx));
  }
  // table_rows stacked as [g rows (L); layer0 rows (L); ...]; reorder frame-major
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t j = 0; j < K; ++j) order[l * K + j] = j * L + l;
  Var y = gather_rows(concat_rows(table_rows), order);
  std::vector<std::size_t> lpos(L * K);
  for (std::size_t i = 0; i < L * K; ++i) lpos[i] = i % K;
  const auto lspans = block_causal_spans(L * K, K);
  for (const auto& b : local_blocks) y = b(y, lpos, lspans);
  y = rmsnorm(y, local_norm);
  for (std::size_t k = 1; k < K; ++k) {
    std::vector<std::size_t> pick(L);
    for (std::size_t l = 0; l < L; ++l) pick[l] = l * K + k;
    out.layer_logits.push_back(local_heads[k - 1](gather_rows(y, pick)));
  }
  return out;
}

Var HierLM::joint_logprob_var(const lyrics::CondSequence& cond, const rvq::TokenFrameSeq& frames) const {
  auto out = forward(cond, frames);
  Var total;
  for (std::size_t k = 0; k < cfg_.num_books; ++k) {
    std::vector<std::size_t> tg(frames.frames);
    for (std::size_t l = 0; l < frames.frames; ++l) tg[l] = frames.at(l, k);
    auto s = sum(logsoftmax_pick(out.layer_logits[k], tg));
    total = k == 0 ? s : add(total, s);
  }
  return total;
}

double HierLM::joint_logprob(const lyrics::CondSequence& cond, const rvq::TokenFrameSeq& frames) const {
  return joint_logprob_var(cond, frames).item();
}

std::vector<Var> HierLM::params() const {
  std::vector<Var> out{text_embed};
  ref_adapter.collect(out);
  out.push_back(bos);
  for (const auto& t : frame_tables) out.push_back(t);
  for (const auto& b : global_blocks) b.collect(out);
  out.push_back(global_norm);
  head0.collect(out);
  to_local.collect(out);
  for (const auto& t : local_tables) out.push_back(t);
  for (const auto& b : local_blocks) b.collect(out);
  out.push_back(local_norm);
  for (const auto& h : local_heads) h.collect(out);
  return out;
}

std::size_t HierLM::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params()) n += p.value().size();
  return n;
}

void HierLM::copy_from(const HierLM& other) {
  if (!(other.cfg_ == cfg_)) throw Error(ErrorCode::ConfigMismatch, "LM configs differ");
  auto mine = params();
  nn::restore(mine, nn::snapshot(other.params()));
}

HierLM HierLM::clone() const {
  Rng rng(0);
  HierLM out(cfg_, rng);
  out.copy_from(*this);
  return out;
}

std::vector<std::uint8_t> encode_lm(const HierLM& m) {
  ByteWriter w;
  w.magic("HLM1", 1);
  const auto& c = m.config();
  for (auto v : {c.num_books, c.vocab, c.d_global, c.d_local, c.global_blocks, c.local_blocks, c.global_heads, c.local_heads,
                 c.max_frames, c.text_vocab, c.ref_dim})
    w.u32(static_cast<std::uint32_t>(v));
  nn::write_params(w, m.params());
  return w.bytes();
}

HierLM decode_lm(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("HLM1", 1);
  LMConfig c;
  for (auto* f : {&c.num_books, &c.vocab, &c.d_global, &c.d_local, &c.global_blocks, &c.local_blocks, &c.global_heads,
                  &c.local_heads, &c.max_frames, &c.text_vocab, &c.ref_dim})
    *f = r.u32();
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::BadCheckpoint, e.what());
  }
  if (c.d_global > 4096 || c.d_local > 4096 || c.vocab > (1u << 20) || c.global_blocks > 256 || c.local_blocks > 256)
    throw Error(ErrorCode::BadCheckpoint, "implausible LM dimensions");
  Rng rng(0);
  HierLM m(c, rng);
  auto params = m.params();
  nn::read_params(r, params);
  if (!r.at_end()) throw Error(ErrorCode::BadCheckpoint, "trailing bytes in LM checkpoint");
  return m;
}

}  // namespace cadenza::lm
