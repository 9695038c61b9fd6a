#include "cadenza/infer/engine.hpp"

#include <algorithm>
#include <cassert>
#include <chrono>
#include <cmath>

#include "cadenza/core/error.hpp"
#include "cadenza/core/rng.hpp"

namespace cadenza::infer {

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Recompute: return "recompute";
    case Mode::Kv: return "kv";
    case Mode::FixedShape: return "fixed_shape";
  }
  return "?";
}

Mode parse_mode(std::string_view name) {
  if (name == "recompute") return Mode::Recompute;
  if (name == "kv") return Mode::Kv;
  if (name == "fixed_shape") return Mode::FixedShape;
  throw Error(ErrorCode::BadConfig, "unknown decode mode: " + std::string(name));
}

Buffer make_buffer(std::size_t n, Counters& ctr) {
  ctr.alloc.fetch_add(1, std::memory_order_relaxed);
  return Buffer(n, 0.0f);
}

KVCache::KVCache(std::size_t capacity, std::size_t width, Counters& ctr)
    : capacity_(capacity), width_(width), keys_(make_buffer(capacity * width, ctr)), values_(make_buffer(capacity * width, ctr)) {}

void KVCache::append(std::span<const float> k, std::span<const float> v) {
  if (valid_ >= capacity_) throw Error(ErrorCode::CapacityExceeded, "KV cache full at " + std::to_string(capacity_));
  if (k.size() != width_ || v.size() != width_) throw Error(ErrorCode::ShapeMismatch, "KV row width");
  std::copy(k.begin(), k.end(), keys_.begin() + static_cast<long>(valid_ * width_));
  std::copy(v.begin(), v.end(), values_.begin() + static_cast<long>(valid_ * width_));
  ++valid_;
}

void KVCache::assign_from(const KVCache& other) {
  if (other.width_ != width_ || other.valid_ > capacity_) throw Error(ErrorCode::CapacityExceeded, "KV cache copy");
  std::copy_n(other.keys_.begin(), other.valid_ * width_, keys_.begin());
  std::copy_n(other.values_.begin(), other.valid_ * width_, values_.begin());
  valid_ = other.valid_;
}

namespace detail {

struct BlockW {
  Buffer attn_norm, wq, wk, wv, wo, mlp_norm, up, down;
  std::size_t d = 0, heads = 0;
};

struct LinearW {
  Buffer w, b;  // b empty without bias
  std::size_t in = 0, out = 0;
};

// cos/sin per (position, pair index), evaluated in double like the training path.
struct RopeTable {
  std::size_t half = 0, positions = 0;
  Buffer cos, sin;
};

struct Compiled {
  lm::LMConfig cfg;
  Buffer text_embed, bos;
  LinearW ref_adapter, head0, to_local;
  std::vector<Buffer> frame_tables, local_tables;
  std::vector<BlockW> global_blocks, local_blocks;
  Buffer global_norm, local_norm;
  std::vector<LinearW> local_heads;
  RopeTable global_rope, local_rope;
};

Buffer to_float(const Mat& m) {
  Buffer out(m.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(m.data[i]);
  return out;
}

LinearW to_float(const nn::Linear& l) {
  return {to_float(l.weight.value()), l.bias.defined() ? to_float(l.bias.value()) : Buffer{}, l.in(), l.out()};
}

BlockW to_float(const nn::TransformerBlock& b, std::size_t d) {
  return {to_float(b.attn_norm.value()), to_float(b.wq.weight.value()), to_float(b.wk.weight.value()),
          to_float(b.wv.weight.value()),  to_float(b.wo.weight.value()), to_float(b.mlp_norm.value()),
          to_float(b.up.weight.value()),  to_float(b.down.weight.value()), d, b.n_heads};
}

RopeTable make_rope(std::size_t positions, std::size_t dh) {
  RopeTable t{dh / 2, positions, Buffer(positions * dh / 2), Buffer(positions * dh / 2)};
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t i = 0; i < dh / 2; ++i) {
      const double theta =
          static_cast<double>(p) * std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      t.cos[p * dh / 2 + i] = static_cast<float>(std::cos(theta));
      t.sin[p * dh / 2 + i] = static_cast<float>(std::sin(theta));
    }
  return t;
}

// ---- ops ----

enum class OpKind { FrameInput, CopyRow, Gather, RmsNorm, MatVec, Rope, Append, Attend, AddTo, Silu, Inc, Zero, ClearCache };

// One primitive step. Scalars that change between steps (positions, token
// ids) are read through pointers so a recorded list stays valid.
struct Op {
  OpKind kind;
  float* dst = nullptr;
  const float* a = nullptr;
  const float* b = nullptr;
  const float* bias = nullptr;
  float* scratch = nullptr;
  std::size_t n = 0, m = 0, heads = 0;
  std::size_t* counter = nullptr;
  const std::size_t* pos = nullptr;
  const std::uint32_t* token = nullptr;
  const std::vector<Buffer>* tables = nullptr;
  KVCache* cache = nullptr;
  const RopeTable* rope = nullptr;
};

void execute(const Op& op, Counters& ctr) {
  // Counter and cache bookkeeping is not a tensor kernel.
  if (op.kind != OpKind::Inc && op.kind != OpKind::Zero && op.kind != OpKind::ClearCache)
    ctr.dispatch.fetch_add(1, std::memory_order_relaxed);
  switch (op.kind) {
    case OpKind::FrameInput: {
      // Step 0 reads the start-of-audio row, later steps sum the previous frame.
      if (*op.pos == 0) {
        std::copy_n(op.a, op.n, op.dst);
      } else {
        std::fill_n(op.dst, op.n, 0.0f);
        for (std::size_t k = 0; k < op.tables->size(); ++k) {
          const float* row = (*op.tables)[k].data() + static_cast<std::size_t>(op.token[k]) * op.n;
          for (std::size_t c = 0; c < op.n; ++c) op.dst[c] += row[c];
        }
      }
      break;
    }
    case OpKind::CopyRow: std::copy_n(op.a, op.n, op.dst); break;
    case OpKind::Gather: std::copy_n(op.a + static_cast<std::size_t>(*op.token) * op.n, op.n, op.dst); break;
    case OpKind::RmsNorm: {
      double ss = 0.0;
      for (std::size_t c = 0; c < op.n; ++c) ss += static_cast<double>(op.a[c]) * op.a[c];
      const double inv = 1.0 / std::sqrt(ss / static_cast<double>(op.n) + 1e-6);
      for (std::size_t c = 0; c < op.n; ++c) op.dst[c] = static_cast<float>(op.a[c] * inv * op.b[c]);
      break;
    }
    case OpKind::MatVec: {
      // dst (m) = a (n) * W (n x m) + bias, accumulated row by row.
      if (op.bias) std::copy_n(op.bias, op.m, op.dst);
      else std::fill_n(op.dst, op.m, 0.0f);
      for (std::size_t i = 0; i < op.n; ++i) {
        const float xi = op.a[i];
        const float* row = op.b + i * op.m;
        float* __restrict y = op.dst;
        for (std::size_t o = 0; o < op.m; ++o) y[o] += xi * row[o];
      }
      break;
    }
    case OpKind::Rope: {
      const std::size_t p = *op.pos, half = op.rope->half, dh = 2 * half;
      const float* cs = op.rope->cos.data() + p * half;
      const float* sn = op.rope->sin.data() + p * half;
      for (std::size_t h = 0; h < op.heads; ++h)
        for (std::size_t i = 0; i < half; ++i) {
          float* x = op.dst + h * dh + 2 * i;
          const float x0 = x[0], x1 = x[1];
          x[0] = x0 * cs[i] - x1 * sn[i];
          x[1] = x0 * sn[i] + x1 * cs[i];
        }
      break;
    }
    case OpKind::Append: op.cache->append({op.a, op.n}, {op.b, op.n}); break;
    case OpKind::Attend: {
      // Visits only the valid prefix of the cache.
      const std::size_t keys = op.cache->valid_len(), dh = op.n / op.heads;
      const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
      std::fill_n(op.dst, op.n, 0.0f);
      for (std::size_t h = 0; h < op.heads; ++h) {
        const float* q = op.a + h * dh;
        float mx = -INFINITY;
        for (std::size_t j = 0; j < keys; ++j) {
          const float* kr = op.cache->key(j).data() + h * dh;
          float s = 0.0f;
          for (std::size_t d = 0; d < dh; ++d) s += q[d] * kr[d];
          op.scratch[j] = s * sc;
          mx = std::max(mx, op.scratch[j]);
        }
        float z = 0.0f;
        for (std::size_t j = 0; j < keys; ++j) z += (op.scratch[j] = std::exp(op.scratch[j] - mx));
        float* out = op.dst + h * dh;
        for (std::size_t j = 0; j < keys; ++j) {
          const float w = op.scratch[j] / z;
          const float* vr = op.cache->value(j).data() + h * dh;
          for (std::size_t d = 0; d < dh; ++d) out[d] += w * vr[d];
        }
      }
      break;
    }
    case OpKind::AddTo:
      for (std::size_t c = 0; c < op.n; ++c) op.dst[c] += op.a[c];
      break;
    case OpKind::Silu:
      for (std::size_t c = 0; c < op.n; ++c) op.dst[c] = op.dst[c] / (1.0f + std::exp(-op.dst[c]));
      break;
    case OpKind::Inc: ++*op.counter; break;
    case OpKind::Zero: *op.counter = 0; break;
    case OpKind::ClearCache: op.cache->clear(); break;
  }
}

struct Emitter {
  virtual ~Emitter() = default;
  virtual void emit(const Op& op) = 0;
};

struct Immediate final : Emitter {
  Counters& ctr;
  explicit Immediate(Counters& c) : ctr(c) {}
  void emit(const Op& op) override { execute(op, ctr); }
};

struct Recorder final : Emitter {
  std::vector<Op> ops;
  void emit(const Op& op) override { ops.push_back(op); }
};

// Scratch for one branch. Sized for the wider of the two stacks.
struct Workspace {
  Buffer x, h, q, k, v, att, tmp, up, scores, g, lx, ly, logits;
};

Workspace make_workspace(const lm::LMConfig& c, std::size_t key_capacity, Counters& ctr) {
  const std::size_t d = std::max(c.d_global, c.d_local);
  return {make_buffer(c.d_global, ctr), make_buffer(d, ctr),     make_buffer(d, ctr),       make_buffer(d, ctr),
          make_buffer(d, ctr),          make_buffer(d, ctr),     make_buffer(d, ctr),       make_buffer(4 * d, ctr),
          make_buffer(std::max(key_capacity, c.num_books), ctr), make_buffer(c.d_global, ctr),
          make_buffer(c.d_local, ctr),  make_buffer(c.d_local, ctr), make_buffer(c.vocab, ctr)};
}

Op matvec(float* dst, const float* x, const Buffer& w, const Buffer* bias, std::size_t in, std::size_t out) {
  Op op{OpKind::MatVec};
  op.dst = dst;
  op.a = x;
  op.b = w.data();
  op.bias = bias && !bias->empty() ? bias->data() : nullptr;
  op.n = in;
  op.m = out;
  return op;
}

Op matvec(float* dst, const float* x, const LinearW& l) { return matvec(dst, x, l.w, &l.b, l.in, l.out); }

Op unary(OpKind kind, float* dst, const float* a, std::size_t n, const float* b = nullptr) {
  Op op{kind};
  op.dst = dst;
  op.a = a;
  op.b = b;
  op.n = n;
  return op;
}

Op counter_op(OpKind kind, std::size_t* c) {
  Op op{kind};
  op.counter = c;
  return op;
}

// Pre-norm block on one row `x` at position *pos, appending its key/value.
void emit_block(Emitter& e, const BlockW& b, float* x, const std::size_t* pos, KVCache& cache, Workspace& ws,
                const RopeTable& rope) {
  const std::size_t d = b.d;
  e.emit(unary(OpKind::RmsNorm, ws.h.data(), x, d, b.attn_norm.data()));
  e.emit(matvec(ws.q.data(), ws.h.data(), b.wq, nullptr, d, d));
  e.emit(matvec(ws.k.data(), ws.h.data(), b.wk, nullptr, d, d));
  e.emit(matvec(ws.v.data(), ws.h.data(), b.wv, nullptr, d, d));
  for (float* t : {ws.q.data(), ws.k.data()}) {
    Op r{OpKind::Rope};
    r.dst = t;
    r.pos = pos;
    r.rope = &rope;
    r.heads = b.heads;
    e.emit(r);
  }
  Op app{OpKind::Append};
  app.a = ws.k.data();
  app.b = ws.v.data();
  app.n = d;
  app.cache = &cache;
  e.emit(app);
  Op att{OpKind::Attend};
  att.dst = ws.att.data();
  att.a = ws.q.data();
  att.scratch = ws.scores.data();
  att.n = d;
  att.heads = b.heads;
  att.cache = &cache;
  e.emit(att);
  e.emit(matvec(ws.tmp.data(), ws.att.data(), b.wo, nullptr, d, d));
  e.emit(unary(OpKind::AddTo, x, ws.tmp.data(), d));
  e.emit(unary(OpKind::RmsNorm, ws.h.data(), x, d, b.mlp_norm.data()));
  e.emit(matvec(ws.up.data(), ws.h.data(), b.up, nullptr, d, 4 * d));
  e.emit(unary(OpKind::Silu, ws.up.data(), nullptr, 4 * d));
  e.emit(matvec(ws.tmp.data(), ws.up.data(), b.down, nullptr, 4 * d, d));
  e.emit(unary(OpKind::AddTo, x, ws.tmp.data(), d));
}

// Input row for global step `*step`: BOS at 0, else the previous frame's sum.
Op frame_input(const Compiled& m, float* dst, const std::uint32_t* prev_tokens, const std::size_t* step) {
  Op op{OpKind::FrameInput};
  op.dst = dst;
  op.a = m.bos.data();
  op.n = m.cfg.d_global;
  op.token = prev_tokens;
  op.pos = step;
  op.tables = &m.frame_tables;
  return op;
}

// Global blocks on ws.x, then the normalized hidden state and layer-0 logits.
void emit_global_tail(Emitter& e, const Compiled& m, Workspace& ws, std::vector<KVCache>& caches, std::size_t* pos,
                      bool logits) {
  for (std::size_t b = 0; b < m.global_blocks.size(); ++b)
    emit_block(e, m.global_blocks[b], ws.x.data(), pos, caches[b], ws, m.global_rope);
  e.emit(counter_op(OpKind::Inc, pos));
  if (!logits) return;
  e.emit(unary(OpKind::RmsNorm, ws.g.data(), ws.x.data(), m.cfg.d_global, m.global_norm.data()));
  e.emit(matvec(ws.logits.data(), ws.g.data(), m.head0));
}

// Local row `k` of the current frame: row 0 is the projected global state,
// row k >= 1 embeds token k-1 and yields the layer-k logits.
void emit_local_row(Emitter& e, const Compiled& m, Workspace& ws, std::vector<KVCache>& caches, std::size_t* pos,
                    std::size_t k, const std::uint32_t* tokens, bool logits) {
  if (k == 0) {
    e.emit(matvec(ws.lx.data(), ws.g.data(), m.to_local));
  } else {
    Op g{OpKind::Gather};
    g.dst = ws.lx.data();
    g.a = m.local_tables[k - 1].data();
    g.n = m.cfg.d_local;
    g.token = tokens + (k - 1);
    e.emit(g);
  }
  for (std::size_t b = 0; b < m.local_blocks.size(); ++b)
    emit_block(e, m.local_blocks[b], ws.lx.data(), pos, caches[b], ws, m.local_rope);
  e.emit(counter_op(OpKind::Inc, pos));
  if (k == 0 || !logits) return;
  e.emit(unary(OpKind::RmsNorm, ws.ly.data(), ws.lx.data(), m.cfg.d_local, m.local_norm.data()));
  e.emit(matvec(ws.logits.data(), ws.ly.data(), m.local_heads[k - 1]));
}

struct Branch {
  std::vector<Buffer> cond_rows;  // embedded condition, one row each
  std::vector<KVCache> global, local;
  std::size_t pos_global = 0, pos_local = 0;
};

// Op lists captured once per session for fixed-shape stepping.
struct Plan {
  Workspace ws[2];
  std::vector<Op> global[2];
  std::vector<std::vector<Op>> local[2];  // per local row
  std::vector<double> lc, lu, mixed;
  SampleScratch scratch;
};

struct SessionState {
  const Compiled* model = nullptr;
  Counters* ctr = nullptr;
  Branch br[2];  // 0 conditional, 1 unconditional
  Rng rng;
  std::size_t frames = 0;
  std::size_t draws = 0;  // uniforms handed to the sampler
  std::vector<std::uint32_t> history;  // max_frames x K, preallocated
  std::vector<std::uint32_t> prev;     // tokens of the previous frame
  std::vector<std::uint32_t> cur;      // frame being sampled
  std::unique_ptr<Plan> plan;
  LogitsTap tap;
};

void emit_condition(Emitter& e, const Compiled& m, Branch& br, Workspace& ws) {
  for (const auto& row : br.cond_rows) {
    e.emit(unary(OpKind::CopyRow, ws.x.data(), row.data(), m.cfg.d_global));
    emit_global_tail(e, m, ws, br.global, &br.pos_global, false);
  }
}

}  // namespace detail

using namespace detail;

DecodeSession::DecodeSession(std::unique_ptr<SessionState> s) : s_(std::move(s)) {}
DecodeSession::DecodeSession(DecodeSession&&) noexcept = default;
DecodeSession& DecodeSession::operator=(DecodeSession&&) noexcept = default;
DecodeSession::~DecodeSession() = default;

std::size_t DecodeSession::frames_emitted() const { return s_->frames; }
std::size_t DecodeSession::pos_global() const { return s_->br[0].pos_global; }
std::size_t DecodeSession::sampler_draws() const { return s_->draws; }
std::size_t DecodeSession::pos_local() const { return s_->br[0].pos_local; }
std::size_t DecodeSession::cond_length() const { return s_->br[0].cond_rows.size(); }
const KVCache& DecodeSession::global_cache(std::size_t block) const { return s_->br[0].global.at(block); }
void DecodeSession::set_logits_tap(LogitsTap tap) { s_->tap = std::move(tap); }

rvq::TokenFrameSeq DecodeSession::emitted() const {
  const std::size_t K = s_->model->cfg.num_books;
  rvq::TokenFrameSeq out(s_->frames, K);
  std::copy_n(s_->history.begin(), s_->frames * K, out.indices.begin());
  return out;
}

Engine::Engine(const lm::HierLM& model, EngineConfig cfg)
    : cfg_(cfg), m_(std::make_unique<Compiled>()), ctr_(std::make_unique<Counters>()) {
  auto& c = *m_;
  c.cfg = model.config();
  c.text_embed = to_float(model.text_embed.value());
  c.bos = to_float(model.bos.value());
  c.ref_adapter = to_float(model.ref_adapter);
  c.head0 = to_float(model.head0);
  c.to_local = to_float(model.to_local);
  for (const auto& t : model.frame_tables) c.frame_tables.push_back(to_float(t.value()));
  for (const auto& t : model.local_tables) c.local_tables.push_back(to_float(t.value()));
  for (const auto& b : model.global_blocks) c.global_blocks.push_back(to_float(b, c.cfg.d_global));
  for (const auto& b : model.local_blocks) c.local_blocks.push_back(to_float(b, c.cfg.d_local));
  c.global_norm = to_float(model.global_norm.value());
  c.local_norm = to_float(model.local_norm.value());
  for (const auto& h : model.local_heads) c.local_heads.push_back(to_float(h));
  c.global_rope = make_rope(cfg_.cond_capacity + c.cfg.max_frames, c.cfg.d_global / c.cfg.global_heads);
  c.local_rope = make_rope(c.cfg.num_books, c.cfg.d_local / c.cfg.local_heads);
}

Engine::~Engine() = default;

const lm::LMConfig& Engine::model_config() const { return m_->cfg; }

DecodeSession Engine::prefill(const lyrics::CondSequence& cond, std::uint64_t seed) const {
  const auto& m = *m_;
  const auto& c = m.cfg;
  auto s = std::make_unique<SessionState>();
  s->model = &m;
  s->ctr = ctr_.get();
  s->rng = Rng(seed);

  // Embed the condition rows.
  auto& cb = s->br[0];
  for (const auto& seg : cond.segments) {
    if (seg.role == lyrics::SegmentRole::RefEmbed) {
      if (seg.embedding.size() != c.ref_dim) throw Error(ErrorCode::DimMismatch, "reference embedding width");
      Buffer row = make_buffer(c.d_global, *ctr_);
      Immediate e(*ctr_);
      e.emit(matvec(row.data(), seg.embedding.data(), m.ref_adapter));
      cb.cond_rows.push_back(std::move(row));
    } else {
      for (auto t : seg.tokens) {
        if (t >= c.text_vocab) throw Error(ErrorCode::IndexOutOfRange, "text token " + std::to_string(t));
        Buffer row = make_buffer(c.d_global, *ctr_);
        std::copy_n(m.text_embed.begin() + static_cast<long>(t * c.d_global), c.d_global, row.begin());
        cb.cond_rows.push_back(std::move(row));
      }
    }
  }
  if (cb.cond_rows.size() > cfg_.cond_capacity)
    throw Error(ErrorCode::TooLong, "condition of " + std::to_string(cb.cond_rows.size()) + " rows exceeds " +
                                        std::to_string(cfg_.cond_capacity));

  for (int b = 0; b < 2; ++b) {
    auto& br = s->br[b];
    const std::size_t cap = br.cond_rows.size() + c.max_frames;
    for (std::size_t i = 0; i < m.global_blocks.size(); ++i) br.global.emplace_back(cap, c.d_global, *ctr_);
    for (std::size_t i = 0; i < m.local_blocks.size(); ++i) br.local.emplace_back(c.num_books, c.d_local, *ctr_);
  }
  s->history.assign(c.max_frames * c.num_books, 0);
  s->prev.assign(c.num_books, 0);
  s->cur.assign(c.num_books, 0);

  Workspace ws = make_workspace(c, cb.cond_rows.size() + c.max_frames, *ctr_);
  Immediate e(*ctr_);
  emit_condition(e, m, cb, ws);
  return DecodeSession(std::move(s));
}

namespace {

void to_double(std::span<const float> in, std::vector<double>& out) {
  out.resize(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i];
}

// Rebuilds one branch's global stack from nothing and leaves its logits in ws.
void recompute_global(const Compiled& m, SessionState& s, Branch& br, Workspace& ws, Counters& ctr) {
  const auto& c = m.cfg;
  const std::size_t rows = br.cond_rows.size() + s.frames + 1;
  std::vector<KVCache> fresh;
  for (std::size_t i = 0; i < m.global_blocks.size(); ++i) fresh.emplace_back(rows, c.d_global, ctr);
  std::size_t pos = 0;
  Immediate e(ctr);
  for (const auto& row : br.cond_rows) {
    e.emit(unary(OpKind::CopyRow, ws.x.data(), row.data(), c.d_global));
    emit_global_tail(e, m, ws, fresh, &pos, false);
  }
  for (std::size_t j = 0; j <= s.frames; ++j) {
    const std::uint32_t* prev = j == 0 ? s.prev.data() : s.history.data() + (j - 1) * c.num_books;
    e.emit(frame_input(m, ws.x.data(), prev, &j));
    emit_global_tail(e, m, ws, fresh, &pos, j == s.frames);
  }
  for (std::size_t i = 0; i < fresh.size(); ++i) br.global[i].assign_from(fresh[i]);
  br.pos_global = pos;
}

void recompute_local(const Compiled& m, Branch& br, Workspace& ws, std::size_t k, const std::uint32_t* tokens,
                     Counters& ctr) {
  std::vector<KVCache> fresh;
  for (std::size_t i = 0; i < m.local_blocks.size(); ++i) fresh.emplace_back(k + 1, m.cfg.d_local, ctr);
  std::size_t pos = 0;
  Immediate e(ctr);
  for (std::size_t r = 0; r <= k; ++r) emit_local_row(e, m, ws, fresh, &pos, r, tokens, r == k);
  for (std::size_t i = 0; i < fresh.size(); ++i) br.local[i].assign_from(fresh[i]);
  br.pos_local = pos;
}

void capture(const Compiled& m, SessionState& s, std::uint32_t* cur) {
  const auto& c = m.cfg;
  const std::size_t before = s.br[0].global[0].valid_len();
  auto plan = std::make_unique<Plan>();
  for (int b = 0; b < 2; ++b) {
    auto& br = s.br[b];
    plan->ws[b] = make_workspace(c, br.cond_rows.size() + c.max_frames, *s.ctr);
    Recorder g;
    g.emit(frame_input(m, plan->ws[b].x.data(), s.prev.data(), &s.frames));
    emit_global_tail(g, m, plan->ws[b], br.global, &br.pos_global, true);
    plan->global[b] = std::move(g.ops);
    for (std::size_t k = 0; k < c.num_books; ++k) {
      Recorder l;
      if (k == 0) {
        for (auto& cache : br.local) {
          Op clr{OpKind::ClearCache};
          clr.cache = &cache;
          l.emit(clr);
        }
        l.emit(counter_op(OpKind::Zero, &br.pos_local));
      }
      emit_local_row(l, m, plan->ws[b], br.local, &br.pos_local, k, cur, true);
      plan->local[b].push_back(std::move(l.ops));
    }
  }
  plan->lc.reserve(c.vocab);
  plan->lu.reserve(c.vocab);
  plan->mixed.resize(c.vocab);
  plan->scratch.reserve(c.vocab);
  // Capturing must not touch session state.
  assert(s.br[0].global[0].valid_len() == before);
  (void)before;
  s.plan = std::move(plan);
}

void run(const std::vector<Op>& ops, Counters& ctr) {
  for (const auto& op : ops) execute(op, ctr);
}

}  // namespace

std::span<const std::uint32_t> Engine::decode_step(DecodeSession& session, const SamplerConfig& sampler, Mode mode) const {
  sampler.validate();
  auto& s = *session.s_;
  const auto& m = *m_;
  const auto& c = m.cfg;
  const std::size_t K = c.num_books;
  if (s.frames >= c.max_frames) throw Error(ErrorCode::SessionExhausted, "session emitted max_frames");
  std::uint32_t* cur = s.cur.data();
  const bool guide0 = sampler.cfg_scale != 1.0;
  const bool guide_local = guide0 && sampler.cfg_local;

  if (mode == Mode::FixedShape && !s.plan) capture(m, s, cur);
  // Buffers for this step. Fixed-shape stepping reuses the captured ones.
  std::unique_ptr<Workspace> step_ws[2];
  std::vector<double> lc, lu, mixed;
  SampleScratch local_scratch;
  Workspace* ws[2];
  if (mode == Mode::FixedShape) {
    ws[0] = &s.plan->ws[0];
    ws[1] = &s.plan->ws[1];
  } else {
    for (int b = 0; b < 2; ++b) {
      step_ws[b] = std::make_unique<Workspace>(make_workspace(c, s.br[b].cond_rows.size() + c.max_frames, *ctr_));
      ws[b] = step_ws[b].get();
    }
    ctr_->alloc.fetch_add(3, std::memory_order_relaxed);  // logits staging and sampler scratch
  }
  auto& vc = mode == Mode::FixedShape ? s.plan->lc : lc;
  auto& vu = mode == Mode::FixedShape ? s.plan->lu : lu;
  auto& vm = mode == Mode::FixedShape ? s.plan->mixed : mixed;
  auto& scratch = mode == Mode::FixedShape ? s.plan->scratch : local_scratch;
  vm.resize(c.vocab);

  const auto sample = [&](std::size_t layer, bool guided) {
    to_double(ws[0]->logits, vc);
    if (s.tap) s.tap(s.frames, layer, ws[0]->logits);
    if (guided) {
      to_double(ws[1]->logits, vu);
      cfg_logits_into(vc, vu, sampler.cfg_scale, vm);
    } else {
      std::copy(vc.begin(), vc.end(), vm.begin());
    }
    const double u = s.rng.uniform();
    ++s.draws;
    return static_cast<std::uint32_t>(top_k_sample(vm, sampler, u, scratch));
  };

  // Layer 0 from the global stack.
  const int gb = guide0 ? 2 : 1;
  for (int b = 0; b < gb; ++b) {
    if (mode == Mode::Recompute) {
      recompute_global(m, s, s.br[b], *ws[b], *ctr_);
    } else if (mode == Mode::Kv) {
      Immediate e(*ctr_);
      e.emit(frame_input(m, ws[b]->x.data(), s.prev.data(), &s.frames));
      emit_global_tail(e, m, *ws[b], s.br[b].global, &s.br[b].pos_global, true);
    } else {
      run(s.plan->global[b], *ctr_);
    }
  }
  cur[0] = sample(0, guide0);

  // Layers 1..K-1 from the local stack.
  const int lb = guide_local ? 2 : 1;
  for (std::size_t k = 0; k < K; ++k) {
    for (int b = 0; b < lb; ++b) {
      if (mode == Mode::Recompute) {
        recompute_local(m, s.br[b], *ws[b], k, cur, *ctr_);
      } else if (mode == Mode::Kv) {
        Immediate e(*ctr_);
        if (k == 0) {
          for (auto& cache : s.br[b].local) cache.clear();
          s.br[b].pos_local = 0;
        }
        emit_local_row(e, m, *ws[b], s.br[b].local, &s.br[b].pos_local, k, cur, true);
      } else {
        run(s.plan->local[b][k], *ctr_);
      }
    }
    if (k > 0) cur[k] = sample(k, guide_local);
  }

  std::copy_n(cur, K, s.prev.begin());
  std::uint32_t* out = s.history.data() + s.frames * K;
  std::copy_n(cur, K, out);
  ++s.frames;
  return {out, K};
}

GenerateResult Engine::generate(const lyrics::CondSequence& cond, std::size_t n_frames, const SamplerConfig& sampler,
                                Mode mode, std::size_t batch, std::uint64_t seed, const StreamSink& sink) const {
  if (batch == 0) throw Error(ErrorCode::BadConfig, "batch must be >= 1");
  sampler.validate();
  if (n_frames > m_->cfg.max_frames) throw Error(ErrorCode::SessionExhausted, "n_frames exceeds max_frames");
  const auto d0 = ctr_->dispatch.load(), a0 = ctr_->alloc.load();
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<DecodeSession> sessions;
  for (std::size_t i = 0; i < batch; ++i) sessions.push_back(prefill(cond, Rng::derive_seed(seed, i)));
  std::uint64_t steady = 0;
  for (std::size_t l = 0; l < n_frames; ++l) {
    const auto before = ctr_->alloc.load();
    for (std::size_t i = 0; i < batch; ++i) {
      auto frame = decode_step(sessions[i], sampler, mode);
      if (sink) sink(i, l, frame);
    }
    if (l >= 2) steady += ctr_->alloc.load() - before;
  }
  GenerateResult out;
  for (auto& s : sessions) out.items.push_back(s.emitted());
  out.metrics.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.metrics.dispatch_count = ctr_->dispatch.load() - d0;
  out.metrics.alloc_count = ctr_->alloc.load() - a0;
  out.metrics.steady_alloc_count = steady;
  return out;
}

}  // namespace cadenza::infer
