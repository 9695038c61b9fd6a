#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cadenza/infer/sampler.hpp"
#include "cadenza/lm/model.hpp"

namespace cadenza::infer {

enum class Mode { Recompute, Kv, FixedShape };

std::string mode_name(Mode m);
Mode parse_mode(std::string_view name);  // BadConfig

// Instrumentation shared by every session of one engine. A dispatch is one
// primitive kernel invocation on one row; an allocation is one engine buffer.
struct Counters {
  std::atomic<std::uint64_t> dispatch{0};
  std::atomic<std::uint64_t> alloc{0};
};

using Buffer = std::vector<float>;
Buffer make_buffer(std::size_t n, Counters& ctr);

// Per-layer key/value rows, preallocated to a fixed capacity.
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t capacity, std::size_t width, Counters& ctr);

  // Writes slot valid_len and advances. Throws CapacityExceeded.
  void append(std::span<const float> k, std::span<const float> v);
  std::span<const float> key(std::size_t i) const { return {keys_.data() + i * width_, width_}; }
  std::span<const float> value(std::size_t i) const { return {values_.data() + i * width_, width_}; }
  std::size_t valid_len() const { return valid_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t width() const { return width_; }
  void clear() { valid_ = 0; }
  // Copies the valid prefix of `other` into this cache's existing storage.
  void assign_from(const KVCache& other);

 private:
  std::size_t capacity_ = 0, width_ = 0, valid_ = 0;
  Buffer keys_, values_;
};

struct StepMetrics {
  std::uint64_t dispatch_count = 0;
  std::uint64_t alloc_count = 0;         // every engine buffer during the run
  std::uint64_t steady_alloc_count = 0;  // buffers made by decode steps after the second
  double wall_time = 0.0;                // seconds
};

// Receives (batch item, frame index, frame tokens) as soon as a frame is done.
using StreamSink = std::function<void(std::size_t, std::size_t, std::span<const std::uint32_t>)>;
// Debug tap on the conditional branch: (frame, layer, raw logits).
using LogitsTap = std::function<void(std::size_t, std::size_t, std::span<const float>)>;

struct EngineConfig {
  std::size_t cond_capacity = 512;  // longest condition prefix a session accepts
};

namespace detail {
struct Compiled;
struct SessionState;
}  // namespace detail

class Engine;

class DecodeSession {
 public:
  DecodeSession(DecodeSession&&) noexcept;
  DecodeSession& operator=(DecodeSession&&) noexcept;
  ~DecodeSession();

  std::size_t frames_emitted() const;
  std::size_t pos_global() const;  // conditional branch
  std::size_t pos_local() const;
  std::size_t cond_length() const;
  std::size_t sampler_draws() const;
  // Conditional-branch global cache for one block.
  const KVCache& global_cache(std::size_t block) const;
  // All emitted frames so far.
  rvq::TokenFrameSeq emitted() const;
  void set_logits_tap(LogitsTap tap);

 private:
  friend class Engine;
  explicit DecodeSession(std::unique_ptr<detail::SessionState> s);
  std::unique_ptr<detail::SessionState> s_;
};

struct GenerateResult {
  std::vector<rvq::TokenFrameSeq> items;
  StepMetrics metrics;
};

// Decoder over a frozen copy of a HierLM's weights (stored as float).
class Engine {
 public:
  explicit Engine(const lm::HierLM& model, EngineConfig cfg = {});
  ~Engine();
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  const lm::LMConfig& model_config() const;
  const EngineConfig& config() const { return cfg_; }
  Counters& counters() const { return *ctr_; }

  // Runs the condition through the global stack once and fills the caches.
  // Consumes no randomness. Throws TooLong, IndexOutOfRange, DimMismatch.
  DecodeSession prefill(const lyrics::CondSequence& cond, std::uint64_t seed) const;

  // One frame: layer 0 from the global stack (guided by the unconditional
  // branch), then layers 1..K-1 from the local stack, one injected uniform per
  // token. Returns a view into the session's history. Throws SessionExhausted.
  std::span<const std::uint32_t> decode_step(DecodeSession& s, const SamplerConfig& sampler, Mode mode) const;

  // prefill + n_frames steps for each batch item; item i uses the stream
  // derive_seed(seed, i). Frames go to the sink as they complete.
  GenerateResult generate(const lyrics::CondSequence& cond, std::size_t n_frames, const SamplerConfig& sampler,
                          Mode mode, std::size_t batch, std::uint64_t seed, const StreamSink& sink = {}) const;

 private:
  EngineConfig cfg_;
  std::unique_ptr<detail::Compiled> m_;
  std::unique_ptr<Counters> ctr_;
};

}  // namespace cadenza::infer
