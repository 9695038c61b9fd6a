#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace cadenza::cli {

// Each section lists its fields once through fields(); reading, writing and
// unknown-key rejection all go through that list.

struct RvqSection {
  std::size_t num_books = 8;
  std::size_t vocab = 256;
  std::size_t kmeans_iters = 25;
  std::size_t feature_dim = 64;
  std::size_t mixer_blocks = 2;
  std::size_t mixer_heads = 2;
  std::size_t compressor_steps = 1500;
  std::size_t compressor_crop = 32;  // frames per compressor training step
  double compressor_lr = 3e-3;
  std::size_t corpus_clips = 16;
  double clip_seconds = 4.0;
  double sample_rate = 800.0;
  double max_recon_error = 0.5;  // relative MSE bound checked by the round-trip test

  template <class S, class F>
  static void fields(S& s, F&& f) {
    f("num_books", s.num_books);
    f("vocab", s.vocab);
    f("kmeans_iters", s.kmeans_iters);
    f("feature_dim", s.feature_dim);
    f("mixer_blocks", s.mixer_blocks);
    f("mixer_heads", s.mixer_heads);
    f("compressor_steps", s.compressor_steps);
    f("compressor_crop", s.compressor_crop);
    f("compressor_lr", s.compressor_lr);
    f("corpus_clips", s.corpus_clips);
    f("clip_seconds", s.clip_seconds);
    f("sample_rate", s.sample_rate);
    f("max_recon_error", s.max_recon_error);
  }
};

struct FlowSection {
  std::size_t latent_dim = 16;
  std::size_t hidden = 128;
  std::size_t blocks = 3;
  std::size_t train_steps = 600;
  std::size_t batch = 8;
  std::size_t segment = 20;  // latent frames per training example
  double lr = 1e-3;
  double cond_drop = 0.1;
  bool random_masks = true;
  std::size_t sample_steps = 10;
  double cfg_scale = 1.25;

  template <class S, class F>
  static void fields(S& s, F&& f) {
    f("latent_dim", s.latent_dim);
    f("hidden", s.hidden);
    f("blocks", s.blocks);
    f("train_steps", s.train_steps);
    f("batch", s.batch);
    f("segment", s.segment);
    f("lr", s.lr);
    f("cond_drop", s.cond_drop);
    f("random_masks", s.random_masks);
    f("sample_steps", s.sample_steps);
    f("cfg_scale", s.cfg_scale);
  }
};

struct LmSection {
  std::size_t d_global = 128;
  std::size_t d_local = 64;
  std::size_t global_blocks = 4;
  std::size_t local_blocks = 2;
  std::size_t global_heads = 4;
  std::size_t local_heads = 4;
  std::size_t max_frames = 1024;
  std::size_t ref_dim = 32;
  std::size_t steps = 100;
  std::size_t batch = 4;
  double lr = 2e-4;
  double cond_drop = 0.02;
  double drop_ref_prob = 0.5;
  std::size_t corpus_size = 16;

  template <class S, class F>
  static void fields(S& s, F&& f) {
    f("d_global", s.d_global);
    f("d_local", s.d_local);
    f("global_blocks", s.global_blocks);
    f("local_blocks", s.local_blocks);
    f("global_heads", s.global_heads);
    f("local_heads", s.local_heads);
    f("max_frames", s.max_frames);
    f("ref_dim", s.ref_dim);
    f("steps", s.steps);
    f("batch", s.batch);
    f("lr", s.lr);
    f("cond_drop", s.cond_drop);
    f("drop_ref_prob", s.drop_ref_prob);
    f("corpus_size", s.corpus_size);
  }
};

struct DpoSection {
  double beta = 0.1;
  std::size_t steps = 50;
  double lr = 1e-3;
  std::size_t batch = 0;
  std::size_t prompts = 8;
  std::size_t candidates = 8;
  std::size_t frames = 64;
  std::string criterion = "per";

  template <class S, class F>
  static void fields(S& s, F&& f) {
    f("beta", s.beta);
    f("steps", s.steps);
    f("lr", s.lr);
    f("batch", s.batch);
    f("prompts", s.prompts);
    f("candidates", s.candidates);
    f("frames", s.frames);
    f("criterion", s.criterion);
  }
};

struct InferSection {
  double cfg_scale = 1.5;
  double temperature = 1.0;
  std::size_t top_k = 50;
  bool cfg_local = false;
  std::size_t cond_capacity = 512;
  std::size_t frames = 64;
  std::size_t batch = 1;
  std::string mode = "kv";
  std::vector<std::string> bench_modes{"recompute", "kv", "fixed_shape"};
  std::vector<std::size_t> bench_batches{1};
  std::vector<std::size_t> bench_frames{64, 256, 512};
  std::size_t bench_repeats = 1;

  template <class S, class F>
  static void fields(S& s, F&& f) {
    f("cfg_scale", s.cfg_scale);
    f("temperature", s.temperature);
    f("top_k", s.top_k);
    f("cfg_local", s.cfg_local);
    f("cond_capacity", s.cond_capacity);
    f("frames", s.frames);
    f("batch", s.batch);
    f("mode", s.mode);
    f("bench_modes", s.bench_modes);
    f("bench_batches", s.bench_batches);
    f("bench_frames", s.bench_frames);
    f("bench_repeats", s.bench_repeats);
  }
};

struct ClapSection {
  std::size_t feature_dim = 32;
  std::size_t proj_dim = 32;
  std::size_t text_buckets = 1024;
  std::size_t text_embed_dim = 64;
  double tau_init = 0.07;
  std::size_t steps = 200;
  std::size_t batch = 32;
  double lr = 1e-2;
  double p_a = 0.1;
  double p_t = 0.1;
  std::size_t pairs = 64;
  std::size_t frames = 16;

  template <class S, class F>
  static void fields(S& s, F&& f) {
    f("feature_dim", s.feature_dim);
    f("proj_dim", s.proj_dim);
    f("text_buckets", s.text_buckets);
    f("text_embed_dim", s.text_embed_dim);
    f("tau_init", s.tau_init);
    f("steps", s.steps);
    f("batch", s.batch);
    f("lr", s.lr);
    f("p_a", s.p_a);
    f("p_t", s.p_t);
    f("pairs", s.pairs);
    f("frames", s.frames);
  }
};

struct PathsSection {
  std::string cache_dir;  // empty disables caching; CADENZA_CACHE_DIR wins when set

  template <class S, class F>
  static void fields(S& s, F&& f) {
    f("cache_dir", s.cache_dir);
  }
};

struct ProjectConfig {
  std::uint64_t seed = 0;
  RvqSection rvq;
  FlowSection flow;
  LmSection lm;
  DpoSection dpo;
  InferSection infer;
  ClapSection clap;
  PathsSection paths;

  // BadConfig on unknown sections or keys, wrong value types, or values the
  // modules reject.
  static ProjectConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;

  // "section.key=value"; the value is parsed as JSON and falls back to a string.
  void apply_override(std::string_view assignment);

  std::string canonical() const { return to_json().dump(); }
  std::string hash() const;
};

ProjectConfig load_config(const std::string& path);  // Io when unreadable, BadConfig when malformed

// Cache directory from the environment or the config; empty when caching is off.
std::string cache_dir(const ProjectConfig& cfg);
inline constexpr const char* kCacheEnv = "CADENZA_CACHE_DIR";

}  // namespace cadenza::cli
