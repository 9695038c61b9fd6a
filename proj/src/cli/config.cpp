#include "cadenza/cli/config.hpp"

#include <cstdlib>
#include <set>
#include <type_traits>

#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"
#include "cadenza/dpo/dpo.hpp"
#include "cadenza/infer/engine.hpp"
#include "cadenza/infer/sampler.hpp"

namespace cadenza::cli {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& msg) { throw Error(ErrorCode::BadConfig, msg); }

template <class T>
struct is_vector : std::false_type {};
template <class T>
struct is_vector<std::vector<T>> : std::true_type {};

template <class T>
void read_value(const json& v, T& out, const std::string& where) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) bad(where + " must be a boolean");
    out = v.get<bool>();
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
      bad(where + " must be a non-negative integer");
    out = v.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) bad(where + " must be a number");
    out = v.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) bad(where + " must be a string");
    out = v.get<std::string>();
  } else if constexpr (is_vector<T>::value) {
    if (!v.is_array()) bad(where + " must be an array");
    T items;
    for (std::size_t i = 0; i < v.size(); ++i) {
      typename T::value_type x{};
      read_value(v[i], x, where + "[" + std::to_string(i) + "]");
      items.push_back(std::move(x));
    }
    out = std::move(items);
  } else {
    static_assert(sizeof(T) == 0, "unsupported config field type");
  }
}

template <class S>
void read_section(const json& j, S& s, const std::string& name) {
  if (!j.is_object()) bad("section " + name + " must be an object");
  std::set<std::string> known;
  S::fields(s, [&](const char* key, auto& field) {
    known.insert(key);
    if (auto it = j.find(key); it != j.end()) read_value(*it, field, name + "." + key);
  });
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) bad("unknown key " + name + "." + key);
}

template <class S>
json write_section(const S& s) {
  json j = json::object();
  S::fields(s, [&](const char* key, const auto& field) { j[key] = field; });
  return j;
}

template <class F>
void for_each_section(ProjectConfig& c, F&& f) {
  f("rvq", c.rvq);
  f("flow", c.flow);
  f("lm", c.lm);
  f("dpo", c.dpo);
  f("infer", c.infer);
  f("clap", c.clap);
  f("paths", c.paths);
}

void positive(std::size_t v, const char* name) {
  if (v == 0) bad(std::string(name) + " must be positive");
}

}  // namespace

ProjectConfig ProjectConfig::from_json(const json& j) {
  if (!j.is_object()) bad("config must be a JSON object");
  ProjectConfig c;
  std::set<std::string> known{"seed"};
  if (auto it = j.find("seed"); it != j.end()) read_value(*it, c.seed, "seed");
  for_each_section(c, [&](const char* name, auto& sec) {
    known.insert(name);
    if (auto it = j.find(name); it != j.end()) read_section(*it, sec, name);
  });
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) bad("unknown section " + key);
  c.validate();
  return c;
}

json ProjectConfig::to_json() const {
  json j = json::object();
  j["seed"] = seed;
  auto& self = const_cast<ProjectConfig&>(*this);
  for_each_section(self, [&](const char* name, const auto& sec) { j[name] = write_section(sec); });
  return j;
}

void ProjectConfig::validate() const {
  positive(rvq.num_books, "rvq.num_books");
  if (rvq.num_books < 2) bad("rvq.num_books must be at least 2");
  if (rvq.vocab < 2) bad("rvq.vocab must be at least 2");
  positive(rvq.feature_dim, "rvq.feature_dim");
  positive(rvq.mixer_heads, "rvq.mixer_heads");
  if (rvq.feature_dim % rvq.mixer_heads != 0) bad("rvq.feature_dim must divide into rvq.mixer_heads");
  positive(rvq.corpus_clips, "rvq.corpus_clips");
  if (rvq.compressor_crop < 2) bad("rvq.compressor_crop must be at least 2");
  if (!(rvq.clip_seconds > 0.0) || !(rvq.sample_rate > 0.0)) bad("rvq clip length and sample rate must be positive");
  positive(flow.latent_dim, "flow.latent_dim");
  positive(flow.sample_steps, "flow.sample_steps");
  positive(flow.batch, "flow.batch");
  positive(lm.batch, "lm.batch");
  positive(lm.corpus_size, "lm.corpus_size");
  if (lm.drop_ref_prob < 0.0 || lm.drop_ref_prob > 1.0) bad("lm.drop_ref_prob must lie in [0, 1]");
  lm::LMConfig{rvq.num_books, rvq.vocab, lm.d_global, lm.d_local, lm.global_blocks, lm.local_blocks,
               lm.global_heads, lm.local_heads, lm.max_frames, lyrics::tok::kVocabSize, lm.ref_dim}
      .validate();
  dpo::DPOConfig{dpo.beta}.validate();
  dpo::parse_criterion(dpo.criterion);
  if (dpo.candidates < 2) bad("dpo.candidates must be at least 2");
  positive(dpo.prompts, "dpo.prompts");
  positive(dpo.frames, "dpo.frames");
  infer::SamplerConfig{infer.temperature, infer.top_k, infer.cfg_scale, infer.cfg_local}.validate();
  infer::parse_mode(infer.mode);
  for (const auto& m : infer.bench_modes) infer::parse_mode(m);
  positive(infer.batch, "infer.batch");
  positive(infer.frames, "infer.frames");
  positive(infer.bench_repeats, "infer.bench_repeats");
  for (auto b : infer.bench_batches) positive(b, "infer.bench_batches entries");
  for (auto f : infer.bench_frames) positive(f, "infer.bench_frames entries");
  positive(clap.batch, "clap.batch");
  positive(clap.pairs, "clap.pairs");
  positive(clap.frames, "clap.frames");
  if (!(clap.tau_init > 0.0)) bad("clap.tau_init must be positive");
}

void ProjectConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) bad("override must look like section.key=value: " + std::string(assignment));
  const std::string path(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json j = to_json();
  const auto dot = path.find('.');
  if (dot == std::string::npos) {
    if (!j.contains(path) || j[path].is_object()) bad("unknown config key " + path);
    j[path] = value;
  } else {
    const std::string sec = path.substr(0, dot), key = path.substr(dot + 1);
    if (!j.contains(sec) || !j[sec].is_object()) bad("unknown section " + sec);
    if (!j[sec].contains(key)) bad("unknown key " + path);
    j[sec][key] = value;
  }
  *this = from_json(j);
}

std::string ProjectConfig::hash() const { return content_hash(canonical()); }

ProjectConfig load_config(const std::string& path) {
  const std::string text = read_text_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) bad("config " + path + " is not valid JSON");
  return ProjectConfig::from_json(j);
}

std::string cache_dir(const ProjectConfig& cfg) {
  if (const char* env = std::getenv(kCacheEnv); env && *env) return env;
  return cfg.paths.cache_dir;
}

}  // namespace cadenza::cli
