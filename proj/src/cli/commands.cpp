#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include "cadenza/clap/clap.hpp"
#include "cadenza/cli/pipeline.hpp"
#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"
#include "cadenza/dpo/dpo.hpp"
#include "cadenza/infer/bench.hpp"
#include "cadenza/infer/engine.hpp"
#include "cadenza/lyrics/condition.hpp"
#include "cadenza/lyrics/lyrics.hpp"

namespace cadenza::cli {

using nlohmann::json;
using lyrics::TagCategory;

namespace {

// Stream ids under the root seed, one per consumer.
enum : std::uint64_t {
  kCodecCorpus = 0,
  kProbeClip = 5,
  kLmInit = 6,
  kLmCorpus = 10,
  kPrompts = 20,
  kCandidates = 100,
  kGenerate = 30,
  kDecode = 31,
  kClapData = 40,
  kClapInit = 41,
};

std::uint64_t stream_seed(const ProjectConfig& cfg, std::uint64_t stream) { return Rng::derive_seed(cfg.seed, stream); }

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw Error(ErrorCode::Io, std::string(what) + " not found: " + p.string());
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_metrics(const fs::path& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text_file(path, text);
}

fs::path with_suffix(const fs::path& p, const char* suffix) {
  auto q = p;
  q += suffix;
  return q;
}

Codec load_codec(const fs::path& path, ManifestBuilder& mb) {
  require_file(path, "codec checkpoint");
  mb.input(path);
  return Codec::decode(load_checkpoint(path, "codec").payload);
}

struct LoadedLM {
  std::string stage;
  lm::HierLM model;
};

LoadedLM load_lm(const fs::path& path, ManifestBuilder& mb) {
  require_file(path, "lm checkpoint");
  mb.input(path);
  auto ck = load_checkpoint(path, "lm");
  return {ck.stage, lm::decode_lm(ck.payload)};
}

void check_codec_matches(const ProjectConfig& cfg, const Codec& codec) {
  const auto& b = codec.codebooks();
  if (b.num_books() != cfg.rvq.num_books || b.vocab() != cfg.rvq.vocab)
    throw Error(ErrorCode::BadCheckpoint, "codec codebooks (" + std::to_string(b.num_books()) + " x " +
                                              std::to_string(b.vocab()) + ") do not match rvq.num_books x rvq.vocab");
}

infer::SamplerConfig sampler_config(const ProjectConfig& cfg) {
  return {cfg.infer.temperature, cfg.infer.top_k, cfg.infer.cfg_scale, cfg.infer.cfg_local};
}

json sampler_json(const infer::SamplerConfig& s) {
  return {{"cfg_scale", s.cfg_scale}, {"temperature", s.temperature}, {"top_k", s.top_k}, {"cfg_local", s.cfg_local}};
}

std::vector<std::uint8_t> blob_of(ByteReader& r) {
  const std::uint64_t n = r.u64();
  if (n > r.remaining()) throw Error(ErrorCode::BadCheckpoint, "cached corpus is truncated");
  std::vector<std::uint8_t> b(n);
  for (auto& x : b) x = r.u8();
  return b;
}

void put_blob(ByteWriter& w, const std::vector<std::uint8_t>& b) {
  w.u64(b.size());
  for (auto x : b) w.u8(x);
}

// Toy quality proxies: variety of layer-0 tokens on a 0..5 scale and absence
// of immediate repeats on a 0..10 scale.
double variety_score(const rvq::TokenFrameSeq& t) {
  if (t.frames == 0) return 0.0;
  std::set<std::uint32_t> seen;
  for (std::size_t l = 0; l < t.frames; ++l) seen.insert(t.at(l, 0));
  return 5.0 * double(seen.size()) / double(t.frames);
}

double fluency_score(const rvq::TokenFrameSeq& t) {
  if (t.frames < 2) return 10.0;
  std::size_t repeats = 0;
  for (std::size_t l = 1; l < t.frames; ++l) repeats += t.at(l, 0) == t.at(l - 1, 0);
  return 10.0 * (1.0 - double(repeats) / double(t.frames - 1));
}

std::vector<dpo::PreferencePair> sample_pairs(const ProjectConfig& cfg, const lm::HierLM& model, std::ostream& log) {
  const auto criterion = dpo::parse_criterion(cfg.dpo.criterion);
  infer::Engine engine(model, infer::EngineConfig{cfg.infer.cond_capacity});
  const auto sampler = sampler_config(cfg);
  std::vector<Mat> tables;
  for (const auto& t : model.frame_tables) tables.push_back(t.value());
  Rng rng(stream_seed(cfg, kPrompts));
  std::vector<dpo::CandidateGroup> groups;
  for (std::size_t p = 0; p < cfg.dpo.prompts; ++p) {
    auto tags = synthetic_tags(rng);
    auto doc = synthetic_lyrics(rng);
    dpo::CandidateGroup g;
    g.cond = lyrics::build_condition(tags, std::nullopt, doc, 0.0, rng);
    const auto style = dpo::style_vector(g.cond, model.config().d_global);
    auto res = engine.generate(g.cond, cfg.dpo.frames, sampler, infer::Mode::Kv, cfg.dpo.candidates,
                               stream_seed(cfg, kCandidates + p));
    for (auto& item : res.items) {
      dpo::CandidateScores s{dpo::style_similarity(item, tables, style), dpo::phoneme_error(item, g.cond),
                             variety_score(item), fluency_score(item)};
      g.candidates.push_back({std::move(item), s});
    }
    groups.push_back(std::move(g));
  }
  auto pairs = dpo::build_pairs(groups, criterion);
  log << "built " << pairs.size() << " " << dpo::criterion_name(criterion) << " pairs from " << groups.size()
      << " prompts\n";
  return pairs;
}

lyrics::CondSequence bench_condition() {
  Rng rng(0);
  return lyrics::build_condition(lyrics::parse_tag_spec("genre=pop;mood=happy"), std::nullopt,
                                 lyrics::parse_lyrics("[Verse]\nla la la under the lights\n[Chorus]\nsing it again\n"),
                                 0.0, rng);
}

}  // namespace

lm::LMConfig lm_config(const ProjectConfig& cfg) {
  lm::LMConfig c;
  c.num_books = cfg.rvq.num_books;
  c.vocab = cfg.rvq.vocab;
  c.d_global = cfg.lm.d_global;
  c.d_local = cfg.lm.d_local;
  c.global_blocks = cfg.lm.global_blocks;
  c.local_blocks = cfg.lm.local_blocks;
  c.global_heads = cfg.lm.global_heads;
  c.local_heads = cfg.lm.local_heads;
  c.max_frames = cfg.lm.max_frames;
  c.ref_dim = cfg.lm.ref_dim;
  return c;
}

lyrics::TagSet synthetic_tags(Rng& rng) {
  static const std::vector<std::string> genres{"pop", "rock", "jazz", "folk", "electronic", "hiphop"};
  static const std::vector<std::string> moods{"happy", "sad", "calm", "energetic", "romantic"};
  static const std::vector<std::string> instruments{"piano", "guitar", "drums", "strings", "synth"};
  static const std::vector<std::string> genders{"male", "female"};
  auto pick_some = [&](const std::vector<std::string>& pool, std::size_t n) {
    std::vector<std::string> out;
    while (out.size() < n) {
      const auto& t = pool[rng.index(pool.size())];
      if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
    }
    return out;
  };
  lyrics::TagSet tags;
  tags.entries[TagCategory::Gender] = pick_some(genders, 1);
  tags.entries[TagCategory::Genre] = pick_some(genres, 1);
  tags.entries[TagCategory::Mood] = pick_some(moods, 1 + rng.index(2));
  if (const auto n = rng.index(3); n > 0) tags.entries[TagCategory::Instrument] = pick_some(instruments, n);
  return tags;
}

lyrics::LyricsDoc synthetic_lyrics(Rng& rng) {
  static const std::vector<std::string> words{"light", "night", "river", "home", "fire",  "dream", "road",
                                              "heart", "rain",  "sky",   "song", "stone", "wind",  "gold"};
  auto line = [&] {
    std::string s;
    for (int w = 0; w < 3; ++w) s += (w ? " " : "") + words[rng.index(words.size())];
    return s;
  };
  lyrics::LyricsDoc doc;
  for (auto kind : {lyrics::MarkerKind::Verse, lyrics::MarkerKind::Chorus}) {
    lyrics::Section s;
    s.marker = lyrics::SectionMarker::known(kind);
    s.lines = {line(), line()};
    doc.sections.push_back(std::move(s));
  }
  return doc;
}

std::vector<lm::LMExample> build_lm_corpus(const ProjectConfig& cfg, const Codec& codec) {
  const auto codec_bytes = codec.encode();
  const json key{{"codec", content_hash(codec_bytes)}, {"rvq", cfg.to_json()["rvq"]}, {"lm", cfg.to_json()["lm"]},
                 {"seed", cfg.seed}};
  const std::string dir = cache_dir(cfg);
  const fs::path cached = dir.empty() ? fs::path{} : fs::path(dir) / ("lmcorpus-" + content_hash(key.dump()) + ".bin");
  if (!cached.empty() && fs::exists(cached)) {
    const auto bytes = read_file(cached);
    ByteReader r(bytes);
    r.expect_magic("LMCP", 1);
    std::vector<lm::LMExample> out(r.u32());
    for (auto& ex : out) {
      ex.cond = lyrics::decode_cond(blob_of(r));
      ex.frames = rvq::decode_tokens(blob_of(r));
    }
    return out;
  }

  Rng rng(stream_seed(cfg, kLmCorpus));
  std::vector<lm::LMExample> out;
  for (std::size_t i = 0; i < cfg.lm.corpus_size; ++i) {
    const auto clip = toy_clip(cfg, rng);
    auto tokens = codec.tokenize(clip);
    if (tokens.frames > cfg.lm.max_frames) {
      tokens.frames = cfg.lm.max_frames;
      tokens.indices.resize(tokens.frames * tokens.num_books);
    }
    // Reference embedding: the clip's mean low-rate feature, cut or padded to ref_dim.
    const auto low = codec.low_rate_features(clip);
    std::vector<float> ref(cfg.lm.ref_dim, 0.0f);
    for (std::size_t c = 0; c < std::min(ref.size(), low.channels()); ++c) {
      double m = 0.0;
      for (std::size_t t = 0; t < low.frames(); ++t) m += low.data(t, c);
      ref[c] = static_cast<float>(m / double(std::max<std::size_t>(1, low.frames())));
    }
    const auto tags = synthetic_tags(rng);
    const auto doc = synthetic_lyrics(rng);
    auto cond = lyrics::build_condition(tags, std::span<const float>(ref), doc, cfg.lm.drop_ref_prob, rng);
    out.push_back({std::move(cond), std::move(tokens)});
  }
  if (!cached.empty()) {
    ByteWriter w;
    w.magic("LMCP", 1);
    w.u32(static_cast<std::uint32_t>(out.size()));
    for (const auto& ex : out) {
      put_blob(w, lyrics::encode_cond(ex.cond));
      put_blob(w, rvq::encode_tokens(ex.frames));
    }
    fs::create_directories(cached.parent_path());
    write_file(cached, w.bytes());
  }
  return out;
}

std::string stage_name(TrainStage s) {
  switch (s) {
    case TrainStage::Codec: return "codec";
    case TrainStage::Warmup: return "warmup";
    case TrainStage::Pretrain: return "pretrain";
    case TrainStage::Sft: return "sft";
    case TrainStage::Dpo: return "dpo";
    case TrainStage::Clap: return "clap";
  }
  return "?";
}

TrainStage parse_stage(std::string_view name) {
  for (auto s : {TrainStage::Codec, TrainStage::Warmup, TrainStage::Pretrain, TrainStage::Sft, TrainStage::Dpo,
                 TrainStage::Clap})
    if (stage_name(s) == name) return s;
  throw Error(ErrorCode::BadConfig, "unknown training stage: " + std::string(name));
}

RunManifest cmd_tokenize(const ProjectConfig& cfg, const fs::path& input, const fs::path& codec_path,
                         const fs::path& out) {
  ManifestBuilder mb("tokenize", cfg);
  require_file(input, "input signal");
  mb.input(input);
  const auto codec = load_codec(codec_path, mb);
  const auto sig = load_signal(input);
  if (sig.sample_rate != codec.sample_rate())
    throw Error(ErrorCode::ConfigMismatch, "signal sample rate differs from the codec's");
  const auto tokens = codec.tokenize(sig.samples);
  ensure_parent(out);
  rvq::save_tokens(out, tokens);
  mb.output(out);
  mb.extra()["frames"] = tokens.frames;
  return mb.finish(out);
}

RunManifest cmd_detokenize(const ProjectConfig& cfg, const fs::path& tokens_path, const fs::path& codec_path,
                           const fs::path& out) {
  ManifestBuilder mb("detokenize", cfg);
  require_file(tokens_path, "token file");
  mb.input(tokens_path);
  const auto codec = load_codec(codec_path, mb);
  const auto tokens = rvq::load_tokens(tokens_path);
  Signal s{codec.sample_rate(),
           codec.detokenize(tokens, cfg.flow.sample_steps, cfg.flow.cfg_scale, stream_seed(cfg, kDecode))};
  ensure_parent(out);
  save_signal(out, s);
  mb.output(out);
  mb.extra()["flow_steps"] = cfg.flow.sample_steps;
  mb.extra()["flow_cfg_scale"] = cfg.flow.cfg_scale;
  return mb.finish(out);
}

namespace {

RunManifest train_codec(const ProjectConfig& cfg, const TrainArgs& args, ManifestBuilder& mb, std::ostream& log) {
  Rng rng(stream_seed(cfg, kCodecCorpus));
  std::vector<std::vector<double>> corpus;
  for (std::size_t i = 0; i < cfg.rvq.corpus_clips; ++i) corpus.push_back(toy_clip(cfg, rng));
  const auto codec = Codec::train(cfg, corpus, &log);
  save_checkpoint(args.out, {"codec", "codec", cfg.hash(), codec.encode()});
  mb.output(args.out);

  // Held-out clip and its round trip, so the codec can be checked end to end.
  Rng probe_rng(stream_seed(cfg, kProbeClip));
  Signal probe{cfg.rvq.sample_rate, toy_clip(cfg, probe_rng)};
  const auto probe_path = with_suffix(args.out, ".probe.sig");
  save_signal(probe_path, probe);
  mb.output(probe_path);
  const auto rec = codec.detokenize(codec.tokenize(probe.samples), cfg.flow.sample_steps, cfg.flow.cfg_scale,
                                    stream_seed(cfg, kDecode));
  const double err = relative_error(probe.samples, rec);
  log << "probe relative reconstruction error " << err << " (bound " << cfg.rvq.max_recon_error << ")\n";
  mb.extra()["probe_relative_error"] = err;
  return mb.finish(args.out);
}

RunManifest train_lm_stage(const ProjectConfig& cfg, const TrainArgs& args, ManifestBuilder& mb, std::ostream& log) {
  const auto name = stage_name(args.stage);
  if (!args.codec) throw Error(ErrorCode::MissingPrerequisite, name + " needs a codec checkpoint (--codec)");
  const auto codec = load_codec(*args.codec, mb);
  check_codec_matches(cfg, codec);

  Rng rng(stream_seed(cfg, kLmInit));
  lm::HierLM model(lm_config(cfg), rng);
  if (args.stage == TrainStage::Sft && !args.init)
    throw Error(ErrorCode::MissingPrerequisite, "sft needs a pretrain checkpoint (--init)");
  if (args.init) {
    auto prev = load_lm(*args.init, mb);
    const std::set<std::string> allowed = args.stage == TrainStage::Sft ? std::set<std::string>{"pretrain", "sft"}
                                          : args.stage == TrainStage::Pretrain
                                              ? std::set<std::string>{"warmup", "pretrain"}
                                              : std::set<std::string>{"warmup"};
    if (!allowed.count(prev.stage))
      throw Error(ErrorCode::MissingPrerequisite, name + " cannot start from a " + prev.stage + " checkpoint");
    if (!(prev.model.config() == model.config()))
      throw Error(ErrorCode::BadCheckpoint, "init checkpoint architecture differs from the lm config");
    model.copy_from(prev.model);
  }

  const auto data = build_lm_corpus(cfg, codec);
  lm::LMTrainConfig tc;
  tc.stage = args.stage == TrainStage::Warmup ? lm::Stage::Warmup
             : args.stage == TrainStage::Sft  ? lm::Stage::Sft
                                              : lm::Stage::Pretrain;
  tc.steps = cfg.lm.steps;
  tc.batch = cfg.lm.batch;
  tc.lr = cfg.lm.lr;
  tc.cond_drop = cfg.lm.cond_drop;
  tc.seed = stream_seed(cfg, kLmInit + 1);
  const auto w = lm::stage_weights(tc.stage, cfg.rvq.num_books);
  log << "stage " << name << ": lambda0=" << w.lambda0 << " lambdas=" << json(w.lambdas).dump() << "\n";

  std::vector<std::string> lines{json{{"stage", name}, {"lambda0", w.lambda0}, {"lambdas", w.lambdas}}.dump()};
  lm::train_lm(model, data, tc, [&](const lm::StepRecord& r) {
    lines.push_back(lm::to_json_line(r));
    if (r.step % 10 == 0 || r.step + 1 == tc.steps) log << "step " << r.step << " loss " << r.loss << "\n";
  });
  save_checkpoint(args.out, {"lm", name, cfg.hash(), lm::encode_lm(model)});
  mb.output(args.out);
  const auto metrics = with_suffix(args.out, ".metrics.jsonl");
  write_metrics(metrics, lines);
  mb.output(metrics);
  mb.extra()["lambda0"] = w.lambda0;
  mb.extra()["lambdas"] = w.lambdas;
  return mb.finish(args.out);
}

RunManifest train_dpo_stage(const ProjectConfig& cfg, const TrainArgs& args, ManifestBuilder& mb, std::ostream& log) {
  if (!args.ref) throw Error(ErrorCode::MissingPrerequisite, "dpo needs an sft checkpoint as reference (--ref)");
  auto ref = load_lm(*args.ref, mb);
  if (ref.stage != "sft")
    throw Error(ErrorCode::MissingPrerequisite, "dpo reference must be an sft checkpoint, got " + ref.stage);

  std::vector<dpo::PreferencePair> pairs;
  if (args.pairs) {
    const auto index = *args.pairs / "pairs.jsonl";
    require_file(index, "pair dataset");
    mb.input(index);
    pairs = dpo::read_pair_dataset(*args.pairs);
  } else {
    pairs = sample_pairs(cfg, ref.model, log);
  }
  if (pairs.empty()) throw Error(ErrorCode::EmptyCorpus, "no preference pairs survived the margins");

  lm::HierLM policy = ref.model.clone();
  dpo::DPOTrainConfig tc;
  tc.dpo.beta = cfg.dpo.beta;
  tc.steps = cfg.dpo.steps;
  tc.lr = cfg.dpo.lr;
  tc.batch = cfg.dpo.batch;
  tc.seed = stream_seed(cfg, kLmInit + 2);
  std::vector<std::string> lines;
  const auto steps = dpo::train_dpo(policy, ref.model, pairs, tc, [&](const dpo::DPOStep& s) {
    lines.push_back(dpo::to_json_line(s));
    if (s.step % 10 == 0 || s.step + 1 == tc.steps)
      log << "step " << s.step << " loss " << s.loss << " mean_delta " << s.mean_delta << "\n";
  });
  save_checkpoint(args.out, {"lm", "dpo", cfg.hash(), lm::encode_lm(policy)});
  mb.output(args.out);
  const auto metrics = with_suffix(args.out, ".metrics.jsonl");
  write_metrics(metrics, lines);
  mb.output(metrics);
  mb.extra()["pairs"] = pairs.size();
  if (!steps.empty()) mb.extra()["initial_loss"] = steps.front().loss;
  return mb.finish(args.out);
}

}  // namespace

RunManifest cmd_train(const ProjectConfig& cfg, const TrainArgs& args, std::ostream& log) {
  if (args.stage == TrainStage::Clap) return cmd_clap_train(cfg, args.out, log);
  ManifestBuilder mb("train " + stage_name(args.stage), cfg);
  ensure_parent(args.out);
  switch (args.stage) {
    case TrainStage::Codec: return train_codec(cfg, args, mb, log);
    case TrainStage::Dpo: return train_dpo_stage(cfg, args, mb, log);
    default: return train_lm_stage(cfg, args, mb, log);
  }
}

RunManifest cmd_generate(const ProjectConfig& cfg, const GenerateArgs& args, std::ostream& log) {
  ManifestBuilder mb("generate", cfg);
  auto loaded = load_lm(args.lm, mb);
  lyrics::LyricsDoc doc;
  if (args.lyrics) {
    require_file(*args.lyrics, "lyrics file");
    mb.input(*args.lyrics);
    doc = lyrics::parse_lyrics(read_text_file(*args.lyrics));
  }
  const auto tags = lyrics::parse_tag_spec(args.tags);
  Rng rng(stream_seed(cfg, kGenerate));
  const auto cond = lyrics::build_condition(tags, std::nullopt, doc, 0.0, rng);

  const auto sampler = sampler_config(cfg);
  const auto mode = infer::parse_mode(cfg.infer.mode);
  const std::size_t batch = cfg.infer.batch, frames = cfg.infer.frames;
  const std::size_t K = loaded.model.config().num_books;
  infer::Engine engine(loaded.model, infer::EngineConfig{cfg.infer.cond_capacity});

  std::vector<rvq::TokenFrameSeq> items;
  infer::StreamSink sink;
  if (args.stream) {
    items.assign(batch, rvq::TokenFrameSeq(frames, K));
    sink = [&](std::size_t item, std::size_t l, std::span<const std::uint32_t> frame) {
      std::copy(frame.begin(), frame.end(), items[item].indices.begin() + static_cast<std::ptrdiff_t>(l * K));
      log << "item " << item << " frame " << l << ":";
      for (auto a : frame) log << ' ' << a;
      log << '\n';
    };
  }
  auto res = engine.generate(cond, frames, sampler, mode, batch, cfg.seed, sink);
  if (!args.stream) items = std::move(res.items);

  if (batch == 1) {
    ensure_parent(args.out);
    rvq::save_tokens(args.out, items[0]);
    mb.output(args.out);
  } else {
    fs::create_directories(args.out);
    for (std::size_t i = 0; i < batch; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "item_%03zu.toks", i);
      rvq::save_tokens(args.out / name, items[i]);
      mb.output(args.out / name);
    }
  }

  if (args.codec) {
    const auto codec = load_codec(*args.codec, mb);
    const auto sig_path = args.signal_out ? *args.signal_out : with_suffix(args.out, ".sig");
    save_signal(sig_path, {codec.sample_rate(), codec.detokenize(items[0], cfg.flow.sample_steps, cfg.flow.cfg_scale,
                                                                 stream_seed(cfg, kDecode))});
    mb.output(sig_path);
  }

  mb.extra()["sampler"] = sampler_json(sampler);
  mb.extra()["mode"] = infer::mode_name(mode);
  mb.extra()["stream"] = args.stream;
  mb.extra()["frames"] = frames;
  mb.extra()["batch"] = batch;
  mb.extra()["dispatch_count"] = res.metrics.dispatch_count;
  mb.extra()["alloc_count"] = res.metrics.alloc_count;
  log << "generated " << batch << " x " << frames << " frames in " << res.metrics.wall_time << " s ("
      << infer::mode_name(mode) << ")\n";
  return mb.finish(args.out);
}

RunManifest cmd_bench(const ProjectConfig& cfg, const BenchArgs& args, std::ostream& log) {
  ManifestBuilder mb("bench", cfg);
  auto loaded = load_lm(args.lm, mb);
  infer::Engine engine(loaded.model, infer::EngineConfig{cfg.infer.cond_capacity});
  infer::BenchGrid grid;
  grid.modes.clear();
  for (const auto& m : cfg.infer.bench_modes) grid.modes.push_back(infer::parse_mode(m));
  grid.batches = cfg.infer.bench_batches;
  grid.frames = cfg.infer.bench_frames;
  grid.repeats = cfg.infer.bench_repeats;
  grid.seed = cfg.seed;
  const auto rows = infer::bench_report(infer::run_bench(engine, bench_condition(), sampler_config(cfg), grid));
  ensure_parent(args.out);
  write_text_file(args.out, infer::to_json_lines(rows));
  mb.output(args.out);
  char line[160];
  log << "mode         batch frames    avg_s     dispatch  allocs\n";
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-12s %5zu %6zu %8.4f %12llu %7llu\n", r.mode.c_str(), r.batch, r.frames, r.avg_s,
                  static_cast<unsigned long long>(r.dispatch_count), static_cast<unsigned long long>(r.alloc_count));
    log << line;
  }
  mb.extra()["rows"] = rows.size();
  mb.extra()["sampler"] = sampler_json(sampler_config(cfg));
  return mb.finish(args.out);
}

namespace {

std::vector<clap::ClapExample> clap_data(const ProjectConfig& cfg) {
  return clap::synthetic_pairs(cfg.clap.pairs, cfg.clap.frames, cfg.clap.feature_dim, stream_seed(cfg, kClapData));
}

}  // namespace

RunManifest cmd_clap_train(const ProjectConfig& cfg, const fs::path& out, std::ostream& log) {
  ManifestBuilder mb("clap-train", cfg);
  const auto data = clap_data(cfg);
  Rng rng(stream_seed(cfg, kClapInit));
  clap::DualEncoder enc({cfg.clap.feature_dim, cfg.clap.proj_dim, cfg.clap.text_buckets, cfg.clap.text_embed_dim,
                         cfg.clap.tau_init},
                        rng);
  clap::ClapTrainConfig tc;
  tc.steps = cfg.clap.steps;
  tc.batch = cfg.clap.batch;
  tc.lr = cfg.clap.lr;
  tc.masking = {cfg.clap.p_a, cfg.clap.p_t};
  tc.seed = stream_seed(cfg, kClapInit + 1);
  std::vector<std::string> lines;
  const auto steps = clap::train_clap(enc, data, tc, [&](const clap::ClapStep& s) {
    lines.push_back(json{{"step", s.step}, {"loss", s.loss}, {"tau", s.tau}}.dump());
    if (s.step % 50 == 0 || s.step + 1 == tc.steps) log << "step " << s.step << " loss " << s.loss << " tau " << s.tau << "\n";
  });
  ensure_parent(out);
  save_checkpoint(out, {"clap", "clap", cfg.hash(), clap::encode_encoder(enc)});
  mb.output(out);
  const auto metrics = with_suffix(out, ".metrics.jsonl");
  write_metrics(metrics, lines);
  mb.output(metrics);
  if (!steps.empty()) mb.extra()["final_loss"] = steps.back().loss;
  mb.extra()["tau"] = enc.tau_value();
  return mb.finish(out);
}

RunManifest cmd_clap_eval(const ProjectConfig& cfg, const fs::path& ckpt, const fs::path& out, std::ostream& log) {
  ManifestBuilder mb("clap-eval", cfg);
  require_file(ckpt, "clap checkpoint");
  mb.input(ckpt);
  const auto enc = clap::decode_encoder(load_checkpoint(ckpt, "clap").payload);
  if (enc.config().feature_dim != cfg.clap.feature_dim)
    throw Error(ErrorCode::BadCheckpoint, "clap checkpoint feature width differs from clap.feature_dim");
  const std::size_t ks[] = {1, 5, 10};
  const auto report = clap::evaluate(enc, clap_data(cfg), ks);
  ensure_parent(out);
  write_text_file(out, report.to_json() + "\n");
  mb.output(out);
  log << report.to_json() << "\n";
  return mb.finish(out);
}

RunManifest cmd_build_pairs(const ProjectConfig& cfg, const BuildPairsArgs& args, std::ostream& log) {
  ManifestBuilder mb("build-pairs", cfg);
  auto loaded = load_lm(args.lm, mb);
  const auto pairs = sample_pairs(cfg, loaded.model, log);
  const auto index = dpo::write_pair_dataset(args.out_dir, pairs, dpo::parse_criterion(cfg.dpo.criterion));
  mb.output(index);
  mb.extra()["pairs"] = pairs.size();
  mb.extra()["criterion"] = cfg.dpo.criterion;
  return mb.finish(index);
}

}  // namespace cadenza::cli
