// cadenza: command-line front end over the cadenza library.
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cadenza/cli/pipeline.hpp"
#include "cadenza/core/error.hpp"

namespace {

using cadenza::ErrorCode;
namespace cli = cadenza::cli;

// 2 for problems with what the user handed us, 1 for everything else.
int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::Io:
    case ErrorCode::BadCheckpoint:
    case ErrorCode::BadConfig:
    case ErrorCode::MissingPrerequisite:
    case ErrorCode::MalformedMarker:
    case ErrorCode::ConfigMismatch:
    case ErrorCode::TooLong:
      return 2;
    default:
      return 1;
  }
}

template <class T>
void set_if(std::optional<T>& src, T& dst) {
  if (src) dst = *src;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cadenza: music token codec, language model, preference tuning and inference engine"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON project config");
  app.add_option("--set", overrides, "override a config value, e.g. --set lm.steps=20")->take_all();
  app.add_option("--seed", seed, "root seed");

  std::string input, codec, out, tokens, lm_path, lyrics_path, tags, ckpt, signal_out;
  std::string stage, init, ref, pairs;
  std::optional<std::string> mode;
  std::optional<std::size_t> frames, batch, top_k, repeats;
  std::optional<double> cfg_scale, temperature;
  std::optional<std::vector<std::string>> modes;
  std::optional<std::vector<std::size_t>> batches, bench_frames;
  bool stream = false;

  auto* tok = app.add_subcommand("tokenize", "signal file -> token file");
  tok->add_option("--input", input, "signal file")->required();
  tok->add_option("--codec", codec, "codec checkpoint")->required();
  tok->add_option("--out", out, "token file")->required();

  auto* detok = app.add_subcommand("detokenize", "token file -> signal file");
  detok->add_option("--tokens", tokens, "token file")->required();
  detok->add_option("--codec", codec, "codec checkpoint")->required();
  detok->add_option("--out", out, "signal file")->required();

  auto* train = app.add_subcommand("train", "train one stage");
  train->add_option("--stage", stage, "codec, warmup, pretrain, sft, dpo or clap")
      ->required()
      ->check(CLI::IsMember({"codec", "warmup", "pretrain", "sft", "dpo", "clap"}));
  train->add_option("--out", out, "checkpoint to write")->required();
  train->add_option("--codec", codec, "codec checkpoint (lm stages)");
  train->add_option("--init", init, "previous stage checkpoint");
  train->add_option("--ref", ref, "sft checkpoint used as the dpo reference");
  train->add_option("--pairs", pairs, "pair dataset directory from build-pairs");

  auto* gen = app.add_subcommand("generate", "sample token frames from an lm checkpoint");
  gen->add_option("--lm", lm_path, "lm checkpoint")->required();
  gen->add_option("--lyrics", lyrics_path, "lyrics text file");
  gen->add_option("--tags", tags, "tag spec, e.g. \"genre=pop;mood=happy\"");
  gen->add_option("--out", out, "token file (directory when batch > 1)")->required();
  gen->add_option("--mode", mode, "recompute, kv or fixed_shape");
  gen->add_option("--frames", frames, "frames to generate");
  gen->add_option("--batch", batch, "independent samples");
  gen->add_option("--cfg", cfg_scale, "guidance scale");
  gen->add_option("--temp", temperature, "sampling temperature");
  gen->add_option("--top-k", top_k, "top-k cutoff");
  gen->add_flag("--stream", stream, "emit frames as they are decoded");
  gen->add_option("--codec", codec, "decode the first item to a signal with this codec");
  gen->add_option("--signal-out", signal_out, "signal path (default <out>.sig)");

  auto* bench = app.add_subcommand("bench", "latency and dispatch grid over decode modes");
  bench->add_option("--lm", lm_path, "lm checkpoint")->required();
  bench->add_option("--out", out, "JSON-lines report")->required();
  bench->add_option("--modes", modes, "decode modes");
  bench->add_option("--batches", batches, "batch sizes");
  bench->add_option("--frames", bench_frames, "sequence lengths");
  bench->add_option("--repeats", repeats, "runs per cell");

  auto* ctrain = app.add_subcommand("clap-train", "train the text/music dual encoder");
  ctrain->add_option("--out", out, "checkpoint to write")->required();

  auto* ceval = app.add_subcommand("clap-eval", "retrieval metrics for a dual encoder");
  ceval->add_option("--ckpt", ckpt, "clap checkpoint")->required();
  ceval->add_option("--out", out, "JSON report")->required();

  auto* pairs_cmd = app.add_subcommand("build-pairs", "sample candidates and keep preference pairs");
  pairs_cmd->add_option("--lm", lm_path, "lm checkpoint (sft)")->required();
  pairs_cmd->add_option("--out", out, "dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    cli::ProjectConfig cfg = config_path.empty() ? cli::ProjectConfig{} : cli::load_config(config_path);
    for (const auto& o : overrides) cfg.apply_override(o);
    set_if(seed, cfg.seed);
    set_if(mode, cfg.infer.mode);
    if (*gen) {
      set_if(frames, cfg.infer.frames);
      set_if(batch, cfg.infer.batch);
      set_if(cfg_scale, cfg.infer.cfg_scale);
      set_if(temperature, cfg.infer.temperature);
      set_if(top_k, cfg.infer.top_k);
    }
    if (*bench) {
      set_if(modes, cfg.infer.bench_modes);
      set_if(batches, cfg.infer.bench_batches);
      set_if(bench_frames, cfg.infer.bench_frames);
      set_if(repeats, cfg.infer.bench_repeats);
    }
    cfg.validate();

    auto& log = std::cerr;
    cli::RunManifest m;
    if (*tok) {
      m = cli::cmd_tokenize(cfg, input, codec, out);
    } else if (*detok) {
      m = cli::cmd_detokenize(cfg, tokens, codec, out);
    } else if (*train) {
      cli::TrainArgs a;
      a.stage = cli::parse_stage(stage);
      a.out = out;
      if (!codec.empty()) a.codec = codec;
      if (!init.empty()) a.init = init;
      if (!ref.empty()) a.ref = ref;
      if (!pairs.empty()) a.pairs = pairs;
      m = cli::cmd_train(cfg, a, log);
    } else if (*gen) {
      cli::GenerateArgs a;
      a.lm = lm_path;
      if (!lyrics_path.empty()) a.lyrics = lyrics_path;
      a.tags = tags;
      a.out = out;
      a.stream = stream;
      if (!codec.empty()) a.codec = codec;
      if (!signal_out.empty()) a.signal_out = signal_out;
      m = cli::cmd_generate(cfg, a, log);
    } else if (*bench) {
      m = cli::cmd_bench(cfg, {lm_path, out}, log);
    } else if (*ctrain) {
      m = cli::cmd_clap_train(cfg, out, log);
    } else if (*ceval) {
      m = cli::cmd_clap_eval(cfg, ckpt, out, log);
    } else if (*pairs_cmd) {
      m = cli::cmd_build_pairs(cfg, {lm_path, out}, log);
    }
    std::cout << "run " << m.run_id << ":";
    for (const auto& o : m.outputs) std::cout << ' ' << o;
    std::cout << '\n';
    return 0;
  } catch (const cadenza::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
}
