#include <doctest.h>

#include <filesystem>

#include "cadenza/cli/config.hpp"
#include "cadenza/cli/manifest.hpp"
#include "cadenza/cli/pipeline.hpp"
#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"

using namespace cadenza;
using namespace cadenza::cli;
using nlohmann::json;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::Io;
}

fs::path scratch(const char* name) {
  auto dir = fs::temp_directory_path() / "cadenza_cli_unit";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("config defaults survive a JSON round trip") {
  ProjectConfig c;
  auto back = ProjectConfig::from_json(c.to_json());
  CHECK(back.canonical() == c.canonical());
  CHECK(back.hash() == c.hash());
  CHECK(c.infer.cfg_scale == 1.5);
  CHECK(c.infer.temperature == 1.0);
  CHECK(c.infer.top_k == 50);
}

TEST_CASE("partial configs fill in defaults") {
  auto c = ProjectConfig::from_json(json::parse(R"({"seed": 9, "lm": {"steps": 3}})"));
  CHECK(c.seed == 9);
  CHECK(c.lm.steps == 3);
  CHECK(c.lm.batch == ProjectConfig{}.lm.batch);
}

TEST_CASE("unknown keys, unknown sections and wrong types are rejected") {
  CHECK(code_of([] { ProjectConfig::from_json(json::parse(R"({"lm": {"stepz": 3}})")); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { ProjectConfig::from_json(json::parse(R"({"vocoder": {}})")); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { ProjectConfig::from_json(json::parse(R"({"lm": {"steps": "many"}})")); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { ProjectConfig::from_json(json::parse(R"({"lm": {"steps": -1}})")); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { ProjectConfig::from_json(json::parse(R"({"infer": {"mode": "turbo"}})")); }) ==
        ErrorCode::BadConfig);
  CHECK(code_of([] { ProjectConfig::from_json(json::parse(R"({"dpo": {"beta": 0}})")); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { ProjectConfig::from_json(json::parse("[1, 2]")); }) == ErrorCode::BadConfig);
}

TEST_CASE("overrides parse JSON values and change the hash") {
  ProjectConfig c;
  const auto h0 = c.hash();
  c.apply_override("lm.lr=0.01");
  c.apply_override("infer.mode=fixed_shape");
  c.apply_override("infer.bench_frames=[8,16]");
  c.apply_override("seed=4");
  CHECK(c.lm.lr == 0.01);
  CHECK(c.infer.mode == "fixed_shape");
  CHECK(c.infer.bench_frames == std::vector<std::size_t>{8, 16});
  CHECK(c.seed == 4);
  CHECK(c.hash() != h0);
  CHECK(code_of([&] { c.apply_override("lm.nope=1"); }) == ErrorCode::BadConfig);
  CHECK(code_of([&] { c.apply_override("lm.steps"); }) == ErrorCode::BadConfig);
  CHECK(code_of([&] { c.apply_override("lm=1"); }) == ErrorCode::BadConfig);
}

TEST_CASE("config files load and unreadable paths raise Io") {
  const auto p = scratch("cfg.json");
  write_text_file(p, R"({"clap": {"steps": 5}})");
  CHECK(load_config(p.string()).clap.steps == 5);
  write_text_file(p, "{ not json");
  CHECK(code_of([&] { load_config(p.string()); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { load_config("/nonexistent/cadenza.json"); }) == ErrorCode::Io);
}

TEST_CASE("manifest run ids follow config and inputs") {
  const auto in = scratch("input.bin");
  const auto out = scratch("output.bin");
  write_text_file(in, "abc");
  write_text_file(out, "result");
  ProjectConfig c;
  auto run = [&](const ProjectConfig& cfg) {
    ManifestBuilder mb("unit", cfg);
    mb.input(in);
    mb.output(out);
    return mb.finish(out);
  };
  auto a = run(c), b = run(c);
  CHECK(a.run_id == b.run_id);
  CHECK(a.inputs.at(in.string()) == content_hash(std::string_view("abc")));
  CHECK(a.config == c.to_json());
  c.seed = 1;
  CHECK(run(c).run_id != a.run_id);
  write_text_file(in, "abd");
  c.seed = 0;
  CHECK(run(c).run_id != a.run_id);

  const auto m = read_manifest(manifest_path(out));
  CHECK(m.outputs == std::vector<std::string>{out.string()});
  CHECK(m.tool_version == kToolVersion);
  CHECK(m.extra.at("seed") == 0);
}

TEST_CASE("signal files round-trip at float precision") {
  Signal s{800.0, {0.0, 0.5, -1.25, 3.0}};
  const auto p = scratch("s.sig");
  save_signal(p, s);
  auto back = load_signal(p);
  CHECK(back.sample_rate == 800.0);
  CHECK(back.samples == s.samples);
}

TEST_CASE("checkpoint containers check their kind and length") {
  const auto p = scratch("c.ckpt");
  save_checkpoint(p, {"lm", "sft", "abc", {1, 2, 3}});
  auto c = load_checkpoint(p, "lm");
  CHECK(c.stage == "sft");
  CHECK(c.payload == std::vector<std::uint8_t>{1, 2, 3});
  CHECK(code_of([&] { load_checkpoint(p, "codec"); }) == ErrorCode::BadCheckpoint);
  auto bytes = read_file(p);
  bytes.pop_back();
  write_file(p, bytes);
  CHECK(code_of([&] { load_checkpoint(p, "lm"); }) == ErrorCode::BadCheckpoint);
  write_text_file(p, "XXXX");
  CHECK_THROWS_AS(load_checkpoint(p, "lm"), Error);
}

TEST_CASE("relative error is zero for a copy and one for the mean") {
  std::vector<double> x{1.0, 3.0, 5.0, 7.0};
  CHECK(relative_error(x, x) == 0.0);
  std::vector<double> mean(4, 4.0);
  CHECK(relative_error(x, mean) == doctest::Approx(1.0));
}

TEST_CASE("stage names parse back") {
  for (auto s : {TrainStage::Codec, TrainStage::Warmup, TrainStage::Pretrain, TrainStage::Sft, TrainStage::Dpo,
                 TrainStage::Clap})
    CHECK(parse_stage(stage_name(s)) == s);
  CHECK(code_of([] { parse_stage("finetune"); }) == ErrorCode::BadConfig);
}

TEST_CASE("synthetic prompts are seed deterministic") {
  Rng a(3), b(3);
  CHECK(synthetic_tags(a) == synthetic_tags(b));
  CHECK(synthetic_lyrics(a) == synthetic_lyrics(b));
  Rng c(3);
  auto t = synthetic_tags(c);
  CHECK(t.entries.at(lyrics::TagCategory::Genre).size() == 1);
  CHECK(t.entries.at(lyrics::TagCategory::Gender).size() == 1);
}
