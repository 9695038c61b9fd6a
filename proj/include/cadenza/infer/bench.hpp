#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cadenza/infer/engine.hpp"

namespace cadenza::infer {

// One latency row: end-to-end seconds per generate() call over the repeats.
struct BenchRow {
  std::string mode;
  std::size_t batch = 1;
  std::size_t frames = 0;
  double avg_s = 0.0, min_s = 0.0, max_s = 0.0;
  std::uint64_t dispatch_count = 0;  // per run
  std::uint64_t alloc_count = 0;     // steady-state buffers per run
  friend bool operator==(const BenchRow&, const BenchRow&) = default;
};

struct BenchGrid {
  std::vector<Mode> modes{Mode::Recompute, Mode::Kv, Mode::FixedShape};
  std::vector<std::size_t> batches{1};
  std::vector<std::size_t> frames{64, 256, 512};
  std::size_t repeats = 1;
  std::uint64_t seed = 0;
};

std::vector<BenchRow> run_bench(const Engine& engine, const lyrics::CondSequence& cond, const SamplerConfig& sampler,
                                const BenchGrid& grid);

// Rows sorted by average latency, slowest first. Throws EmptyBatch.
std::vector<BenchRow> bench_report(std::vector<BenchRow> rows);

std::string to_json_lines(std::span<const BenchRow> rows);
std::vector<BenchRow> parse_json_lines(const std::string& text);  // BadConfig on malformed rows

}  // namespace cadenza::infer
