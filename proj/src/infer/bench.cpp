#include "cadenza/infer/bench.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "cadenza/core/error.hpp"

namespace cadenza::infer {

std::vector<BenchRow> run_bench(const Engine& engine, const lyrics::CondSequence& cond, const SamplerConfig& sampler,
                                const BenchGrid& grid) {
  if (grid.repeats == 0) throw Error(ErrorCode::BadConfig, "bench repeats must be positive");
  std::vector<BenchRow> rows;
  for (auto mode : grid.modes)
    for (auto batch : grid.batches)
      for (auto frames : grid.frames) {
        BenchRow row{mode_name(mode), batch, frames, 0.0, std::numeric_limits<double>::infinity(), 0.0, 0, 0};
        for (std::size_t r = 0; r < grid.repeats; ++r) {
          auto res = engine.generate(cond, frames, sampler, mode, batch, grid.seed);
          row.avg_s += res.metrics.wall_time / static_cast<double>(grid.repeats);
          row.min_s = std::min(row.min_s, res.metrics.wall_time);
          row.max_s = std::max(row.max_s, res.metrics.wall_time);
          row.dispatch_count = res.metrics.dispatch_count;
          row.alloc_count = res.metrics.steady_alloc_count;
        }
        rows.push_back(row);
      }
  return rows;
}

std::vector<BenchRow> bench_report(std::vector<BenchRow> rows) {
  if (rows.empty()) throw Error(ErrorCode::EmptyBatch, "no bench rows");
  std::stable_sort(rows.begin(), rows.end(), [](const BenchRow& a, const BenchRow& b) { return a.avg_s > b.avg_s; });
  return rows;
}

std::string to_json_lines(std::span<const BenchRow> rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::json j{{"mode", r.mode},   {"batch", r.batch}, {"frames", r.frames},
                     {"avg_s", r.avg_s}, {"min_s", r.min_s}, {"max_s", r.max_s},
                     {"dispatch_count", r.dispatch_count}, {"alloc_count", r.alloc_count}};
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<BenchRow> parse_json_lines(const std::string& text) {
  std::vector<BenchRow> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      BenchRow r;
      r.mode = j.at("mode").get<std::string>();
      r.batch = j.at("batch").get<std::size_t>();
      r.frames = j.at("frames").get<std::size_t>();
      r.avg_s = j.at("avg_s").get<double>();
      r.min_s = j.at("min_s").get<double>();
      r.max_s = j.at("max_s").get<double>();
      r.dispatch_count = j.at("dispatch_count").get<std::uint64_t>();
      r.alloc_count = j.at("alloc_count").get<std::uint64_t>();
      if (j.size() != 8) throw Error(ErrorCode::BadConfig, "unexpected bench fields");
      rows.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::BadConfig, std::string("bad bench row: ") + e.what());
    }
  }
  return rows;
}

}  // namespace cadenza::infer
