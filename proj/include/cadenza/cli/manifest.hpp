#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cadenza/cli/config.hpp"

namespace cadenza::cli {

inline constexpr const char* kToolVersion = "0.1.0";

struct RunManifest {
  std::string command;
  std::string run_id;  // hash of command, config hash and input hashes
  std::string config_hash;
  nlohmann::json config;                       // resolved config
  std::map<std::string, std::string> inputs;   // path -> content hash
  std::vector<std::string> outputs;
  double wall_clock_s = 0.0;
  std::string tool_version = kToolVersion;
  nlohmann::json extra = nlohmann::json::object();  // command-specific facts (seed, sampler, ...)

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

// Accumulates a manifest while a command runs.
class ManifestBuilder {
 public:
  ManifestBuilder(std::string command, const ProjectConfig& cfg);
  void input(const std::filesystem::path& path);  // hashes the file contents
  void output(const std::filesystem::path& path) { m_.outputs.push_back(path.string()); }
  nlohmann::json& extra() { return m_.extra; }
  // Fills the run id and wall clock, writes <primary>.manifest.json and returns the manifest.
  RunManifest finish(const std::filesystem::path& primary);

 private:
  RunManifest m_;
  std::chrono::steady_clock::time_point start_;
};

std::filesystem::path manifest_path(const std::filesystem::path& primary);
RunManifest read_manifest(const std::filesystem::path& path);

}  // namespace cadenza::cli
