#include "cadenza/cli/manifest.hpp"

#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"

namespace cadenza::cli {

using nlohmann::json;

json RunManifest::to_json() const {
  return json{{"command", command},         {"run_id", run_id}, {"config_hash", config_hash},
              {"config", config},           {"inputs", inputs}, {"outputs", outputs},
              {"wall_clock_s", wall_clock_s}, {"tool_version", tool_version}, {"extra", extra}};
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.run_id = j.at("run_id").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config");
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    m.wall_clock_s = j.at("wall_clock_s").get<double>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.extra = j.at("extra");
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("malformed manifest: ") + e.what());
  }
}

ManifestBuilder::ManifestBuilder(std::string command, const ProjectConfig& cfg)
    : start_(std::chrono::steady_clock::now()) {
  m_.command = std::move(command);
  m_.config = cfg.to_json();
  m_.config_hash = cfg.hash();
  m_.extra["seed"] = cfg.seed;
}

void ManifestBuilder::input(const std::filesystem::path& path) {
  m_.inputs[path.string()] = content_hash(read_file(path));
}

RunManifest ManifestBuilder::finish(const std::filesystem::path& primary) {
  std::string key = m_.command + "\n" + m_.config_hash;
  for (const auto& [_, h] : m_.inputs) key += "\n" + h;
  m_.run_id = content_hash(key).substr(0, 16);
  m_.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  write_text_file(manifest_path(primary), m_.to_json().dump(2) + "\n");
  return m_;
}

std::filesystem::path manifest_path(const std::filesystem::path& primary) {
  auto p = primary;
  p += ".manifest.json";
  return p;
}

RunManifest read_manifest(const std::filesystem::path& path) {
  json j = json::parse(read_text_file(path), nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::BadConfig, "manifest " + path.string() + " is not valid JSON");
  return RunManifest::from_json(j);
}

}  // namespace cadenza::cli
