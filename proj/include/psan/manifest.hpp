#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "psan/common.hpp"
#include "psan/scenario.hpp"

namespace psan {

// Every output directory holds exactly one manifest. The manifest pins the
// full config (all hyperparameters), the master seed, the artifacts the stage
// wrote, and the hash chain that ties stages of one run together. A manifest
// is enough to reproduce its stage byte for byte, so nothing time- or
// host-dependent belongs in here.
struct RunManifest {
  std::string stage;         // gen-data | train | transfer | eval
  std::string tool_version = kToolVersion;
  ScenarioConfig config;
  std::string config_hash;           // hash of this stage's canonical config
  std::string data_config_hash;      // upstream gen-data hash ("" for gen-data itself)
  std::vector<std::string> artifacts;
  nlohmann::json extra;              // stage specific (mode, resolved sigma, label reads, ...)
};

inline RunManifest make_manifest(const std::string& stage, const ScenarioConfig& cfg,
                                 const std::string& data_config_hash = "") {
  RunManifest m;
  m.stage = stage;
  m.config = cfg;
  m.config_hash = config_hash(cfg);
  m.data_config_hash = data_config_hash;
  return m;
}

inline void write_manifest(const RunManifest& m, const std::string& dir) {
  nlohmann::json j;
  j["stage"] = m.stage;
  j["tool_version"] = m.tool_version;
  j["config"] = config_to_json(m.config);
  j["config_hash"] = m.config_hash;
  if (!m.data_config_hash.empty()) j["data_config_hash"] = m.data_config_hash;
  j["artifacts"] = m.artifacts;
  if (!m.extra.is_null()) j["extra"] = m.extra;
  const auto path = std::filesystem::path(dir) / "manifest.json";
  std::ofstream os(path);
  require(os.good(), "write_manifest: cannot open " + path.string());
  os << j.dump(2) << '\n';
  require(os.good(), "write_manifest: write failed for " + path.string());
}

inline RunManifest read_manifest(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / "manifest.json";
  std::ifstream is(path);
  require(is.good(), "read_manifest: no manifest at " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("read_manifest: " + path.string() + ": " + e.what());
  }
  RunManifest m;
  m.stage = j.at("stage").get<std::string>();
  m.tool_version = j.at("tool_version").get<std::string>();
  require(m.tool_version == kToolVersion,
          "read_manifest: " + path.string() + " was written by tool version " + m.tool_version +
              "; this binary is " + kToolVersion);
  m.config = config_from_json(j.at("config"));
  m.config_hash = j.at("config_hash").get<std::string>();
  require(m.config_hash == config_hash(m.config),
          "read_manifest: config hash mismatch in " + path.string() + " (file was edited?)");
  if (j.contains("data_config_hash")) {
    m.data_config_hash = j.at("data_config_hash").get<std::string>();
  }
  if (j.contains("artifacts")) m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  if (j.contains("extra")) m.extra = j.at("extra");
  return m;
}

// Guards against mixing artifacts generated from different configs/seeds.
inline void require_same_run(const RunManifest& downstream, const RunManifest& gen,
                             const std::string& what) {
  const std::string& link =
      downstream.stage == "gen-data" ? downstream.config_hash : downstream.data_config_hash;
  require(link == gen.config_hash,
          what + ": manifest mismatch (" + downstream.stage + " was produced from data " + link +
              ", but the given data directory is " + gen.config_hash + ")");
}

// canonical artifact names
inline std::string source_model_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "source_%02d.model", k);
  return buf;
}

inline std::string local_model_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "local_%02d.model", k);
  return buf;
}

inline std::string target_model_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "target_%02d.model", k);
  return buf;
}

}  // namespace psan
