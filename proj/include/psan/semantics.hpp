#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "psan/common.hpp"

namespace psan {

// One propagation path. Static paths (direct path, wall reflections) carry
// dfs_hz == 0; dynamic paths (reflections off the moving user) carry the
// Doppler shift of the reference gesture pose.
struct PathComponent {
  double attenuation = 0.0;   // dimensionless amplitude, >= 0
  double delay_s = 0.0;       // propagation delay of the reference path
  double aoa_rad = 0.0;       // angle of arrival, [0, 2*pi)
  double dfs_hz = 0.0;        // Doppler shift; exactly 0 for static paths
};

// Min-max normalization ranges for embedding coordinates. Angles are always
// normalized by [0, 2*pi).
struct PhysicalRanges {
  double attenuation_min = 0.0;
  double attenuation_max = 1.0;
  double delay_min_s = 0.0;
  double delay_max_s = 100e-9;
  double dfs_min_hz = -60.0;
  double dfs_max_hz = 60.0;
};

struct SemanticProfile {
  int receiver_id = 0;
  bool is_source = false;
  std::vector<PathComponent> static_paths;   // environment layout
  std::vector<PathComponent> dynamic_paths;  // user movement
  std::vector<double> embedding;             // fixed length p, filled by embed()
};

enum class DistanceMetric { cosine, euclidean };

inline std::string to_string(DistanceMetric m) {
  return m == DistanceMetric::cosine ? "cosine" : "euclidean";
}

inline DistanceMetric metric_from_string(const std::string& s) {
  if (s == "cosine") return DistanceMetric::cosine;
  if (s == "euclidean") return DistanceMetric::euclidean;
  throw ValidationError("metric: expected \"cosine\" or \"euclidean\", got \"" + s + "\"");
}

namespace detail {

inline void validate_path(const PathComponent& p, const std::string& where) {
  require(std::isfinite(p.attenuation) && std::isfinite(p.delay_s) &&
              std::isfinite(p.aoa_rad) && std::isfinite(p.dfs_hz),
          where + ": non-finite path field");
  require(p.attenuation >= 0.0, where + ": attenuation must be >= 0");
  require(p.delay_s >= 0.0, where + ": delay must be >= 0");
  require(p.aoa_rad >= 0.0 && p.aoa_rad < 2.0 * std::numbers::pi,
          where + ": aoa must lie in [0, 2*pi)");
}

// Canonical path order: attenuation descending, then delay, aoa, dfs ascending.
// Makes the embedding invariant to the order paths were listed in.
inline std::vector<PathComponent> sorted_paths(std::vector<PathComponent> paths) {
  std::sort(paths.begin(), paths.end(), [](const PathComponent& a, const PathComponent& b) {
    if (a.attenuation != b.attenuation) return a.attenuation > b.attenuation;
    if (a.delay_s != b.delay_s) return a.delay_s < b.delay_s;
    if (a.aoa_rad != b.aoa_rad) return a.aoa_rad < b.aoa_rad;
    return a.dfs_hz < b.dfs_hz;
  });
  return paths;
}

inline void append_path_block(std::vector<double>& out, const std::vector<PathComponent>& paths,
                              int max_paths, const PhysicalRanges& r, const std::string& where) {
  auto canon = sorted_paths(paths);
  const double two_pi = 2.0 * std::numbers::pi;
  for (const auto& p : canon) {
    validate_path(p, where);
    out.push_back((p.attenuation - r.attenuation_min) / (r.attenuation_max - r.attenuation_min));
    out.push_back((p.delay_s - r.delay_min_s) / (r.delay_max_s - r.delay_min_s));
    out.push_back(p.aoa_rad / two_pi);
    out.push_back((p.dfs_hz - r.dfs_min_hz) / (r.dfs_max_hz - r.dfs_min_hz));
  }
  for (std::size_t i = canon.size(); i < static_cast<std::size_t>(max_paths); ++i) {
    out.insert(out.end(), {0.0, 0.0, 0.0, 0.0});
  }
}

}  // namespace detail

// Fixed-slot embedding: static block then dynamic block, each with max_paths
// slots of 4 normalized coordinates (attenuation, delay, aoa, dfs), paths
// sorted by descending attenuation and unused slots zero. p must equal
// 8 * max_paths.
inline std::vector<double> embed(const SemanticProfile& profile, int p, int max_paths,
                                 const PhysicalRanges& ranges = {}) {
  require(p > 0 && max_paths > 0, "embed: p and max_paths must be positive");
  require(p == 8 * max_paths, "embed: p must equal 8 * max_paths (got p=" + std::to_string(p) +
                                  ", max_paths=" + std::to_string(max_paths) + ")");
  require(profile.static_paths.size() <= static_cast<std::size_t>(max_paths),
          "embed: receiver " + std::to_string(profile.receiver_id) + " has " +
              std::to_string(profile.static_paths.size()) + " static paths, max is " +
              std::to_string(max_paths));
  require(profile.dynamic_paths.size() <= static_cast<std::size_t>(max_paths),
          "embed: receiver " + std::to_string(profile.receiver_id) + " has " +
              std::to_string(profile.dynamic_paths.size()) + " dynamic paths, max is " +
              std::to_string(max_paths));
  require(ranges.attenuation_max > ranges.attenuation_min &&
              ranges.delay_max_s > ranges.delay_min_s && ranges.dfs_max_hz > ranges.dfs_min_hz,
          "embed: degenerate normalization range");

  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(p));
  const std::string where = "embed(receiver " + std::to_string(profile.receiver_id) + ")";
  detail::append_path_block(out, profile.static_paths, max_paths, ranges, where);
  detail::append_path_block(out, profile.dynamic_paths, max_paths, ranges, where);
  return out;
}

// Cosine returns similarity in [-1, 1] (1 = identical direction); euclidean
// returns the norm of the difference. Both are exactly symmetric.
inline double semantic_distance(std::span<const double> a, std::span<const double> b,
                                DistanceMetric metric) {
  require(a.size() == b.size(), "semantic_distance: dimension mismatch (" +
                                    std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                                    ")");
  require(all_finite(a) && all_finite(b), "semantic_distance: non-finite input");
  if (metric == DistanceMetric::euclidean) {
    return std::sqrt(squared_distance(a, b));
  }
  const double na = norm2(a);
  const double nb = norm2(b);
  require(na > 0.0 && nb > 0.0, "semantic_distance: cosine undefined for a zero vector");
  const double c = dot(a, b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

// --- serialization ------------------------------------------------------------
// One receiver per structured text record (a single JSON object per line in
// the profiles file).

inline nlohmann::json path_to_json(const PathComponent& p) {
  return nlohmann::json{{"attenuation", p.attenuation},
                        {"delay_s", p.delay_s},
                        {"aoa_rad", p.aoa_rad},
                        {"dfs_hz", p.dfs_hz}};
}

inline PathComponent path_from_json(const nlohmann::json& j) {
  PathComponent p;
  p.attenuation = j.at("attenuation").get<double>();
  p.delay_s = j.at("delay_s").get<double>();
  p.aoa_rad = j.at("aoa_rad").get<double>();
  p.dfs_hz = j.at("dfs_hz").get<double>();
  return p;
}

inline nlohmann::json profile_to_json(const SemanticProfile& sp) {
  nlohmann::json js;
  js["receiver_id"] = sp.receiver_id;
  js["is_source"] = sp.is_source;
  js["static_paths"] = nlohmann::json::array();
  for (const auto& p : sp.static_paths) js["static_paths"].push_back(path_to_json(p));
  js["dynamic_paths"] = nlohmann::json::array();
  for (const auto& p : sp.dynamic_paths) js["dynamic_paths"].push_back(path_to_json(p));
  js["embedding"] = sp.embedding;
  return js;
}

inline SemanticProfile profile_from_json(const nlohmann::json& j) {
  SemanticProfile sp;
  sp.receiver_id = j.at("receiver_id").get<int>();
  sp.is_source = j.at("is_source").get<bool>();
  for (const auto& pj : j.at("static_paths")) sp.static_paths.push_back(path_from_json(pj));
  for (const auto& pj : j.at("dynamic_paths")) sp.dynamic_paths.push_back(path_from_json(pj));
  sp.embedding = j.at("embedding").get<std::vector<double>>();
  require(!sp.static_paths.empty(),
          "profile " + std::to_string(sp.receiver_id) + ": static path set must be non-empty");
  return sp;
}

}  // namespace psan
