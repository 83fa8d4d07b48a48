#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "psan/csi.hpp"
#include "psan/rng.hpp"
#include "psan/semantics.hpp"

namespace psan {

// Every knob of a run lives in one config object so a (config, seed) pair
// reproduces the pipeline byte for byte.
struct ScenarioConfig {
  std::uint64_t seed = 1;

  int sources = 12;            // receivers with labeled data
  int targets = 6;             // receivers without labels
  int classes = 6;
  int samples_per_class = 3;   // labeled samples per class at each source
  int target_test_per_class = 6;
  double test_fraction = 0.34;

  double heterogeneity = 1.0;  // 0 = identical receivers (IID)
  double dfs_spread_hz = 15.0; // receiver-specific Doppler offset at knob 1
  double noise_std = 0.05;

  GridSpec grid;
  int max_paths = 3;
  PhysicalRanges ranges;

  int dfs_bins = 16;
  double dfs_bin_min_hz = 2.0;

  // training
  int rounds = 250;
  int epochs = 5;
  int batch = 6;
  double lr = 0.005;

  // attention regularizer
  double gamma = 1.0;
  double sigma = 0.0;   // 0 = median heuristic at round 0
  double lambda = 0.0;  // 0 = use gamma
  double alpha = 0.0;   // used when auto_alpha is false
  bool auto_alpha = true;
  double alpha_safety = 0.1;

  // classifier
  int hidden = 0;
  double l2 = 0.01;

  DistanceMetric metric = DistanceMetric::cosine;

  // semantic-distance regressor
  int mapping_hidden = 8;
  int mapping_epochs = 2000;
  double mapping_lr = 0.05;

  // optional: target receivers whose semantics duplicate a source's
  std::vector<std::pair<int, int>> duplicate_targets;  // (target_id, source_id)

  // optional hard acceptance thresholds checked by the eval command
  double hard_min_target_psan_minus_global = -1.0;  // accuracy points; <0 disables
  double hard_min_target_psan_minus_local = -1.0;

  int receiver_count() const { return sources + targets; }
  int embedding_dim() const { return 8 * max_paths; }

  void validate() const {
    require(sources >= 2, "receivers.sources: at least 2 sources required "
                          "(semantic/model training pairs need i != j)");
    require(targets >= 0, "receivers.targets: must be >= 0");
    require(classes >= 2 && classes <= 6, "classes: supported range is [2, 6]");
    require(samples_per_class >= 1, "samples_per_class: must be >= 1");
    require(target_test_per_class >= 1, "target_test_per_class: must be >= 1");
    require(test_fraction > 0.0 && test_fraction < 1.0, "test_fraction: must lie in (0, 1)");
    require(heterogeneity >= 0.0, "heterogeneity: must be >= 0");
    require(dfs_spread_hz >= 0.0, "dfs_spread_hz: must be >= 0");
    require(noise_std >= 0.0, "noise_std: must be >= 0");
    grid.validate();
    require(max_paths >= 2, "paths.max_paths: must be >= 2");
    require(dfs_bins >= 2, "features.dfs_bins: must be >= 2");
    require(dfs_bin_min_hz > 0.0, "features.dfs_bin_min_hz: must be > 0");
    require(rounds >= 0, "train.rounds: must be >= 0");
    require(epochs >= 1, "train.epochs: must be >= 1");
    require(batch >= 1, "train.batch: must be >= 1");
    require(lr >= 0.0, "train.lr: must be >= 0");
    require(gamma >= 0.0, "regularizer.gamma: must be >= 0 (0 decouples the receivers)");
    require(sigma >= 0.0, "regularizer.sigma: must be >= 0 (0 = median heuristic)");
    require(lambda >= 0.0, "regularizer.lambda: must be >= 0 (0 = use gamma)");
    require(alpha >= 0.0, "regularizer.alpha: must be >= 0");
    require(alpha_safety > 0.0 && alpha_safety <= 1.0, "regularizer.alpha_safety: must be in (0, 1]");
    require(hidden == 0 || hidden > 0, "model.hidden: must be >= 0");
    require(l2 >= 0.0, "model.l2: must be >= 0");
    require(mapping_hidden >= 1, "mapping.hidden: must be >= 1");
    require(mapping_epochs >= 1, "mapping.epochs: must be >= 1");
    require(mapping_lr > 0.0, "mapping.lr: must be > 0");
    for (const auto& [tgt, src] : duplicate_targets) {
      require(tgt >= sources && tgt < receiver_count(),
              "duplicate_targets: " + std::to_string(tgt) + " is not a target receiver id");
      require(src >= 0 && src < sources,
              "duplicate_targets: " + std::to_string(src) + " is not a source receiver id");
    }
  }
};

// --- config (de)serialization ---------------------------------------------------

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : known) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    require(ok, where + ": unknown key \"" + it.key() + "\"");
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json config_to_json(const ScenarioConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["receivers"] = {{"sources", c.sources}, {"targets", c.targets}};
  j["classes"] = c.classes;
  j["samples_per_class"] = c.samples_per_class;
  j["target_test_per_class"] = c.target_test_per_class;
  j["test_fraction"] = c.test_fraction;
  j["heterogeneity"] = c.heterogeneity;
  j["dfs_spread_hz"] = c.dfs_spread_hz;
  j["noise_std"] = c.noise_std;
  j["grid"] = {{"packets", c.grid.packets},
               {"subcarriers", c.grid.subcarriers},
               {"antennas", c.grid.antennas},
               {"packet_interval_s", c.grid.packet_interval_s},
               {"subcarrier_spacing_hz", c.grid.subcarrier_spacing_hz},
               {"antenna_spacing_wavelengths", c.grid.antenna_spacing_wavelengths},
               {"base_frequency_hz", c.grid.base_frequency_hz}};
  j["paths"] = {{"max_paths", c.max_paths}};
  j["ranges"] = {{"attenuation", {c.ranges.attenuation_min, c.ranges.attenuation_max}},
                 {"delay_s", {c.ranges.delay_min_s, c.ranges.delay_max_s}},
                 {"dfs_hz", {c.ranges.dfs_min_hz, c.ranges.dfs_max_hz}}};
  j["features"] = {{"dfs_bins", c.dfs_bins}, {"dfs_bin_min_hz", c.dfs_bin_min_hz}};
  j["train"] = {{"rounds", c.rounds}, {"epochs", c.epochs}, {"batch", c.batch}, {"lr", c.lr}};
  j["regularizer"] = {{"gamma", c.gamma},     {"sigma", c.sigma},
                      {"lambda", c.lambda},   {"alpha", c.alpha},
                      {"auto_alpha", c.auto_alpha}, {"alpha_safety", c.alpha_safety}};
  j["model"] = {{"hidden", c.hidden}, {"l2", c.l2}};
  j["metric"] = to_string(c.metric);
  j["mapping"] = {{"hidden", c.mapping_hidden},
                  {"epochs", c.mapping_epochs},
                  {"lr", c.mapping_lr}};
  if (!c.duplicate_targets.empty()) {
    j["duplicate_targets"] = nlohmann::json::array();
    for (const auto& [tgt, src] : c.duplicate_targets) {
      j["duplicate_targets"].push_back({{"target", tgt}, {"source", src}});
    }
  }
  if (c.hard_min_target_psan_minus_global >= 0 || c.hard_min_target_psan_minus_local >= 0) {
    nlohmann::json hc;
    if (c.hard_min_target_psan_minus_global >= 0)
      hc["min_target_psan_minus_global_points"] = c.hard_min_target_psan_minus_global;
    if (c.hard_min_target_psan_minus_local >= 0)
      hc["min_target_psan_minus_local_points"] = c.hard_min_target_psan_minus_local;
    j["hard_checks"] = hc;
  }
  return j;
}

inline ScenarioConfig config_from_json(const nlohmann::json& j) {
  ScenarioConfig c;
  detail::reject_unknown_keys(
      j,
      {"seed", "receivers", "classes", "samples_per_class", "target_test_per_class",
       "test_fraction", "heterogeneity", "dfs_spread_hz", "noise_std", "grid", "paths", "ranges",
       "features", "train", "regularizer", "model", "metric", "mapping", "duplicate_targets",
       "hard_checks"},
      "config");
  detail::read_field(j, "seed", c.seed);
  if (j.contains("receivers")) {
    const auto& r = j.at("receivers");
    detail::reject_unknown_keys(r, {"sources", "targets"}, "config.receivers");
    detail::read_field(r, "sources", c.sources);
    detail::read_field(r, "targets", c.targets);
  }
  detail::read_field(j, "classes", c.classes);
  detail::read_field(j, "samples_per_class", c.samples_per_class);
  detail::read_field(j, "target_test_per_class", c.target_test_per_class);
  detail::read_field(j, "test_fraction", c.test_fraction);
  detail::read_field(j, "heterogeneity", c.heterogeneity);
  detail::read_field(j, "dfs_spread_hz", c.dfs_spread_hz);
  detail::read_field(j, "noise_std", c.noise_std);
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    detail::reject_unknown_keys(g,
                                {"packets", "subcarriers", "antennas", "packet_interval_s",
                                 "subcarrier_spacing_hz", "antenna_spacing_wavelengths",
                                 "base_frequency_hz"},
                                "config.grid");
    detail::read_field(g, "packets", c.grid.packets);
    detail::read_field(g, "subcarriers", c.grid.subcarriers);
    detail::read_field(g, "antennas", c.grid.antennas);
    detail::read_field(g, "packet_interval_s", c.grid.packet_interval_s);
    detail::read_field(g, "subcarrier_spacing_hz", c.grid.subcarrier_spacing_hz);
    detail::read_field(g, "antenna_spacing_wavelengths", c.grid.antenna_spacing_wavelengths);
    detail::read_field(g, "base_frequency_hz", c.grid.base_frequency_hz);
  }
  if (j.contains("paths")) {
    detail::reject_unknown_keys(j.at("paths"), {"max_paths"}, "config.paths");
    detail::read_field(j.at("paths"), "max_paths", c.max_paths);
  }
  if (j.contains("ranges")) {
    const auto& r = j.at("ranges");
    detail::reject_unknown_keys(r, {"attenuation", "delay_s", "dfs_hz"}, "config.ranges");
    if (r.contains("attenuation")) {
      c.ranges.attenuation_min = r.at("attenuation").at(0).get<double>();
      c.ranges.attenuation_max = r.at("attenuation").at(1).get<double>();
    }
    if (r.contains("delay_s")) {
      c.ranges.delay_min_s = r.at("delay_s").at(0).get<double>();
      c.ranges.delay_max_s = r.at("delay_s").at(1).get<double>();
    }
    if (r.contains("dfs_hz")) {
      c.ranges.dfs_min_hz = r.at("dfs_hz").at(0).get<double>();
      c.ranges.dfs_max_hz = r.at("dfs_hz").at(1).get<double>();
    }
  }
  if (j.contains("features")) {
    detail::reject_unknown_keys(j.at("features"), {"dfs_bins", "dfs_bin_min_hz"},
                                "config.features");
    detail::read_field(j.at("features"), "dfs_bins", c.dfs_bins);
    detail::read_field(j.at("features"), "dfs_bin_min_hz", c.dfs_bin_min_hz);
  }
  if (j.contains("train")) {
    detail::reject_unknown_keys(j.at("train"), {"rounds", "epochs", "batch", "lr"},
                                "config.train");
    detail::read_field(j.at("train"), "rounds", c.rounds);
    detail::read_field(j.at("train"), "epochs", c.epochs);
    detail::read_field(j.at("train"), "batch", c.batch);
    detail::read_field(j.at("train"), "lr", c.lr);
  }
  if (j.contains("regularizer")) {
    detail::reject_unknown_keys(j.at("regularizer"),
                                {"gamma", "sigma", "lambda", "alpha", "auto_alpha",
                                 "alpha_safety"},
                                "config.regularizer");
    detail::read_field(j.at("regularizer"), "gamma", c.gamma);
    detail::read_field(j.at("regularizer"), "sigma", c.sigma);
    detail::read_field(j.at("regularizer"), "lambda", c.lambda);
    detail::read_field(j.at("regularizer"), "alpha", c.alpha);
    detail::read_field(j.at("regularizer"), "auto_alpha", c.auto_alpha);
    detail::read_field(j.at("regularizer"), "alpha_safety", c.alpha_safety);
  }
  if (j.contains("model")) {
    detail::reject_unknown_keys(j.at("model"), {"hidden", "l2"}, "config.model");
    detail::read_field(j.at("model"), "hidden", c.hidden);
    detail::read_field(j.at("model"), "l2", c.l2);
  }
  if (j.contains("metric")) c.metric = metric_from_string(j.at("metric").get<std::string>());
  if (j.contains("mapping")) {
    detail::reject_unknown_keys(j.at("mapping"), {"hidden", "epochs", "lr"}, "config.mapping");
    detail::read_field(j.at("mapping"), "hidden", c.mapping_hidden);
    detail::read_field(j.at("mapping"), "epochs", c.mapping_epochs);
    detail::read_field(j.at("mapping"), "lr", c.mapping_lr);
  }
  if (j.contains("duplicate_targets")) {
    for (const auto& d : j.at("duplicate_targets")) {
      detail::reject_unknown_keys(d, {"target", "source"}, "config.duplicate_targets[]");
      c.duplicate_targets.emplace_back(d.at("target").get<int>(), d.at("source").get<int>());
    }
  }
  if (j.contains("hard_checks")) {
    const auto& hc = j.at("hard_checks");
    detail::reject_unknown_keys(
        hc, {"min_target_psan_minus_global_points", "min_target_psan_minus_local_points"},
        "config.hard_checks");
    detail::read_field(hc, "min_target_psan_minus_global_points",
                       c.hard_min_target_psan_minus_global);
    detail::read_field(hc, "min_target_psan_minus_local_points",
                       c.hard_min_target_psan_minus_local);
  }
  c.validate();
  return c;
}

// nlohmann::json keeps object keys sorted, so this dump is canonical and its
// hash identifies the run.
inline std::string canonical_config_string(const ScenarioConfig& c) {
  return config_to_json(c).dump();
}

inline std::string config_hash(const ScenarioConfig& c) {
  return hash_hex(fnv1a64(canonical_config_string(c)));
}

// --- gesture library -------------------------------------------------------------
//
// Six built-in classes with distinct Doppler signatures. Trajectories are
// offsets added on top of each dynamic path's own Doppler, so the receiver's
// pose shifts the whole spectrum while the class controls its shape:
//   0 hold        steady tone
//   1 swipe up    linear sweep 0..+20 Hz across the window
//   2 swipe down  linear sweep 0..-20 Hz
//   3 circle slow 12 Hz swing, 3 cycles per window
//   4 circle fast 12 Hz swing, 9 cycles per window
//   5 push burst  +25 Hz Gaussian pulse plus an amplitude surge
inline GestureSpec gesture_for_class(int class_id, double window_s) {
  require(class_id >= 0 && class_id < 6, "gesture_for_class: class_id out of range");
  GestureSpec g;
  g.class_id = class_id;
  switch (class_id) {
    case 0:
      g.dfs_trajectory = {Trajectory::Kind::constant, 0.0, 0.0, 0.0};
      break;
    case 1:
      g.dfs_trajectory = {Trajectory::Kind::linear, 0.0, 20.0 / window_s, 0.0};
      break;
    case 2:
      g.dfs_trajectory = {Trajectory::Kind::linear, 0.0, -20.0 / window_s, 0.0};
      break;
    case 3:
      g.dfs_trajectory = {Trajectory::Kind::sine, 12.0, 3.0 / window_s, 0.0};
      break;
    case 4:
      g.dfs_trajectory = {Trajectory::Kind::sine, 20.0, 9.0 / window_s, 0.0};
      break;
    case 5:
      g.dfs_trajectory = {Trajectory::Kind::gauss_burst, 25.0, window_s / 2.0, window_s / 10.0};
      g.amp_modulation = {Trajectory::Kind::gauss_burst, 0.8, window_s / 2.0, window_s / 8.0};
      break;
  }
  return g;
}

// --- receiver generation -----------------------------------------------------------

struct Scenario {
  ScenarioConfig config;
  std::vector<SemanticProfile> profiles;      // ids 0..K-1, first `sources` are sources
  std::vector<std::vector<int>> class_counts; // [receiver][class]
};

namespace detail {

inline double wrap_angle(double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  return a < 0 ? a + two_pi : a;
}

// Layout and pose are smooth functions of a per-receiver latent position
// (u1, u2), scaled by the heterogeneity knob. At knob 0 every receiver is
// identical; the shared latent makes environment layout and Doppler offset
// correlated, the way a physical location would.
inline SemanticProfile draw_profile(const ScenarioConfig& c, int receiver_id,
                                    std::uint64_t master) {
  auto strm = rng::derive(master, "profile", static_cast<std::uint64_t>(receiver_id));
  const double u1 = strm.uniform01();
  const double u2 = strm.uniform01();
  const double h = c.heterogeneity;
  const double pi = std::numbers::pi;

  SemanticProfile sp;
  sp.receiver_id = receiver_id;
  sp.is_source = receiver_id < c.sources;

  // Environment layout: direct path plus one wall reflection. Layout varies
  // mildly with the latent so the Doppler coordinates carry comparable weight
  // in the embedding to the weight they carry in the learned models.
  sp.static_paths.push_back({0.9 - 0.1 * h * u1, (15.0 + 12.0 * h * u1) * 1e-9,
                             wrap_angle(0.3 * pi + 0.3 * pi * h * u2), 0.0});
  sp.static_paths.push_back({0.35 + 0.1 * h * (u2 - 0.5), (40.0 + 10.0 * h * u2) * 1e-9,
                             wrap_angle(0.5 * pi + 0.35 * pi * h * u1), 0.0});

  // user reflections: pose-dependent Doppler offsets, kept high enough that
  // class sweeps stay on one side of zero frequency
  sp.dynamic_paths.push_back({0.5 + 0.08 * h * (u1 - 0.5), (25.0 + 8.0 * h * u1) * 1e-9,
                              wrap_angle(0.8 * pi + 0.3 * pi * h * u2),
                              35.0 + c.dfs_spread_hz * h * (2.0 * u1 - 1.0)});
  sp.dynamic_paths.push_back({0.25 + 0.04 * h * (u2 - 0.5), (35.0 + 8.0 * h * u2) * 1e-9,
                              wrap_angle(1.1 * pi + 0.35 * pi * h * u1),
                              42.0 + 0.8 * c.dfs_spread_hz * h * (2.0 * u2 - 1.0)});
  for (auto& p : sp.static_paths) p.attenuation *= gain;
  for (auto& p : sp.dynamic_paths) p.attenuation *= gain;
  return sp;
}

}  // namespace detail

inline Scenario make_scenario(const ScenarioConfig& config, std::uint64_t master_seed) {
  config.validate();
  Scenario sc;
  sc.config = config;
  sc.profiles.reserve(static_cast<std::size_t>(config.receiver_count()));
  for (int k = 0; k < config.receiver_count(); ++k) {
    sc.profiles.push_back(detail::draw_profile(config, k, master_seed));
  }
  for (const auto& [tgt, src] : config.duplicate_targets) {
    SemanticProfile copy = sc.profiles[static_cast<std::size_t>(src)];
    copy.receiver_id = tgt;
    copy.is_source = false;
    sc.profiles[static_cast<std::size_t>(tgt)] = std::move(copy);
  }
  for (auto& sp : sc.profiles) {
    sp.embedding = embed(sp, config.embedding_dim(), config.max_paths, config.ranges);
  }
  sc.class_counts.assign(static_cast<std::size_t>(config.receiver_count()),
                         std::vector<int>(static_cast<std::size_t>(config.classes), 0));
  for (int k = 0; k < config.receiver_count(); ++k) {
    const int n = k < config.sources ? config.samples_per_class : config.target_test_per_class;
    for (int c = 0; c < config.classes; ++c) {
      sc.class_counts[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)] = n;
    }
  }
  return sc;
}

// One dataset sample fully realized: the receiver's paths with per-sample
// jitter applied, the class gesture with per-sample variation, and the derived
// noise stream. Keyed by (master seed, receiver, class, index) so any parallel
// schedule synthesizes identical data.
struct SampleRealization {
  SemanticProfile profile;
  GestureSpec gesture;
  rng::Stream noise_stream;
};

inline SampleRealization realize_sample(const Scenario& sc, int receiver_id, int class_id,
                                        int sample_index) {
  const auto& cfg = sc.config;
  auto jitter = rng::derive(cfg.seed, "sample", static_cast<std::uint64_t>(receiver_id),
                            static_cast<std::uint64_t>(class_id),
                            static_cast<std::uint64_t>(sample_index));
  const double window = cfg.grid.packets * cfg.grid.packet_interval_s;

  SampleRealization r{sc.profiles[static_cast<std::size_t>(receiver_id)],
                      gesture_for_class(class_id, window),
                      rng::derive(cfg.seed, "noise", static_cast<std::uint64_t>(receiver_id),
                                  static_cast<std::uint64_t>(class_id),
                                  static_cast<std::uint64_t>(sample_index))};

  // The environment holds still between samples; only the user's pose varies,
  // seen as a small Doppler wobble plus trajectory variation below.
  for (auto& p : r.profile.dynamic_paths) {
    p.dfs_hz += jitter.uniform(-1.5, 1.5);
  }
  const double scale = 1.0 + 0.1 * jitter.uniform(-1.0, 1.0);
  r.gesture.dfs_trajectory.p0 *= scale;
  if (r.gesture.dfs_trajectory.kind == Trajectory::Kind::linear) {
    r.gesture.dfs_trajectory.p1 *= scale;
  }
  if (r.gesture.dfs_trajectory.kind == Trajectory::Kind::sine) {
    r.gesture.dfs_trajectory.p2 = jitter.uniform(0.0, 2.0 * std::numbers::pi);
  }
  return r;
}

}  // namespace psan
