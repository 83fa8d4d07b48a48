#pragma once

#include <atomic>
#include <cmath>
#include <complex>
#include <fstream>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "psan/csi.hpp"
#include "psan/scenario.hpp"

namespace psan {

// Shape of the hand-crafted feature front-end. dim() is the fixed F of a run.
struct FeatureSpec {
  int packets = 256;
  int subcarriers = 30;
  int antennas = 3;
  double packet_interval_s = 1e-3;
  int dfs_bins = 16;        // bin 0 is the DC bin, the rest are log spaced
  double bin_min_hz = 2.0;

  static FeatureSpec from_config(const ScenarioConfig& c) {
    return {c.grid.packets, c.grid.subcarriers, c.grid.antennas, c.grid.packet_interval_s,
            c.dfs_bins, c.dfs_bin_min_hz};
  }

  int dim() const { return 2 * subcarriers + dfs_bins + 2 * (antennas - 1); }

  nlohmann::json to_json() const {
    return {{"packets", packets},
            {"subcarriers", subcarriers},
            {"antennas", antennas},
            {"packet_interval_s", packet_interval_s},
            {"dfs_bins", dfs_bins},
            {"bin_min_hz", bin_min_hz}};
  }
};

// Deterministic features from one grid:
//   [0, 2S)        per-subcarrier amplitude mean and std over packets, antenna 0
//   [2S, 2S+B)     Doppler energies: T-point DFT (1/T normalized) of the
//                  antenna-0 center-subcarrier sequence, |frequency| folded
//                  into B bins (bin 0 = below bin_min_hz, rest log spaced up
//                  to Nyquist), log-compressed as log1p(energy/0.01) so the
//                  classifier sees O(1) contrasts
//   [2S+B, F)      circular-mean direction (cos, sin) of the phase difference
//                  between each antenna and antenna 0
inline std::vector<double> extract_features(const CsiGrid& grid, const FeatureSpec& spec) {
  require(grid.spec.packets == spec.packets && grid.spec.subcarriers == spec.subcarriers &&
              grid.spec.antennas == spec.antennas,
          "extract_features: grid dimensions do not match the feature spec");
  const int T = spec.packets;
  const int S = spec.subcarriers;
  const int A = spec.antennas;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(spec.dim()));

  for (int s = 0; s < S; ++s) {
    double mean = 0.0;
    for (int t = 0; t < T; ++t) mean += std::abs(grid.at(t, s, 0));
    mean /= T;
    double var = 0.0;
    for (int t = 0; t < T; ++t) {
      const double d = std::abs(grid.at(t, s, 0)) - mean;
      var += d * d;
    }
    out.push_back(mean);
    out.push_back(std::sqrt(var / T));
  }

  // Doppler profile of the center subcarrier
  const int sc = S / 2;
  std::vector<std::complex<double>> spectrum(static_cast<std::size_t>(T));
  const double w0 = -2.0 * std::numbers::pi / T;
  for (int k = 0; k < T; ++k) {
    std::complex<double> acc{0.0, 0.0};
    for (int t = 0; t < T; ++t) {
      acc += grid.at(t, sc, 0) * std::polar(1.0, w0 * k * t);
    }
    spectrum[static_cast<std::size_t>(k)] = acc / static_cast<double>(T);
  }
  const double nyquist = 0.5 / spec.packet_interval_s;
  const int B = spec.dfs_bins;
  std::vector<double> bins(static_cast<std::size_t>(B), 0.0);
  const double ratio = nyquist / spec.bin_min_hz;
  for (int k = 0; k < T; ++k) {
    const double f = (k <= T / 2 ? k : k - T) / (T * spec.packet_interval_s);
    const double af = std::abs(f);
    int b = 0;
    if (af >= spec.bin_min_hz) {
      // log position in [bin_min, nyquist] mapped onto bins 1..B-1
      const double pos = std::log(af / spec.bin_min_hz) / std::log(ratio);
      b = 1 + std::min(B - 2, static_cast<int>(pos * (B - 1)));
    }
    bins[static_cast<std::size_t>(b)] += std::norm(spectrum[static_cast<std::size_t>(k)]);
  }
  for (double b : bins) out.push_back(std::log1p(b / 0.01));

  for (int a = 1; a < A; ++a) {
    std::complex<double> z{0.0, 0.0};
    for (int t = 0; t < T; ++t) {
      for (int s = 0; s < S; ++s) {
        z += grid.at(t, s, a) * std::conj(grid.at(t, s, 0));
      }
    }
    const double m = std::abs(z);
    out.push_back(m > 0 ? z.real() / m : 0.0);
    out.push_back(m > 0 ? z.imag() / m : 0.0);
  }

  require(all_finite(out), "extract_features: non-finite feature");
  return out;
}

// --- labeled data -----------------------------------------------------------------

enum class Split { train, test };

struct LabeledSample {
  std::vector<double> features;
  int label = 0;
  int receiver_id = 0;
  Split split = Split::test;
};

// Per-receiver dataset. Labels are only reachable through label(), which
// counts every read; the zero-shot contract is that a target receiver's
// counter stays 0 through data generation, training, and transfer. Copies
// share the counter.
class ReceiverDataset {
 public:
  ReceiverDataset() : label_reads_(std::make_shared<std::atomic<long>>(0)) {}
  ReceiverDataset(int receiver_id, bool is_source)
      : receiver_id_(receiver_id),
        is_source_(is_source),
        label_reads_(std::make_shared<std::atomic<long>>(0)) {}

  int receiver_id() const { return receiver_id_; }
  bool is_source() const { return is_source_; }
  std::size_t size() const { return samples_.size(); }

  void add(LabeledSample s) {
    require(s.receiver_id == receiver_id_, "dataset: sample carries a foreign receiver id");
    if (!samples_.empty()) {
      require(s.features.size() == samples_.front().features.size(),
              "dataset: inconsistent feature dimension");
    }
    const std::size_t i = samples_.size();
    samples_.push_back(std::move(s));
    if (samples_[i].split == Split::train) train_idx_.push_back(i);
    else test_idx_.push_back(i);
  }

  std::span<const double> features(std::size_t i) const { return samples_[i].features; }
  Split split(std::size_t i) const { return samples_[i].split; }

  int label(std::size_t i) const {
    label_reads_->fetch_add(1, std::memory_order_relaxed);
    return samples_[i].label;
  }

  long label_reads() const { return label_reads_->load(std::memory_order_relaxed); }

  const std::vector<std::size_t>& train_indices() const { return train_idx_; }
  const std::vector<std::size_t>& test_indices() const { return test_idx_; }

  const LabeledSample& raw(std::size_t i) const { return samples_[i]; }

 private:
  int receiver_id_ = 0;
  bool is_source_ = false;
  std::vector<LabeledSample> samples_;
  std::vector<std::size_t> train_idx_;
  std::vector<std::size_t> test_idx_;
  std::shared_ptr<std::atomic<long>> label_reads_;
};

// --- dataset assembly ----------------------------------------------------------------

// Builds every receiver's dataset from the scenario. Sources get a stratified
// train/test split per class; targets are test-only (labels exist in the files
// for later evaluation but stay behind the read counter). jobs only changes
// wall time, never output.
inline std::vector<ReceiverDataset> build_datasets(const Scenario& sc, int jobs = 1) {
  const auto& cfg = sc.config;
  const FeatureSpec fspec = FeatureSpec::from_config(cfg);
  const int K = cfg.receiver_count();

  struct Pending {
    int receiver, class_id, index;
    Split split;
  };
  std::vector<std::vector<Pending>> plan(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const bool src = k < cfg.sources;
    for (int c = 0; c < cfg.classes; ++c) {
      const int n = sc.class_counts[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
      std::vector<Split> splits(static_cast<std::size_t>(n), Split::test);
      if (src) {
        int n_test = static_cast<int>(std::lround(n * cfg.test_fraction));
        n_test = std::min(n - 1, std::max(1, n_test));
        require(n_test >= 1 && n_test < n,
                "build_datasets: test_fraction " + std::to_string(cfg.test_fraction) +
                    " leaves an empty split for " + std::to_string(n) + " samples per class");
        std::vector<std::size_t> order(static_cast<std::size_t>(n));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        auto strm = rng::derive(cfg.seed, "split", static_cast<std::uint64_t>(k),
                                static_cast<std::uint64_t>(c));
        strm.shuffle(order);
        for (std::size_t i = 0; i < order.size(); ++i) {
          splits[order[i]] = i < static_cast<std::size_t>(n_test) ? Split::test : Split::train;
        }
      }
      for (int i = 0; i < n; ++i) {
        plan[static_cast<std::size_t>(k)].push_back(
            {k, c, i, splits[static_cast<std::size_t>(i)]});
      }
    }
  }

  std::vector<std::vector<LabeledSample>> made(static_cast<std::size_t>(K));
  parallel_for(static_cast<std::size_t>(K), jobs, [&](std::size_t k) {
    made[k].reserve(plan[k].size());
    for (const auto& p : plan[k]) {
      auto real = realize_sample(sc, p.receiver, p.class_id, p.index);
      const CsiGrid grid =
          synthesize(real.profile, real.gesture, cfg.grid, cfg.noise_std, real.noise_stream);
      LabeledSample s;
      s.features = extract_features(grid, fspec);
      s.label = p.class_id;
      s.receiver_id = p.receiver;
      s.split = p.split;
      made[k].push_back(std::move(s));
    }
  });

  std::vector<ReceiverDataset> out;
  out.reserve(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    ReceiverDataset ds(k, k < cfg.sources);
    for (auto& s : made[static_cast<std::size_t>(k)]) ds.add(std::move(s));
    out.push_back(std::move(ds));
  }
  return out;
}

// --- JSON-lines persistence -----------------------------------------------------------

inline void write_datasets_jsonl(const std::vector<ReceiverDataset>& dsets,
                                 const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "write_datasets_jsonl: cannot open " + path);
  for (const auto& ds : dsets) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto& s = ds.raw(i);
      nlohmann::json j;
      j["receiver_id"] = s.receiver_id;
      j["split"] = s.split == Split::train ? "train" : "test";
      j["y"] = s.label;
      j["x"] = s.features;
      os << j.dump() << '\n';
    }
  }
  require(os.good(), "write_datasets_jsonl: write failed for " + path);
}

inline std::vector<ReceiverDataset> read_datasets_jsonl(const std::string& path,
                                                        int receiver_count, int sources) {
  std::ifstream is(path);
  require(is.good(), "read_datasets_jsonl: cannot open " + path);
  std::vector<ReceiverDataset> out;
  out.reserve(static_cast<std::size_t>(receiver_count));
  for (int k = 0; k < receiver_count; ++k) out.emplace_back(k, k < sources);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("read_datasets_jsonl: line " + std::to_string(lineno) + ": " +
                            e.what());
    }
    LabeledSample s;
    s.receiver_id = j.at("receiver_id").get<int>();
    s.split = j.at("split").get<std::string>() == "train" ? Split::train : Split::test;
    s.label = j.at("y").get<int>();
    s.features = j.at("x").get<std::vector<double>>();
    require(s.receiver_id >= 0 && s.receiver_id < receiver_count,
            "read_datasets_jsonl: line " + std::to_string(lineno) + ": receiver_id out of range");
    out[static_cast<std::size_t>(s.receiver_id)].add(std::move(s));
  }
  return out;
}

}  // namespace psan
