#pragma once

#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "psan/common.hpp"
#include "psan/rng.hpp"
#include "psan/semantics.hpp"

namespace psan {

struct GridSpec {
  int packets = 256;                      // T
  int subcarriers = 30;                   // number of subcarrier frequencies
  int antennas = 3;                       // receive array size
  double packet_interval_s = 1e-3;        // 1000 Hz sampling
  double subcarrier_spacing_hz = 312.5e3;
  double antenna_spacing_wavelengths = 0.5;
  double base_frequency_hz = 5.825e9;

  void validate() const {
    require(packets >= 1 && subcarriers >= 1 && antennas >= 1,
            "grid: all dimensions must be >= 1");
    require(packet_interval_s > 0 && subcarrier_spacing_hz > 0 && base_frequency_hz > 0,
            "grid: spacings and base frequency must be positive");
  }
};

// Complex channel samples indexed [packet t][subcarrier][antenna], t-major.
struct CsiGrid {
  GridSpec spec;
  std::vector<std::complex<double>> samples;

  std::size_t index(int t, int s, int a) const {
    return (static_cast<std::size_t>(t) * spec.subcarriers + s) * spec.antennas + a;
  }
  std::complex<double>& at(int t, int s, int a) { return samples[index(t, s, a)]; }
  const std::complex<double>& at(int t, int s, int a) const { return samples[index(t, s, a)]; }
};

// Time-profile descriptor used for the per-class Doppler trajectory and the
// dynamic-path amplitude modulation. Serializable so a scenario is fully
// described by plain data.
struct Trajectory {
  enum class Kind { constant, linear, sine, gauss_burst };
  Kind kind = Kind::constant;
  double p0 = 0.0;  // constant: value; linear: intercept; sine/burst: amplitude
  double p1 = 0.0;  // linear: slope /s; sine: frequency Hz; burst: center s
  double p2 = 0.0;  // sine: phase rad; burst: width s

  double operator()(double t) const {
    switch (kind) {
      case Kind::constant:
        return p0;
      case Kind::linear:
        return p0 + p1 * t;
      case Kind::sine:
        return p0 * std::sin(2.0 * std::numbers::pi * p1 * t + p2);
      case Kind::gauss_burst: {
        const double z = (t - p1) / p2;
        return p0 * std::exp(-0.5 * z * z);
      }
    }
    return 0.0;
  }
};

struct GestureSpec {
  int class_id = 0;
  Trajectory dfs_trajectory;      // Hz offset added to every dynamic path's dfs
  Trajectory amp_modulation;      // offset added to a baseline factor of 1
  double amp_baseline = 1.0;      // multiplicative factor = amp_baseline + amp_modulation(t)

  double amplitude_factor(double t) const { return amp_baseline + amp_modulation(t); }
};

// Synthesizes one CSI grid from a receiver's path profile and a gesture.
//
// Each sample is the superposition over paths of A * exp(j*phase) where, for
// subcarrier frequency f_s = base + s*spacing,
//
//   phase_static(s, a)     = -2*pi*f_s * (delay + a * aoa * spacing_wl / f_base)
//   phase_dynamic(t, s, a) = phase_static(s, a) + 2*pi * (dfs * t + Int(traj, 0..t))
//
// The angle-of-arrival enters as a per-antenna delay offset
// a * aoa * antenna_spacing_wavelengths / base_frequency, i.e. a phase shift
// proportional to the antenna index times the raw aoa value. The trajectory
// integral is accumulated with the trapezoid rule over packet times. Noise is
// circularly symmetric complex Gaussian with E|n|^2 = noise_std^2.
inline CsiGrid synthesize(const SemanticProfile& profile, const GestureSpec& gesture,
                          const GridSpec& spec, double noise_std, rng::Stream& noise_stream) {
  spec.validate();
  require(noise_std >= 0.0, "synthesize: noise_std must be >= 0");
  require(!profile.static_paths.empty() || !profile.dynamic_paths.empty(),
          "synthesize: receiver " + std::to_string(profile.receiver_id) + " has no paths");

  const int T = spec.packets;
  const int S = spec.subcarriers;
  const int A = spec.antennas;
  const double dt = spec.packet_interval_s;
  const double two_pi = 2.0 * std::numbers::pi;
  const double aoa_scale = spec.antenna_spacing_wavelengths / spec.base_frequency_hz;

  // gesture trajectory sampled at packet times; trapezoid-integrated phase
  std::vector<double> traj(T), amp(T), traj_integral(T);
  for (int t = 0; t < T; ++t) {
    traj[t] = gesture.dfs_trajectory(t * dt);
    amp[t] = gesture.amplitude_factor(t * dt);
    require(std::isfinite(traj[t]) && std::isfinite(amp[t]),
            "synthesize: non-finite trajectory value at packet " + std::to_string(t));
    require(amp[t] >= 0.0, "synthesize: amplitude factor must be >= 0 at all sampled times");
  }
  traj_integral[0] = 0.0;
  for (int t = 1; t < T; ++t) {
    traj_integral[t] = traj_integral[t - 1] + 0.5 * (traj[t - 1] + traj[t]) * dt;
  }

  CsiGrid grid;
  grid.spec = spec;
  grid.samples.assign(static_cast<std::size_t>(T) * S * A, {0.0, 0.0});

  for (int t = 0; t < T; ++t) {
    const double time = t * dt;
    for (int s = 0; s < S; ++s) {
      const double f = spec.base_frequency_hz + s * spec.subcarrier_spacing_hz;
      for (int a = 0; a < A; ++a) {
        std::complex<double> h{0.0, 0.0};
        for (const auto& p : profile.static_paths) {
          const double phase = -two_pi * f * (p.delay_s + a * p.aoa_rad * aoa_scale);
          h += std::polar(p.attenuation, phase);
        }
        for (const auto& p : profile.dynamic_paths) {
          const double phase = -two_pi * f * (p.delay_s + a * p.aoa_rad * aoa_scale) +
                               two_pi * (p.dfs_hz * time + traj_integral[t]);
          h += std::polar(p.attenuation * amp[t], phase);
        }
        grid.at(t, s, a) = h;
      }
    }
  }

  if (noise_std > 0.0) {
    const double comp_std = noise_std / std::numbers::sqrt2;
    for (auto& h : grid.samples) {
      h += std::complex<double>(noise_stream.normal(0.0, comp_std),
                                noise_stream.normal(0.0, comp_std));
    }
  }
  return grid;
}

// --- binary export / import ----------------------------------------------------
//
// Layout (little endian):
//   8 bytes  magic "PSANCSI1"
//   7 f64    packets, subcarriers, antennas, packet_interval_s,
//            subcarrier_spacing_hz, antenna_spacing_wavelengths, base_frequency_hz
//   payload  interleaved re/im f32, t-major
//
// The import path below is the documented substitute for ingesting externally
// recorded grids.

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "grid files are little-endian; big-endian hosts are unsupported");

inline void put_f64(std::ofstream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline double get_f64(std::ifstream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace detail

inline void write_grid(const CsiGrid& grid, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "write_grid: cannot open " + path);
  os.write("PSANCSI1", 8);
  detail::put_f64(os, grid.spec.packets);
  detail::put_f64(os, grid.spec.subcarriers);
  detail::put_f64(os, grid.spec.antennas);
  detail::put_f64(os, grid.spec.packet_interval_s);
  detail::put_f64(os, grid.spec.subcarrier_spacing_hz);
  detail::put_f64(os, grid.spec.antenna_spacing_wavelengths);
  detail::put_f64(os, grid.spec.base_frequency_hz);
  std::vector<float> payload;
  payload.reserve(grid.samples.size() * 2);
  for (const auto& h : grid.samples) {
    payload.push_back(static_cast<float>(h.real()));
    payload.push_back(static_cast<float>(h.imag()));
  }
  os.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size() * sizeof(float)));
  require(os.good(), "write_grid: write failed for " + path);
}

inline CsiGrid read_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "read_grid: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  require(is.good() && std::memcmp(magic, "PSANCSI1", 8) == 0,
          "read_grid: " + path + " is not a version-1 grid file");
  CsiGrid grid;
  auto read_dim = [&](const char* name) {
    const double v = detail::get_f64(is);
    require(v >= 1.0 && v == std::floor(v), std::string("read_grid: bad dimension ") + name);
    return static_cast<int>(v);
  };
  grid.spec.packets = read_dim("packets");
  grid.spec.subcarriers = read_dim("subcarriers");
  grid.spec.antennas = read_dim("antennas");
  grid.spec.packet_interval_s = detail::get_f64(is);
  grid.spec.subcarrier_spacing_hz = detail::get_f64(is);
  grid.spec.antenna_spacing_wavelengths = detail::get_f64(is);
  grid.spec.base_frequency_hz = detail::get_f64(is);
  grid.spec.validate();
  const std::size_t n = static_cast<std::size_t>(grid.spec.packets) * grid.spec.subcarriers *
                        grid.spec.antennas;
  std::vector<float> payload(n * 2);
  is.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  require(is.gcount() == static_cast<std::streamsize>(payload.size() * sizeof(float)),
          "read_grid: truncated payload in " + path);
  grid.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    grid.samples.emplace_back(payload[2 * i], payload[2 * i + 1]);
  }
  return grid;
}

// Debug dump, one sample per row.
inline void write_grid_csv(const CsiGrid& grid, const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "write_grid_csv: cannot open " + path);
  os << "t,subcarrier,antenna,re,im\n";
  os.precision(17);
  for (int t = 0; t < grid.spec.packets; ++t) {
    for (int s = 0; s < grid.spec.subcarriers; ++s) {
      for (int a = 0; a < grid.spec.antennas; ++a) {
        const auto& h = grid.at(t, s, a);
        os << t << ',' << s << ',' << a << ',' << h.real() << ',' << h.imag() << '\n';
      }
    }
  }
}

}  // namespace psan
