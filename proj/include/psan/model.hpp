#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "psan/common.hpp"
#include "psan/dataset.hpp"
#include "psan/rng.hpp"
#include "psan/semantics.hpp"

namespace psan {

// Classifier shape. hidden == 0 is plain multinomial logistic regression (the
// convex case used for all optimization-facing checks); hidden > 0 adds one
// tanh layer for accuracy-facing experiments.
struct Arch {
  int input_dim = 0;
  int hidden = 0;
  int classes = 0;

  int dim() const {
    return hidden > 0 ? input_dim * hidden + hidden + hidden * classes + classes
                      : input_dim * classes + classes;
  }
  bool operator==(const Arch&) const = default;

  void validate() const {
    require(input_dim >= 1 && classes >= 2 && hidden >= 0, "arch: bad dimensions");
  }
};

// Flattened parameter vector. Layout is layer-major, row-major:
//   hidden == 0:  W  [classes x input_dim], b  [classes]
//   hidden  > 0:  W1 [hidden x input_dim], b1 [hidden],
//                 W2 [classes x hidden],   b2 [classes]
struct ModelVector {
  Arch arch;
  std::vector<double> params;
};

struct LossSpec {
  double l2 = 0.0;  // coefficient of (l2/2)*||params||^2

  void validate() const { require(std::isfinite(l2) && l2 >= 0.0, "loss: l2 must be >= 0"); }
};

inline ModelVector zero_model(const Arch& arch) {
  arch.validate();
  return {arch, std::vector<double>(static_cast<std::size_t>(arch.dim()), 0.0)};
}

inline ModelVector init_model(const Arch& arch, rng::Stream& strm, double scale = 0.01) {
  ModelVector m = zero_model(arch);
  for (auto& p : m.params) p = strm.normal(0.0, scale);
  return m;
}

namespace detail {

inline std::vector<double> softmax(std::vector<double> logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (auto& v : logits) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : logits) v /= sum;
  return logits;
}

inline std::vector<double> logits_of(const ModelVector& m, std::span<const double> x,
                                     std::vector<double>* hidden_out) {
  const int F = m.arch.input_dim;
  const int H = m.arch.hidden;
  const int C = m.arch.classes;
  const double* p = m.params.data();
  if (H == 0) {
    std::vector<double> z(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
      z[static_cast<std::size_t>(c)] =
          p[F * C + c] + dot({p + static_cast<std::size_t>(c) * F, static_cast<std::size_t>(F)}, x);
    }
    return z;
  }
  std::vector<double> h(static_cast<std::size_t>(H));
  for (int i = 0; i < H; ++i) {
    h[static_cast<std::size_t>(i)] = std::tanh(
        p[F * H + i] + dot({p + static_cast<std::size_t>(i) * F, static_cast<std::size_t>(F)}, x));
  }
  const double* w2 = p + F * H + H;
  const double* b2 = w2 + H * C;
  std::vector<double> z(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    z[static_cast<std::size_t>(c)] =
        b2[c] + dot({w2 + static_cast<std::size_t>(c) * H, static_cast<std::size_t>(H)}, h);
  }
  if (hidden_out) *hidden_out = std::move(h);
  return z;
}

}  // namespace detail

// Softmax class probabilities; strictly positive, sum to 1.
inline std::vector<double> predict(const ModelVector& m, std::span<const double> x) {
  m.arch.validate();
  require(static_cast<int>(x.size()) == m.arch.input_dim,
          "predict: feature dim " + std::to_string(x.size()) + " does not match arch input " +
              std::to_string(m.arch.input_dim));
  require(all_finite(m.params), "predict: non-finite model parameters");
  require(static_cast<int>(m.params.size()) == m.arch.dim(), "predict: parameter size mismatch");
  return detail::softmax(detail::logits_of(m, x, nullptr));
}

// Ties broken toward the lowest class id.
inline int argmax_class(std::span<const double> probs) {
  int best = 0;
  for (int c = 1; c < static_cast<int>(probs.size()); ++c) {
    if (probs[static_cast<std::size_t>(c)] > probs[static_cast<std::size_t>(best)]) best = c;
  }
  return best;
}

struct BatchView {
  std::span<const double> x;
  int y = 0;
};

// Pulls a mini-batch out of a dataset; every label access is counted.
inline std::vector<BatchView> make_batch(const ReceiverDataset& ds,
                                         std::span<const std::size_t> idx) {
  std::vector<BatchView> batch;
  batch.reserve(idx.size());
  for (std::size_t i : idx) batch.push_back({ds.features(i), ds.label(i)});
  return batch;
}

inline std::vector<BatchView> as_batch(std::span<const LabeledSample> samples) {
  std::vector<BatchView> batch;
  batch.reserve(samples.size());
  for (const auto& s : samples) batch.push_back({s.features, s.label});
  return batch;
}

// Mean cross-entropy over the batch plus (l2/2)*||params||^2, with the exact
// analytic gradient. With hidden == 0 and l2 > 0 this objective is l2-strongly
// convex and smooth.
inline std::pair<double, std::vector<double>> loss_and_grad(const ModelVector& m,
                                                            std::span<const BatchView> batch,
                                                            const LossSpec& spec) {
  m.arch.validate();
  spec.validate();
  require(!batch.empty(), "loss_and_grad: batch must be non-empty");
  const int F = m.arch.input_dim;
  const int H = m.arch.hidden;
  const int C = m.arch.classes;
  require(static_cast<int>(m.params.size()) == m.arch.dim(),
          "loss_and_grad: parameter size mismatch");

  std::vector<double> grad(m.params.size(), 0.0);
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  for (const auto& s : batch) {
    require(static_cast<int>(s.x.size()) == F, "loss_and_grad: feature dim mismatch");
    require(s.y >= 0 && s.y < C, "loss_and_grad: label out of range");
    std::vector<double> h;
    std::vector<double> probs = detail::softmax(detail::logits_of(m, s.x, &h));
    loss += -std::log(std::max(probs[static_cast<std::size_t>(s.y)], 1e-300)) * inv_n;

    std::vector<double> dz(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
      dz[static_cast<std::size_t>(c)] =
          (probs[static_cast<std::size_t>(c)] - (c == s.y ? 1.0 : 0.0)) * inv_n;
    }

    if (H == 0) {
      for (int c = 0; c < C; ++c) {
        const double g = dz[static_cast<std::size_t>(c)];
        axpy(g, s.x, {grad.data() + static_cast<std::size_t>(c) * F, static_cast<std::size_t>(F)});
        grad[static_cast<std::size_t>(F) * C + static_cast<std::size_t>(c)] += g;
      }
    } else {
      const double* w2 = m.params.data() + F * H + H;
      double* gw1 = grad.data();
      double* gb1 = grad.data() + F * H;
      double* gw2 = grad.data() + F * H + H;
      double* gb2 = gw2 + H * C;
      std::vector<double> dh(static_cast<std::size_t>(H), 0.0);
      for (int c = 0; c < C; ++c) {
        const double g = dz[static_cast<std::size_t>(c)];
        for (int i = 0; i < H; ++i) {
          gw2[static_cast<std::size_t>(c) * H + i] += g * h[static_cast<std::size_t>(i)];
          dh[static_cast<std::size_t>(i)] += g * w2[static_cast<std::size_t>(c) * H + i];
        }
        gb2[c] += g;
      }
      for (int i = 0; i < H; ++i) {
        const double hi = h[static_cast<std::size_t>(i)];
        const double di = dh[static_cast<std::size_t>(i)] * (1.0 - hi * hi);
        axpy(di, s.x, {gw1 + static_cast<std::size_t>(i) * F, static_cast<std::size_t>(F)});
        gb1[i] += di;
      }
    }
  }

  if (spec.l2 > 0.0) {
    loss += 0.5 * spec.l2 * dot(m.params, m.params);
    axpy(spec.l2, m.params, grad);
  }
  return {loss, std::move(grad)};
}

// Same contract as semantic_distance, over the flattened parameters.
inline double model_distance(const ModelVector& a, const ModelVector& b, DistanceMetric metric) {
  require(a.arch == b.arch, "model_distance: architecture mismatch");
  if (metric == DistanceMetric::euclidean) {
    return std::sqrt(squared_distance(a.params, b.params));
  }
  const double na = norm2(a.params);
  const double nb = norm2(b.params);
  require(na > 0.0 && nb > 0.0, "model_distance: cosine undefined for a zero parameter vector");
  const double c = dot(a.params, b.params) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

// --- checkpoints -------------------------------------------------------------------
// "PSANMDL1" + u32 input_dim, hidden, classes + u64 count + f64 params (LE).

inline void write_model(const ModelVector& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "write_model: cannot open " + path);
  os.write("PSANMDL1", 8);
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(m.arch.input_dim),
                                 static_cast<std::uint32_t>(m.arch.hidden),
                                 static_cast<std::uint32_t>(m.arch.classes)};
  os.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  const std::uint64_t n = m.params.size();
  os.write(reinterpret_cast<const char*>(&n), sizeof(n));
  os.write(reinterpret_cast<const char*>(m.params.data()),
           static_cast<std::streamsize>(n * sizeof(double)));
  require(os.good(), "write_model: write failed for " + path);
}

inline ModelVector read_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "read_model: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  require(is.good() && std::memcmp(magic, "PSANMDL1", 8) == 0,
          "read_model: " + path + " is not a version-1 model checkpoint");
  std::uint32_t dims[3];
  is.read(reinterpret_cast<char*>(dims), sizeof(dims));
  std::uint64_t n = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof(n));
  ModelVector m;
  m.arch = {static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2])};
  m.arch.validate();
  require(n == static_cast<std::uint64_t>(m.arch.dim()),
          "read_model: parameter count does not match the declared architecture");
  m.params.resize(n);
  is.read(reinterpret_cast<char*>(m.params.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  require(is.gcount() == static_cast<std::streamsize>(n * sizeof(double)),
          "read_model: truncated checkpoint " + path);
  return m;
}

}  // namespace psan
