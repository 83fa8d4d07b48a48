#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "psan/common.hpp"
#include "psan/model.hpp"
#include "psan/rng.hpp"
#include "psan/semantics.hpp"

namespace psan {

// One supervised pair for the distance regressor: semantic distance between
// two source receivers and the distance of their trained models.
struct TrainingPair {
  double s = 0.0;         // semantic distance S(emb_i, emb_j)
  double m_target = 0.0;  // model distance M(model_i, model_j)
  int i = 0;
  int j = 0;
};

// Scalar regressor predicting model distance from semantic distance:
//   g(s) = m_scale * (w2 . tanh(w1*z + b1) + b2) + m_mean,  z = (s - s_mean)/s_scale
// Params flatten as [w1 (h), b1 (h), w2 (h), b2 (1)]. The affine input/target
// standardization is fitted from the training pairs and frozen; without it the
// cosine metric's compressed distance range (all-positive embeddings cluster
// near similarity 1) starves the tanh units of resolution.
struct MappingModel {
  DistanceMetric metric = DistanceMetric::cosine;
  int hidden = 8;
  std::vector<double> params;
  double s_mean = 0.0, s_scale = 1.0;
  double m_mean = 0.0, m_scale = 1.0;
  double train_rmse = 0.0;

  int dim() const { return 3 * hidden + 1; }
};

// All ordered pairs i != j. Symmetric duplicates are kept on purpose: they are
// harmless under least squares and keep the index set literal.
inline std::vector<TrainingPair> build_pairs(const std::vector<std::vector<double>>& embeddings,
                                             const std::vector<ModelVector>& models,
                                             DistanceMetric metric) {
  require(embeddings.size() == models.size(), "build_pairs: embeddings/models size mismatch");
  require(embeddings.size() >= 2, "build_pairs: at least 2 source receivers required");
  std::vector<TrainingPair> pairs;
  pairs.reserve(embeddings.size() * (embeddings.size() - 1));
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    for (std::size_t j = 0; j < embeddings.size(); ++j) {
      if (i == j) continue;
      TrainingPair p;
      p.s = semantic_distance(embeddings[i], embeddings[j], metric);
      p.m_target = model_distance(models[i], models[j], metric);
      p.i = static_cast<int>(i);
      p.j = static_cast<int>(j);
      pairs.push_back(p);
    }
  }
  return pairs;
}

namespace detail {

inline double mapping_raw_eval(const MappingModel& m, double s) {
  const int h = m.hidden;
  const double* w1 = m.params.data();
  const double* b1 = w1 + h;
  const double* w2 = b1 + h;
  const double b2 = m.params[static_cast<std::size_t>(3 * h)];
  const double z = (s - m.s_mean) / m.s_scale;
  double out = b2;
  for (int i = 0; i < h; ++i) out += w2[i] * std::tanh(w1[i] * z + b1[i]);
  return out * m.m_scale + m.m_mean;
}

}  // namespace detail

// Mean squared residual over the pairs (the least-squares objective scaled by
// 1/|pairs|, same minimizer) and its gradient in the mapping parameters. The
// frozen standardization constants are part of the model, so loss and
// predictions live on the original target scale.
inline std::pair<double, std::vector<double>> mapping_loss_and_grad(
    const MappingModel& m, const std::vector<TrainingPair>& pairs) {
  require(!pairs.empty(), "mapping_loss_and_grad: no pairs");
  const int h = m.hidden;
  const double* w1 = m.params.data();
  const double* b1 = w1 + h;
  const double* w2 = b1 + h;
  std::vector<double> grad(m.params.size(), 0.0);
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  for (const auto& p : pairs) {
    const double z = (p.s - m.s_mean) / m.s_scale;
    std::vector<double> th(static_cast<std::size_t>(h));
    double net = m.params[static_cast<std::size_t>(3 * h)];
    for (int i = 0; i < h; ++i) {
      th[static_cast<std::size_t>(i)] = std::tanh(w1[i] * z + b1[i]);
      net += w2[i] * th[static_cast<std::size_t>(i)];
    }
    const double r = net * m.m_scale + m.m_mean - p.m_target;
    loss += r * r * inv_n;
    const double g = 2.0 * r * inv_n * m.m_scale;
    for (int i = 0; i < h; ++i) {
      const double ti = th[static_cast<std::size_t>(i)];
      const double dtanh = 1.0 - ti * ti;
      grad[static_cast<std::size_t>(i)] += g * w2[i] * dtanh * z;           // w1
      grad[static_cast<std::size_t>(h + i)] += g * w2[i] * dtanh;           // b1
      grad[static_cast<std::size_t>(2 * h + i)] += g * ti;                  // w2
    }
    grad[static_cast<std::size_t>(3 * h)] += g;                             // b2
  }
  return {loss, std::move(grad)};
}

// Full-batch gradient descent on the squared-residual objective. Requires at
// least two distinct semantic distances; a degenerate pair set cannot anchor
// the regressor.
inline MappingModel fit_mapping(const std::vector<TrainingPair>& pairs, DistanceMetric metric,
                                int hidden, int epochs, double lr, std::uint64_t seed) {
  require(!pairs.empty(), "fit_mapping: no training pairs");
  require(hidden >= 1 && epochs >= 1 && lr > 0.0, "fit_mapping: bad hyperparameters");
  double s_min = pairs.front().s, s_max = pairs.front().s;
  for (const auto& p : pairs) {
    require(std::isfinite(p.s) && std::isfinite(p.m_target), "fit_mapping: non-finite pair");
    s_min = std::min(s_min, p.s);
    s_max = std::max(s_max, p.s);
  }
  require(s_max - s_min > 1e-12,
          "fit_mapping: all semantic distances are identical; increase scenario heterogeneity "
          "so the regressor has a usable input range");

  MappingModel m;
  m.metric = metric;
  m.hidden = hidden;
  m.params.assign(static_cast<std::size_t>(m.dim()), 0.0);

  double s_sum = 0.0, m_sum = 0.0;
  for (const auto& p : pairs) {
    s_sum += p.s;
    m_sum += p.m_target;
  }
  m.s_mean = s_sum / static_cast<double>(pairs.size());
  m.m_mean = m_sum / static_cast<double>(pairs.size());
  double s_var = 0.0, m_var = 0.0;
  for (const auto& p : pairs) {
    s_var += (p.s - m.s_mean) * (p.s - m.s_mean);
    m_var += (p.m_target - m.m_mean) * (p.m_target - m.m_mean);
  }
  m.s_scale = std::sqrt(s_var / static_cast<double>(pairs.size()));
  m.m_scale = std::max(std::sqrt(m_var / static_cast<double>(pairs.size())), 1e-12);

  auto strm = rng::derive(seed, "mapfit");
  for (int i = 0; i < 2 * hidden; ++i) {
    m.params[static_cast<std::size_t>(i)] = strm.uniform(-0.5, 0.5);  // w1, b1
  }
  // w2 and b2 start at zero: with the target standardization the initial model
  // IS the best constant predictor and monotone descent can only improve on it

  double step = lr;
  auto [loss, grad] = mapping_loss_and_grad(m, pairs);
  for (int e = 0; e < epochs; ++e) {
    MappingModel trial = m;
    axpy(-step, grad, trial.params);
    auto [trial_loss, trial_grad] = mapping_loss_and_grad(trial, pairs);
    if (trial_loss <= loss && all_finite(trial.params)) {
      m.params = std::move(trial.params);
      loss = trial_loss;
      grad = std::move(trial_grad);
      step = std::min(step * 1.1, 16.0 * lr);
    } else {
      step *= 0.5;
      require(step > 1e-14 * lr, "fit_mapping: step collapsed; objective is ill-conditioned");
    }
  }
  m.train_rmse = std::sqrt(loss);
  return m;
}

// Predicted model distance, clamped to the metric's valid range.
inline double eval_mapping(const MappingModel& m, double s) {
  require(static_cast<int>(m.params.size()) == m.dim(), "eval_mapping: model not fitted");
  const double raw = detail::mapping_raw_eval(m, s);
  if (m.metric == DistanceMetric::cosine) return std::clamp(raw, -1.0, 1.0);
  return std::max(raw, 0.0);
}

// --- persistence ---------------------------------------------------------------------
// "PSANMAP1" + u8 metric + u32 hidden + f64 standardization (4) + f64
// train_rmse + f64 params (LE).

inline void write_mapping(const MappingModel& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "write_mapping: cannot open " + path);
  os.write("PSANMAP1", 8);
  const std::uint8_t metric = m.metric == DistanceMetric::cosine ? 0 : 1;
  os.write(reinterpret_cast<const char*>(&metric), 1);
  const std::uint32_t h = static_cast<std::uint32_t>(m.hidden);
  os.write(reinterpret_cast<const char*>(&h), sizeof(h));
  const double std_consts[4] = {m.s_mean, m.s_scale, m.m_mean, m.m_scale};
  os.write(reinterpret_cast<const char*>(std_consts), sizeof(std_consts));
  os.write(reinterpret_cast<const char*>(&m.train_rmse), sizeof(double));
  os.write(reinterpret_cast<const char*>(m.params.data()),
           static_cast<std::streamsize>(m.params.size() * sizeof(double)));
  require(os.good(), "write_mapping: write failed for " + path);
}

inline MappingModel read_mapping(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "read_mapping: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  require(is.good() && std::memcmp(magic, "PSANMAP1", 8) == 0,
          "read_mapping: " + path + " is not a version-1 mapping checkpoint");
  MappingModel m;
  std::uint8_t metric = 0;
  is.read(reinterpret_cast<char*>(&metric), 1);
  m.metric = metric == 0 ? DistanceMetric::cosine : DistanceMetric::euclidean;
  std::uint32_t h = 0;
  is.read(reinterpret_cast<char*>(&h), sizeof(h));
  m.hidden = static_cast<int>(h);
  double std_consts[4] = {0, 1, 0, 1};
  is.read(reinterpret_cast<char*>(std_consts), sizeof(std_consts));
  m.s_mean = std_consts[0];
  m.s_scale = std_consts[1];
  m.m_mean = std_consts[2];
  m.m_scale = std_consts[3];
  is.read(reinterpret_cast<char*>(&m.train_rmse), sizeof(double));
  require(m.hidden >= 1 && m.s_scale > 0 && m.m_scale > 0, "read_mapping: bad header");
  m.params.resize(static_cast<std::size_t>(m.dim()));
  is.read(reinterpret_cast<char*>(m.params.data()),
          static_cast<std::streamsize>(m.params.size() * sizeof(double)));
  require(is.gcount() == static_cast<std::streamsize>(m.params.size() * sizeof(double)),
          "read_mapping: truncated checkpoint " + path);
  return m;
}

// Diagnostics: one row per training pair with the fitted prediction.
inline void write_mapping_csv(const MappingModel& m, const std::vector<TrainingPair>& pairs,
                              const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "write_mapping_csv: cannot open " + path);
  os.precision(17);
  os << "i,j,s,m_target,g_of_s\n";
  for (const auto& p : pairs) {
    os << p.i << ',' << p.j << ',' << p.s << ',' << p.m_target << ',' << eval_mapping(m, p.s)
       << '\n';
  }
}

}  // namespace psan
