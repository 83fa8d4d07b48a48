#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "psan/common.hpp"
#include "psan/fl.hpp"
#include "psan/mapping.hpp"

namespace psan {

// Aggregation coefficients of one label-free receiver over the source models.
struct AggregationWeights {
  int target_id = 0;
  std::vector<double> semantic_dist;  // S(source, target) per source
  std::vector<double> predicted;      // g(S) per source
  std::vector<double> raw;            // R'(distance argument) per source
  std::vector<double> coeffs;         // normalized, on the simplex
};

// Attention bandwidth for the aggregation step: the median heuristic applied
// in the geometry the distance argument lives in. For the cosine metric that
// is the squared unit-vector distance 2*(1 - M(w_i, w_j)); for the euclidean
// metric the squared model distance. The raw-parameter bandwidth the training
// loop uses lives on a different scale and would flatten the weights.
inline double transfer_bandwidth(const std::vector<ModelVector>& source_models,
                                 DistanceMetric metric) {
  std::vector<double> v;
  for (std::size_t i = 0; i < source_models.size(); ++i) {
    for (std::size_t j = i + 1; j < source_models.size(); ++j) {
      const double m = model_distance(source_models[i], source_models[j], metric);
      v.push_back(metric == DistanceMetric::cosine ? 2.0 * (1.0 - m) : m * m);
    }
  }
  if (v.empty()) return 1.0;
  std::sort(v.begin(), v.end());
  const double med = v.size() % 2 == 1 ? v[v.size() / 2]
                                       : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  return med > 0.0 ? med : 1.0;
}

// Raw weight per source is R' applied to a squared model
// distance predicted from the semantic distance. The regressor predicts in the
// chosen metric, so its output is converted first:
//   cosine     predicted similarity c -> squared distance 2*(1 - c)
//              (the squared Euclidean distance of unit vectors at angle c)
//   euclidean  predicted distance d   -> d^2
// Coefficients are normalized onto the simplex; the normalization is computed
// with the common exp factor cancelled so far-away sources cannot underflow
// the whole row to zero.
inline AggregationWeights compute_weights(const std::vector<double>& target_embedding,
                                          const std::vector<std::vector<double>>& source_embeddings,
                                          const MappingModel& mapping, double sigma,
                                          DistanceMetric metric, int target_id = 0) {
  require(!source_embeddings.empty(), "compute_weights: no source embeddings");
  require(mapping.metric == metric,
          "compute_weights: mapping was fitted with metric \"" + to_string(mapping.metric) +
              "\" but \"" + to_string(metric) + "\" was requested");
  require(sigma > 0.0, "compute_weights: sigma must be > 0");

  AggregationWeights w;
  w.target_id = target_id;
  const std::size_t n = source_embeddings.size();
  std::vector<double> dist_arg(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double s = semantic_distance(source_embeddings[k], target_embedding, metric);
    const double g = eval_mapping(mapping, s);
    dist_arg[k] = metric == DistanceMetric::cosine ? 2.0 * (1.0 - g) : g * g;
    w.semantic_dist.push_back(s);
    w.predicted.push_back(g);
    w.raw.push_back(attention_r_prime(dist_arg[k], sigma));
  }
  double d_min = dist_arg[0];
  for (double d : dist_arg) d_min = std::min(d_min, d);
  double total = 0.0;
  w.coeffs.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    w.coeffs[k] = std::exp(-(dist_arg[k] - d_min) / sigma);  // == raw_k / raw at d_min
    total += w.coeffs[k];
  }
  require_invariant(total > 0.0, "compute_weights: all raw weights vanished");
  for (auto& c : w.coeffs) c /= total;
  return w;
}

// Coordinate-wise convex combination of the source models.
inline ModelVector aggregate(const AggregationWeights& w, const std::vector<ModelVector>& models) {
  require(!models.empty() && models.size() == w.coeffs.size(),
          "aggregate: weights/models size mismatch");
  for (const auto& m : models) {
    require(m.arch == models.front().arch, "aggregate: architecture mismatch among sources");
  }
  double sum = 0.0;
  for (double c : w.coeffs) {
    require(c >= -1e-12, "aggregate: negative coefficient");
    sum += c;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "aggregate: coefficients are not on the simplex");

  ModelVector out;
  out.arch = models.front().arch;
  out.params.assign(models.front().params.size(), 0.0);
  for (std::size_t k = 0; k < models.size(); ++k) {
    axpy(w.coeffs[k], models[k].params, out.params);
  }
  return out;
}

// Audit trail: one row per (target, source).
inline void write_weights_csv(const std::vector<AggregationWeights>& all,
                              const std::vector<int>& source_ids, const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "write_weights_csv: cannot open " + path);
  os.precision(17);
  os << "target_id,source_id,semantic_distance,predicted_model_distance,raw_weight,coefficient\n";
  for (const auto& w : all) {
    for (std::size_t k = 0; k < w.coeffs.size(); ++k) {
      os << w.target_id << ',' << source_ids[k] << ',' << w.semantic_dist[k] << ','
         << w.predicted[k] << ',' << w.raw[k] << ',' << w.coeffs[k] << '\n';
    }
  }
}

}  // namespace psan
