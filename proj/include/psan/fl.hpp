#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "psan/common.hpp"
#include "psan/model.hpp"

namespace psan {

// Attention-inducing regularizer R(x) = 1 - exp(-x/sigma) over squared model
// distances, and its derivative. R' is strictly decreasing, so nearer models
// couple harder.
inline double attention_r(double x, double sigma) {
  require(x >= 0.0, "attention_r: argument must be >= 0");
  require(sigma > 0.0, "attention_r: sigma must be > 0");
  return 1.0 - std::exp(-x / sigma);
}

inline double attention_r_prime(double x, double sigma) {
  require(x >= 0.0, "attention_r_prime: argument must be >= 0");
  require(sigma > 0.0, "attention_r_prime: sigma must be > 0");
  return std::exp(-x / sigma) / sigma;
}

struct RegularizerSpec {
  double gamma = 1.0;        // weight of the coupling term in the objective
  double sigma = 0.0;        // attention bandwidth; 0 = per-round median heuristic
  double lambda = 0.0;       // server-step weight; 0 = gamma
  double alpha = 0.0;        // server gradient step size when auto_alpha is false
  bool auto_alpha = true;    // derive alpha each round from the admissible maximum
  double alpha_safety = 0.1; // fraction of the admissible maximum used

  double effective_lambda() const { return lambda > 0.0 ? lambda : gamma; }

  void validate() const {
    require(gamma >= 0.0, "regularizer: gamma must be >= 0");
    require(sigma >= 0.0, "regularizer: sigma must be >= 0");
    require(lambda >= 0.0, "regularizer: lambda must be >= 0");
    require(alpha >= 0.0, "regularizer: alpha must be >= 0");
    require(alpha_safety > 0.0 && alpha_safety <= 1.0,
            "regularizer: alpha_safety must be in (0, 1]");
  }
};

struct TrainSchedule {
  int rounds = 250;
  int epochs = 5;       // local passes per round
  int batch = 6;
  double lr = 0.005;
  std::uint64_t seed = 1;

  void validate() const {
    require(rounds >= 0, "schedule: rounds must be >= 0");
    require(epochs >= 1, "schedule: epochs must be >= 1");
    require(batch >= 1, "schedule: batch must be >= 1");
    require(lr >= 0.0, "schedule: lr must be >= 0");
  }
};

struct RoundLog {
  int round = 0;
  double objective = 0.0;                    // J at the post-step models
  std::vector<double> receiver_losses;       // F_k per source
  std::vector<std::vector<double>> coeffs;   // coupling matrix xi (empty for baselines)
  double wall_ms = 0.0;                      // not serialized: metrics stay byte-reproducible
};

// E passes of mini-batch SGD with without-replacement shuffling per pass.
// Every pass shuffles the canonical index order, so the stream is the only
// carried state and E passes equal E chained single-pass calls.
inline ModelVector local_update(ModelVector model, const ReceiverDataset& data, int epochs,
                                int batch, double lr, const LossSpec& loss, rng::Stream& strm) {
  require(!data.train_indices().empty(),
          "local_update: receiver " + std::to_string(data.receiver_id()) + " has no train split");
  for (int e = 0; e < epochs; ++e) {
    std::vector<std::size_t> order = data.train_indices();
    strm.shuffle(order);
    for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(batch)) {
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(batch));
      const auto view = make_batch(data, {order.data() + lo, hi - lo});
      auto [l, g] = loss_and_grad(model, view, loss);
      axpy(-lr, g, model.params);
    }
  }
  return model;
}

// Resolved per-round coupling parameters.
struct ServerStepParams {
  double sigma = 1.0;
  double lambda = 1.0;
  double alpha = 0.0;
};

namespace detail {

inline std::vector<std::vector<double>> pairwise_sqdist(const std::vector<ModelVector>& models) {
  const std::size_t k = models.size();
  std::vector<std::vector<double>> d(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      d[i][j] = d[j][i] = squared_distance(models[i].params, models[j].params);
    }
  }
  return d;
}

}  // namespace detail

// Median of pairwise squared distances; the default attention bandwidth.
inline double median_sqdist(const std::vector<ModelVector>& models) {
  std::vector<double> v;
  for (std::size_t i = 0; i < models.size(); ++i) {
    for (std::size_t j = i + 1; j < models.size(); ++j) {
      v.push_back(squared_distance(models[i].params, models[j].params));
    }
  }
  if (v.empty()) return 1.0;
  std::sort(v.begin(), v.end());
  const double med = v.size() % 2 == 1 ? v[v.size() / 2]
                                       : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  return med > 0.0 ? med : 1.0;
}

// Largest admissible server step: keeps every diagonal coupling coefficient
// nonnegative. Returns +inf when the coupling term vanishes.
inline double max_admissible_alpha(const std::vector<ModelVector>& models, double sigma,
                                   double lambda) {
  if (lambda == 0.0) return std::numeric_limits<double>::infinity();
  const auto d = detail::pairwise_sqdist(models);
  double max_row = 0.0;
  for (std::size_t i = 0; i < models.size(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < models.size(); ++j) {
      if (j != i) row += attention_r_prime(d[i][j], sigma);
    }
    max_row = std::max(max_row, row);
  }
  if (max_row == 0.0) return std::numeric_limits<double>::infinity();
  return 1.0 / (2.0 * lambda * max_row);
}

inline double resolve_alpha(const RegularizerSpec& reg, const std::vector<ModelVector>& models,
                            double sigma) {
  const double lambda = reg.effective_lambda();
  if (!reg.auto_alpha) return reg.alpha;
  if (lambda == 0.0) return 0.0;
  const double amax = max_admissible_alpha(models, sigma, lambda);
  return std::isfinite(amax) ? reg.alpha_safety * amax : 0.0;
}

// One coordination step: couples the uploaded models through the attention
// regularizer. Computes both the gradient form and the equivalent convex
// combination with coefficients
//   xi_ij = 2*alpha*lambda*R'(||w_i - w_j||^2)          (i != j)
//   xi_ii = 1 - sum_j xi_ij
// and verifies they agree to 1e-10. Returns the combined models and xi.
inline std::pair<std::vector<ModelVector>, std::vector<std::vector<double>>> server_step(
    const std::vector<ModelVector>& models, const ServerStepParams& p) {
  const std::size_t k = models.size();
  require(k >= 1, "server_step: need at least one model");
  const auto d = detail::pairwise_sqdist(models);

  std::vector<std::vector<double>> xi(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i) continue;
      xi[i][j] = p.alpha == 0.0 || p.lambda == 0.0
                     ? 0.0
                     : 2.0 * p.alpha * p.lambda * attention_r_prime(d[i][j], p.sigma);
      row += xi[i][j];
    }
    if (row > 1.0 + 1e-12) {
      const double amax = p.alpha / row;  // scaling alpha by 1/row makes this row admissible
      throw InvariantError(
          "server_step: step size invariant violated at receiver " + std::to_string(i) +
          " (off-diagonal mass " + std::to_string(row) +
          "); maximal admissible alpha for this round is " + std::to_string(amax));
    }
    xi[i][i] = 1.0 - row;
  }

  const std::size_t dim = models[0].params.size();
  std::vector<ModelVector> combined(k);
  double max_dev = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    // convex combination form
    combined[i].arch = models[i].arch;
    combined[i].params.assign(dim, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      if (xi[i][j] != 0.0) axpy(xi[i][j], models[j].params, combined[i].params);
    }
    // direct gradient form on the coupling term
    std::vector<double> grad_form = models[i].params;
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i || p.alpha == 0.0 || p.lambda == 0.0) continue;
      const double c = p.alpha * p.lambda * attention_r_prime(d[i][j], p.sigma) * 2.0;
      for (std::size_t t = 0; t < dim; ++t) {
        grad_form[t] -= c * (models[i].params[t] - models[j].params[t]);
      }
    }
    for (std::size_t t = 0; t < dim; ++t) {
      max_dev = std::max(max_dev, std::abs(grad_form[t] - combined[i].params[t]));
    }
    double row_sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      require_invariant(xi[i][j] >= -1e-12, "server_step: negative coupling coefficient");
      row_sum += xi[i][j];
    }
    require_invariant(std::abs(row_sum - 1.0) <= 1e-9,
                      "server_step: coupling row does not sum to 1");
  }
  require_invariant(max_dev <= 1e-10,
                    "server_step: gradient form and convex combination disagree by " +
                        std::to_string(max_dev));
  return {std::move(combined), std::move(xi)};
}

// --- the multi-task objective -----------------------------------------------------

// J(models) = sum_k F_k + gamma * sum_k sum_{j != k} R(||w_k - w_j||^2),
// with F_k the full train-split loss of receiver k.
inline double objective_value(const std::vector<ModelVector>& models,
                              const std::vector<const ReceiverDataset*>& data,
                              const LossSpec& loss, double gamma, double sigma,
                              std::vector<double>* receiver_losses = nullptr) {
  double j = 0.0;
  if (receiver_losses) receiver_losses->clear();
  for (std::size_t k = 0; k < models.size(); ++k) {
    const auto& idx = data[k]->train_indices();
    const auto batch = make_batch(*data[k], idx);
    const double fk = loss_and_grad(models[k], batch, loss).first;
    if (receiver_losses) receiver_losses->push_back(fk);
    j += fk;
  }
  if (gamma > 0.0) {
    const auto d = detail::pairwise_sqdist(models);
    for (std::size_t a = 0; a < models.size(); ++a) {
      for (std::size_t b = 0; b < models.size(); ++b) {
        if (a != b) j += gamma * attention_r(d[a][b], sigma);
      }
    }
  }
  return j;
}

struct TrainResult {
  std::vector<ModelVector> models;
  std::vector<RoundLog> logs;
  double resolved_sigma = 1.0;  // bandwidth actually used (after the median heuristic)
};

using RoundObserver = std::function<void(int round, const std::vector<ModelVector>&)>;

// Source-receiver phase: T rounds of {broadcast, parallel local update,
// upload, coupling step}. All randomness is keyed by (seed, receiver, round),
// so results do not depend on jobs. The observer, when set, sees the models
// after every round (and once at round -1 with the initial broadcast).
inline TrainResult train_sources(const std::vector<const ReceiverDataset*>& data,
                                 const Arch& arch, const TrainSchedule& sched,
                                 const RegularizerSpec& reg, const LossSpec& loss, int jobs = 1,
                                 const RoundObserver& observer = {}) {
  sched.validate();
  reg.validate();
  loss.validate();
  require(data.size() >= 2, "train_sources: at least 2 source receivers required");
  for (const auto* d : data) {
    require(d->is_source(), "train_sources: receiver " + std::to_string(d->receiver_id()) +
                                " is not a source");
  }

  auto init_strm = rng::derive(sched.seed, "init");
  const ModelVector init = init_model(arch, init_strm);
  std::vector<ModelVector> models(data.size(), init);
  if (observer) observer(-1, models);

  TrainResult result;
  double sigma = reg.sigma;
  const double lambda = reg.effective_lambda();

  for (int t = 0; t < sched.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for(data.size(), jobs, [&](std::size_t k) {
      auto strm = rng::derive(sched.seed, "sgd",
                              static_cast<std::uint64_t>(data[k]->receiver_id()),
                              static_cast<std::uint64_t>(t));
      models[k] = local_update(std::move(models[k]), *data[k], sched.epochs, sched.batch,
                               sched.lr, loss, strm);
    });

    // With sigma unset the bandwidth tracks the current model spread. A
    // one-shot median at round 0 degenerates: models that just left a shared
    // broadcast sit atop each other and the tiny bandwidth would switch the
    // coupling off for the rest of the run.
    if (reg.sigma == 0.0) sigma = median_sqdist(models);

    ServerStepParams params;
    params.sigma = sigma > 0.0 ? sigma : 1.0;
    params.lambda = lambda;
    params.alpha = resolve_alpha(reg, models, params.sigma);
    auto [stepped, xi] = server_step(models, params);
    models = std::move(stepped);

    RoundLog log;
    log.round = t;
    log.objective =
        objective_value(models, data, loss, reg.gamma, params.sigma, &log.receiver_losses);
    log.coeffs = std::move(xi);
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    result.logs.push_back(std::move(log));
    if (observer) observer(t, models);
  }

  result.models = std::move(models);
  result.resolved_sigma = sigma > 0.0 ? sigma : 1.0;
  return result;
}

// FedAvg baseline: same broadcast/local-update loop, but the server replaces
// every model with the data-size-weighted average.
inline TrainResult train_fedavg(const std::vector<const ReceiverDataset*>& data, const Arch& arch,
                                const TrainSchedule& sched, const LossSpec& loss, int jobs = 1,
                                const RoundObserver& observer = {}) {
  sched.validate();
  loss.validate();
  require(!data.empty(), "train_fedavg: at least 1 receiver required");

  auto init_strm = rng::derive(sched.seed, "init");
  ModelVector global = init_model(arch, init_strm);
  if (observer) observer(-1, {global});

  TrainResult result;
  std::vector<ModelVector> locals(data.size(), global);
  double total = 0.0;
  std::vector<double> weights(data.size());
  for (std::size_t k = 0; k < data.size(); ++k) {
    weights[k] = static_cast<double>(data[k]->train_indices().size());
    total += weights[k];
  }
  require(total > 0.0, "train_fedavg: no training data");

  for (int t = 0; t < sched.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for(data.size(), jobs, [&](std::size_t k) {
      auto strm = rng::derive(sched.seed, "sgd",
                              static_cast<std::uint64_t>(data[k]->receiver_id()),
                              static_cast<std::uint64_t>(t));
      locals[k] = local_update(global, *data[k], sched.epochs, sched.batch, sched.lr, loss, strm);
    });
    std::vector<double> avg(global.params.size(), 0.0);
    for (std::size_t k = 0; k < data.size(); ++k) {
      axpy(weights[k] / total, locals[k].params, avg);
    }
    global.params = std::move(avg);

    RoundLog log;
    log.round = t;
    double j = 0.0;
    for (std::size_t k = 0; k < data.size(); ++k) {
      const auto batch = make_batch(*data[k], data[k]->train_indices());
      const double fk = loss_and_grad(global, batch, loss).first;
      log.receiver_losses.push_back(fk);
      j += fk;
    }
    log.objective = j;
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    result.logs.push_back(std::move(log));
    if (observer) observer(t, {global});
  }
  result.models.assign(1, std::move(global));
  return result;
}

// Local baseline: the same per-round stream layout as the federated loops but
// no server step, so a gamma = 0 (or alpha = 0) federated run is bitwise equal
// to this.
inline ModelVector train_local(const ReceiverDataset& data, const Arch& arch,
                               const TrainSchedule& sched, const LossSpec& loss) {
  sched.validate();
  loss.validate();
  require(!data.train_indices().empty(),
          "train_local: receiver " + std::to_string(data.receiver_id()) + " has no train split");
  auto init_strm = rng::derive(sched.seed, "init");
  ModelVector model = init_model(arch, init_strm);
  for (int t = 0; t < sched.rounds; ++t) {
    auto strm = rng::derive(sched.seed, "sgd", static_cast<std::uint64_t>(data.receiver_id()),
                            static_cast<std::uint64_t>(t));
    model = local_update(std::move(model), data, sched.epochs, sched.batch, sched.lr, loss, strm);
  }
  return model;
}

// --- metrics persistence -------------------------------------------------------------
// One round per line. Wall times are intentionally left out so reruns of a
// manifest produce identical bytes.

inline void write_round_logs(const std::vector<RoundLog>& logs, const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "write_round_logs: cannot open " + path);
  for (const auto& log : logs) {
    nlohmann::json j;
    j["round"] = log.round;
    j["J"] = log.objective;
    j["F"] = log.receiver_losses;
    if (!log.coeffs.empty()) j["xi"] = log.coeffs;
    os << j.dump() << '\n';
  }
  require(os.good(), "write_round_logs: write failed for " + path);
}

inline std::vector<RoundLog> read_round_logs(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), "read_round_logs: cannot open " + path);
  std::vector<RoundLog> logs;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    RoundLog log;
    log.round = j.at("round").get<int>();
    log.objective = j.at("J").get<double>();
    log.receiver_losses = j.at("F").get<std::vector<double>>();
    if (j.contains("xi")) log.coeffs = j.at("xi").get<std::vector<std::vector<double>>>();
    logs.push_back(std::move(log));
  }
  return logs;
}

}  // namespace psan
