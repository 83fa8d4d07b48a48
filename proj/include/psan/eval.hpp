#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "psan/dataset.hpp"
#include "psan/fl.hpp"
#include "psan/mapping.hpp"
#include "psan/model.hpp"
#include "psan/scenario.hpp"
#include "psan/transfer.hpp"

namespace psan {

// Fraction of argmax-correct predictions on the test split.
inline double evaluate(const ModelVector& model, const ReceiverDataset& data) {
  const auto& idx = data.test_indices();
  require(!idx.empty(),
          "evaluate: receiver " + std::to_string(data.receiver_id()) + " has no test split");
  std::size_t correct = 0;
  for (std::size_t i : idx) {
    const auto probs = predict(model, data.features(i));
    if (argmax_class(probs) == data.label(i)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// --- optimality gap -----------------------------------------------------------------

struct GapEstimate {
  int receiver_id = 0;
  double f_model = 0.0;
  double f_oracle = 0.0;
  double gap = 0.0;
};

// Smoothness bound for the convex arch: the softmax Hessian is dominated by
// (1/2) I kron G with G the Gram matrix of bias-augmented features, so
// L = lambda_max(G)/2 + l2. lambda_max by power iteration.
inline double smoothness_bound(std::span<const BatchView> batch, double l2) {
  const std::size_t dim = batch.front().x.size() + 1;
  std::vector<std::vector<double>> aug;
  aug.reserve(batch.size());
  for (const auto& s : batch) {
    std::vector<double> v(s.x.begin(), s.x.end());
    v.push_back(1.0);
    aug.push_back(std::move(v));
  }
  std::vector<double> v(dim, 1.0);
  double lam = 1.0;
  for (int it = 0; it < 300; ++it) {
    std::vector<double> w(dim, 0.0);
    for (const auto& a : aug) axpy(dot(a, v) / static_cast<double>(aug.size()), a, w);
    lam = norm2(w);
    if (lam == 0.0) break;
    for (auto& x : w) x /= lam;
    v = std::move(w);
  }
  return 0.5 * lam + l2;
}

// Minimizes the receiver's full-data objective with fixed-step gradient
// descent at 1/L until the gradient norm drops below `tol`. Only trustworthy
// for the convex arch (hidden == 0) with l2 > 0, which is required.
inline ModelVector local_optimum(const ReceiverDataset& data, const Arch& arch,
                                 const LossSpec& loss, double tol = 1e-8,
                                 long max_iters = 2000000) {
  require(arch.hidden == 0, "local_optimum: oracle requires the convex arch (hidden == 0)");
  require(loss.l2 > 0.0, "local_optimum: oracle requires l2 > 0 (strong convexity)");
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto batch = make_batch(data, all);
  require(!batch.empty(), "local_optimum: empty dataset");

  const double step = 1.0 / smoothness_bound(batch, loss.l2);
  ModelVector m = zero_model(arch);
  for (long it = 0; it < max_iters; ++it) {
    const auto g = loss_and_grad(m, batch, loss).second;
    if (norm2(g) < tol) return m;
    axpy(-step, g, m.params);
  }
  throw ValidationError("local_optimum: did not reach gradient norm " + std::to_string(tol) +
                        " within the iteration budget");
}

inline GapEstimate optimality_gap(const ModelVector& model, const ReceiverDataset& data,
                                  const LossSpec& loss) {
  const ModelVector opt = local_optimum(data, model.arch, loss);
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto batch = make_batch(data, all);
  GapEstimate g;
  g.receiver_id = data.receiver_id();
  g.f_model = loss_and_grad(model, batch, loss).first;
  g.f_oracle = loss_and_grad(opt, batch, loss).first;
  g.gap = g.f_model - g.f_oracle;
  require_invariant(g.f_oracle <= g.f_model + 1e-6,
                    "optimality_gap: oracle loss exceeds the evaluated model's loss");
  return g;
}

// --- full pipeline (one seed, in memory) ------------------------------------------------

struct PipelineResult {
  Scenario scenario;
  std::vector<ReceiverDataset> datasets;
  Arch arch;
  TrainResult psan;                        // per-source personalized models
  std::vector<ModelVector> local_models;   // per source
  ModelVector fedavg_global;
  MappingModel mapping;
  std::vector<TrainingPair> pairs;
  std::vector<AggregationWeights> weights;      // per target
  std::vector<ModelVector> target_models;       // per target
};

inline TrainSchedule schedule_from_config(const ScenarioConfig& c) {
  return {c.rounds, c.epochs, c.batch, c.lr, c.seed};
}

inline RegularizerSpec regularizer_from_config(const ScenarioConfig& c) {
  return {c.gamma, c.sigma, c.lambda, c.alpha, c.auto_alpha, c.alpha_safety};
}

inline std::vector<const ReceiverDataset*> source_views(
    const std::vector<ReceiverDataset>& dsets, int sources) {
  std::vector<const ReceiverDataset*> v;
  for (int k = 0; k < sources; ++k) v.push_back(&dsets[static_cast<std::size_t>(k)]);
  return v;
}

// Verifies the zero-shot contract: no target label was read so far.
inline void assert_zero_target_label_reads(const std::vector<ReceiverDataset>& dsets,
                                           int sources) {
  for (std::size_t k = static_cast<std::size_t>(sources); k < dsets.size(); ++k) {
    const long reads = dsets[k].label_reads();
    require_invariant(reads == 0, "zero-label guarantee violated: target receiver " +
                                      std::to_string(dsets[k].receiver_id()) + " had " +
                                      std::to_string(reads) + " label reads before evaluation");
  }
}

// gen -> train (all three modes) -> transfer, with the zero-label invariant
// checked before any evaluation. Deterministic for a given config at any jobs.
inline PipelineResult run_pipeline(const ScenarioConfig& cfg, int jobs = 1,
                                   bool with_baselines = true) {
  PipelineResult r;
  r.scenario = make_scenario(cfg, cfg.seed);
  r.datasets = build_datasets(r.scenario, jobs);
  const FeatureSpec fspec = FeatureSpec::from_config(cfg);
  r.arch = {fspec.dim(), cfg.hidden, cfg.classes};

  const TrainSchedule sched = schedule_from_config(cfg);
  const RegularizerSpec reg = regularizer_from_config(cfg);
  const LossSpec loss{cfg.l2};
  const auto sources = source_views(r.datasets, cfg.sources);

  r.psan = train_sources(sources, r.arch, sched, reg, loss, jobs);

  if (with_baselines) {
    r.local_models.resize(static_cast<std::size_t>(cfg.sources));
    parallel_for(static_cast<std::size_t>(cfg.sources), jobs, [&](std::size_t k) {
      r.local_models[k] = train_local(r.datasets[k], r.arch, sched, loss);
    });
    r.fedavg_global = train_fedavg(sources, r.arch, sched, loss, jobs).models[0];
  }

  std::vector<std::vector<double>> source_emb;
  for (int k = 0; k < cfg.sources; ++k) {
    source_emb.push_back(r.scenario.profiles[static_cast<std::size_t>(k)].embedding);
  }
  r.pairs = build_pairs(source_emb, r.psan.models, cfg.metric);
  r.mapping = fit_mapping(r.pairs, cfg.metric, cfg.mapping_hidden, cfg.mapping_epochs,
                          cfg.mapping_lr, cfg.seed);

  const double bandwidth = transfer_bandwidth(r.psan.models, cfg.metric);
  for (int k = cfg.sources; k < cfg.receiver_count(); ++k) {
    const auto& emb = r.scenario.profiles[static_cast<std::size_t>(k)].embedding;
    auto w = compute_weights(emb, source_emb, r.mapping, bandwidth, cfg.metric, k);
    r.target_models.push_back(aggregate(w, r.psan.models));
    r.weights.push_back(std::move(w));
  }

  assert_zero_target_label_reads(r.datasets, cfg.sources);
  return r;
}

// --- reports ------------------------------------------------------------------------

// Accuracy of every receiver under the three methods. For target receivers the
// "local" column is the mean accuracy of all source-local models on that
// target's test set (a no-collaboration transfer reference; targets have
// nothing to train on).
struct EvalReport {
  std::uint64_t seed = 0;
  std::string metric;
  std::vector<int> receiver_ids;
  std::vector<bool> is_source;
  std::vector<double> acc_local, acc_global, acc_psan;
  double macro_source_local = 0, macro_source_global = 0, macro_source_psan = 0;
  double macro_target_local = 0, macro_target_global = 0, macro_target_psan = 0;
};

inline EvalReport build_report(const ScenarioConfig& cfg,
                               const std::vector<ReceiverDataset>& datasets,
                               const std::vector<ModelVector>& psan_models,
                               const std::vector<ModelVector>& local_models,
                               const ModelVector& fedavg_global,
                               const std::vector<ModelVector>& target_models) {
  EvalReport rep;
  rep.seed = cfg.seed;
  rep.metric = to_string(cfg.metric);

  double src_l = 0, src_g = 0, src_p = 0, tgt_l = 0, tgt_g = 0, tgt_p = 0;
  for (int k = 0; k < cfg.receiver_count(); ++k) {
    const auto& ds = datasets[static_cast<std::size_t>(k)];
    const bool src = k < cfg.sources;
    rep.receiver_ids.push_back(k);
    rep.is_source.push_back(src);

    double a_local;
    if (src) {
      a_local = evaluate(local_models[static_cast<std::size_t>(k)], ds);
    } else {
      double acc = 0.0;
      for (const auto& lm : local_models) acc += evaluate(lm, ds);
      a_local = acc / static_cast<double>(local_models.size());
    }
    const double a_global = evaluate(fedavg_global, ds);
    const double a_psan =
        src ? evaluate(psan_models[static_cast<std::size_t>(k)], ds)
            : evaluate(target_models[static_cast<std::size_t>(k - cfg.sources)], ds);

    rep.acc_local.push_back(a_local);
    rep.acc_global.push_back(a_global);
    rep.acc_psan.push_back(a_psan);
    (src ? src_l : tgt_l) += a_local;
    (src ? src_g : tgt_g) += a_global;
    (src ? src_p : tgt_p) += a_psan;
  }
  rep.macro_source_local = src_l / cfg.sources;
  rep.macro_source_global = src_g / cfg.sources;
  rep.macro_source_psan = src_p / cfg.sources;
  if (cfg.targets > 0) {
    rep.macro_target_local = tgt_l / cfg.targets;
    rep.macro_target_global = tgt_g / cfg.targets;
    rep.macro_target_psan = tgt_p / cfg.targets;
  }
  return rep;
}

inline EvalReport build_report(const PipelineResult& p) {
  return build_report(p.scenario.config, p.datasets, p.psan.models, p.local_models,
                      p.fedavg_global, p.target_models);
}

inline double median(std::vector<double> v) {
  require(!v.empty(), "median: empty input");
  std::sort(v.begin(), v.end());
  return v.size() % 2 == 1 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

// Cell-wise median across seeds.
inline EvalReport median_report(const std::vector<EvalReport>& reports) {
  require(!reports.empty(), "median_report: no reports");
  EvalReport med = reports.front();
  const std::size_t n = med.receiver_ids.size();
  auto med_of = [&](auto getter) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(getter(r));
    return median(v);
  };
  for (std::size_t i = 0; i < n; ++i) {
    med.acc_local[i] = med_of([&](const EvalReport& r) { return r.acc_local[i]; });
    med.acc_global[i] = med_of([&](const EvalReport& r) { return r.acc_global[i]; });
    med.acc_psan[i] = med_of([&](const EvalReport& r) { return r.acc_psan[i]; });
  }
  med.macro_source_local = med_of([](const EvalReport& r) { return r.macro_source_local; });
  med.macro_source_global = med_of([](const EvalReport& r) { return r.macro_source_global; });
  med.macro_source_psan = med_of([](const EvalReport& r) { return r.macro_source_psan; });
  med.macro_target_local = med_of([](const EvalReport& r) { return r.macro_target_local; });
  med.macro_target_global = med_of([](const EvalReport& r) { return r.macro_target_global; });
  med.macro_target_psan = med_of([](const EvalReport& r) { return r.macro_target_psan; });
  med.seed = 0;
  return med;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["seed"] = r.seed;
  j["metric"] = r.metric;
  j["receivers"] = nlohmann::json::array();
  for (std::size_t i = 0; i < r.receiver_ids.size(); ++i) {
    j["receivers"].push_back({{"receiver_id", r.receiver_ids[i]},
                              {"is_source", static_cast<bool>(r.is_source[i])},
                              {"local", r.acc_local[i]},
                              {"global", r.acc_global[i]},
                              {"psan", r.acc_psan[i]}});
  }
  j["macro"] = {{"sources", {{"local", r.macro_source_local},
                             {"global", r.macro_source_global},
                             {"psan", r.macro_source_psan}}},
                {"targets", {{"local", r.macro_target_local},
                             {"global", r.macro_target_global},
                             {"psan", r.macro_target_psan}}}};
  // improvements both as absolute accuracy points and relative percentages
  auto delta = [](double a, double b) {
    nlohmann::json d;
    d["points"] = 100.0 * (a - b);
    d["relative_pct"] = b > 0 ? 100.0 * (a - b) / b : 0.0;
    return d;
  };
  j["improvement"] = {
      {"targets_psan_vs_global", delta(r.macro_target_psan, r.macro_target_global)},
      {"targets_psan_vs_local", delta(r.macro_target_psan, r.macro_target_local)},
      {"sources_psan_vs_global", delta(r.macro_source_psan, r.macro_source_global)},
      {"sources_psan_vs_local", delta(r.macro_source_psan, r.macro_source_local)}};
  return j;
}

inline void write_report_csv(const std::vector<EvalReport>& reports, const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "write_report_csv: cannot open " + path);
  os.precision(17);
  os << "seed,receiver_id,is_source,method,accuracy\n";
  for (const auto& r : reports) {
    for (std::size_t i = 0; i < r.receiver_ids.size(); ++i) {
      os << r.seed << ',' << r.receiver_ids[i] << ',' << (r.is_source[i] ? 1 : 0) << ",local,"
         << r.acc_local[i] << '\n';
      os << r.seed << ',' << r.receiver_ids[i] << ',' << (r.is_source[i] ? 1 : 0) << ",global,"
         << r.acc_global[i] << '\n';
      os << r.seed << ',' << r.receiver_ids[i] << ',' << (r.is_source[i] ? 1 : 0) << ",psan,"
         << r.acc_psan[i] << '\n';
    }
  }
}

// --- distance-metric comparison -------------------------------------------------------

// Per-round target accuracy when the transfer stage runs with cosine vs
// euclidean distances. Both arms share one training run (the coupling step
// itself is metric-free), so initialization and seeds match exactly.
struct MetricComparison {
  std::vector<int> rounds;  // completed coordination rounds per row
  std::vector<double> cosine_acc;
  std::vector<double> euclidean_acc;
  double final_cosine = 0.0;
  double final_euclidean = 0.0;
};

inline MetricComparison compare_metrics_experiment(const ScenarioConfig& cfg, int eval_every = 10,
                                                   int jobs = 1) {
  require(eval_every >= 1, "compare_metrics_experiment: eval_every must be >= 1");
  Scenario sc = make_scenario(cfg, cfg.seed);
  auto datasets = build_datasets(sc, jobs);
  const FeatureSpec fspec = FeatureSpec::from_config(cfg);
  const Arch arch{fspec.dim(), cfg.hidden, cfg.classes};
  const auto sources = source_views(datasets, cfg.sources);

  std::vector<std::pair<int, std::vector<ModelVector>>> snapshots;
  RoundObserver obs = [&](int round, const std::vector<ModelVector>& models) {
    const int completed = round + 1;
    if (round == -1 || completed == cfg.rounds || completed % eval_every == 0) {
      snapshots.emplace_back(completed, models);
    }
  };
  const TrainResult tr = train_sources(sources, arch, schedule_from_config(cfg),
                                       regularizer_from_config(cfg), LossSpec{cfg.l2}, jobs, obs);

  std::vector<std::vector<double>> source_emb;
  for (int k = 0; k < cfg.sources; ++k) {
    source_emb.push_back(sc.profiles[static_cast<std::size_t>(k)].embedding);
  }

  MetricComparison cmp;
  for (const auto& [completed, models] : snapshots) {
    cmp.rounds.push_back(completed);
    for (DistanceMetric metric : {DistanceMetric::cosine, DistanceMetric::euclidean}) {
      const auto pairs = build_pairs(source_emb, models, metric);
      const auto mapping = fit_mapping(pairs, metric, cfg.mapping_hidden, cfg.mapping_epochs,
                                       cfg.mapping_lr, cfg.seed);
      const double bandwidth = transfer_bandwidth(models, metric);
      double acc = 0.0;
      for (int k = cfg.sources; k < cfg.receiver_count(); ++k) {
        const auto& emb = sc.profiles[static_cast<std::size_t>(k)].embedding;
        const auto w = compute_weights(emb, source_emb, mapping, bandwidth, metric, k);
        acc += evaluate(aggregate(w, models), datasets[static_cast<std::size_t>(k)]);
      }
      acc /= std::max(1, cfg.targets);
      (metric == DistanceMetric::cosine ? cmp.cosine_acc : cmp.euclidean_acc).push_back(acc);
    }
  }
  cmp.final_cosine = cmp.cosine_acc.back();
  cmp.final_euclidean = cmp.euclidean_acc.back();
  return cmp;
}

inline void write_metric_comparison_csv(const MetricComparison& cmp, const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "write_metric_comparison_csv: cannot open " + path);
  os.precision(17);
  os << "rounds_completed,cosine_target_accuracy,euclidean_target_accuracy\n";
  for (std::size_t i = 0; i < cmp.rounds.size(); ++i) {
    os << cmp.rounds[i] << ',' << cmp.cosine_acc[i] << ',' << cmp.euclidean_acc[i] << '\n';
  }
}

}  // namespace psan
