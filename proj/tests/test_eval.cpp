#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "psan/eval.hpp"

using namespace psan;

namespace {

ReceiverDataset blob_dataset(int receiver_id, int n_per_class, int dim, int classes,
                             double center_shift, std::uint64_t seed) {
  ReceiverDataset ds(receiver_id, true);
  auto strm = rng::derive(seed, "blobs", static_cast<std::uint64_t>(receiver_id));
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < n_per_class; ++i) {
      LabeledSample s;
      s.receiver_id = receiver_id;
      s.label = c;
      s.features.resize(static_cast<std::size_t>(dim));
      for (int f = 0; f < dim; ++f) {
        const double center = (f % classes == c ? 1.5 : -0.5) + center_shift;
        s.features[static_cast<std::size_t>(f)] = strm.normal(center, 0.4);
      }
      s.split = i == n_per_class - 1 ? Split::test : Split::train;
      ds.add(std::move(s));
    }
  }
  return ds;
}

ScenarioConfig tiny_config(std::uint64_t seed = 5) {
  ScenarioConfig c;
  c.sources = 4;
  c.targets = 2;
  c.classes = 3;
  c.samples_per_class = 3;
  c.target_test_per_class = 4;
  c.grid.packets = 64;
  c.grid.subcarriers = 6;
  c.grid.antennas = 2;
  c.dfs_bins = 12;
  c.rounds = 25;
  c.mapping_epochs = 600;
  c.seed = seed;
  return c;
}

ScenarioConfig mid_config(std::uint64_t seed) {
  ScenarioConfig c;
  c.sources = 8;
  c.targets = 4;
  c.classes = 6;
  c.samples_per_class = 3;
  c.target_test_per_class = 4;
  c.grid.packets = 128;
  c.grid.subcarriers = 12;
  c.grid.antennas = 2;
  c.dfs_bins = 12;
  c.rounds = 100;
  c.mapping_epochs = 1200;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("a uniform predictor scores chance level on a balanced set") {
  const auto ds = blob_dataset(0, 6, 6, 3, 0.0, 1);
  const ModelVector m = zero_model({6, 0, 3});  // uniform probabilities, tie -> class 0
  const double chance = 1.0 / 3.0;
  CHECK(evaluate(m, ds) == Catch::Approx(chance).margin(1e-12));
}

TEST_CASE("a hand-built separator scores 1.0 on separable data") {
  ReceiverDataset ds(0, true);
  auto strm = rng::derive(2, "eval-test");
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 5; ++i) {
      LabeledSample s;
      s.receiver_id = 0;
      s.label = c;
      s.features = {0.0, 0.0, 0.0};
      s.features[static_cast<std::size_t>(c)] = 3.0 + strm.uniform01();
      s.split = Split::test;
      ds.add(std::move(s));
    }
  }
  ModelVector m = zero_model({3, 0, 3});
  for (int c = 0; c < 3; ++c) m.params[static_cast<std::size_t>(c * 3 + c)] = 5.0;
  CHECK(evaluate(m, ds) == 1.0);
}

TEST_CASE("duplicating the test set leaves accuracy unchanged") {
  const auto ds = blob_dataset(0, 6, 6, 3, 0.0, 3);
  auto strm = rng::derive(4, "eval-test");
  const ModelVector m = init_model({6, 0, 3}, strm, 0.4);
  ReceiverDataset doubled(0, true);
  for (std::size_t i = 0; i < ds.size(); ++i) doubled.add(ds.raw(i));
  for (std::size_t i = 0; i < ds.size(); ++i) doubled.add(ds.raw(i));
  CHECK(evaluate(m, ds) == Catch::Approx(evaluate(m, doubled)).margin(1e-15));
}

TEST_CASE("evaluation requires a test split") {
  ReceiverDataset ds(0, true);
  LabeledSample s;
  s.receiver_id = 0;
  s.features = {1.0};
  s.split = Split::train;
  ds.add(std::move(s));
  CHECK_THROWS_AS(evaluate(zero_model({1, 0, 2}), ds), ValidationError);
}

TEST_CASE("the local optimum has zero gap and descent shrinks the gap") {
  const auto ds = blob_dataset(0, 5, 6, 3, 0.0, 5);
  const Arch arch{6, 0, 3};
  const LossSpec loss{0.05};
  const ModelVector opt = local_optimum(ds, arch, loss);
  const GapEstimate g0 = optimality_gap(opt, ds, loss);
  CHECK(std::abs(g0.gap) <= 1e-8);

  // follow plain full-batch descent from zero: the gap never grows
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto batch = make_batch(ds, all);
  ModelVector m = zero_model(arch);
  double last_gap = optimality_gap(m, ds, loss).gap;
  CHECK(last_gap >= 0.0);
  for (int k = 0; k < 6; ++k) {
    for (int step = 0; step < 5; ++step) {
      const auto [l, grad] = loss_and_grad(m, batch, loss);
      axpy(-0.1, grad, m.params);
    }
    const double gap = optimality_gap(m, ds, loss).gap;
    CHECK(gap <= last_gap + 1e-10);
    last_gap = gap;
  }
}

TEST_CASE("fedavg with equal data sizes is the unweighted mean of uploads") {
  std::vector<ReceiverDataset> dsets;
  for (int k = 0; k < 3; ++k) dsets.push_back(blob_dataset(k, 4, 6, 3, 0.2 * k, 6));
  std::vector<const ReceiverDataset*> views;
  for (const auto& d : dsets) views.push_back(&d);
  const Arch arch{6, 0, 3};
  const TrainSchedule sched{1, 2, 3, 0.05, 31};
  const LossSpec loss{0.01};

  const TrainResult fed = train_fedavg(views, arch, sched, loss);

  auto init_strm = rng::derive(sched.seed, "init");
  const ModelVector init = init_model(arch, init_strm);
  std::vector<double> mean(init.params.size(), 0.0);
  for (int k = 0; k < 3; ++k) {
    auto strm = rng::derive(sched.seed, "sgd", static_cast<std::uint64_t>(k), 0);
    const ModelVector up =
        local_update(init, dsets[static_cast<std::size_t>(k)], 2, 3, 0.05, loss, strm);
    axpy(1.0 / 3.0, up.params, mean);
  }
  for (std::size_t i = 0; i < mean.size(); ++i) {
    CHECK(fed.models[0].params[i] == Catch::Approx(mean[i]).margin(1e-12));
  }
}

TEST_CASE("fedavg over one receiver equals local training") {
  const auto ds = blob_dataset(0, 5, 6, 3, 0.0, 7);
  const std::vector<const ReceiverDataset*> views{&ds};
  const Arch arch{6, 0, 3};
  const TrainSchedule sched{5, 2, 3, 0.05, 8};
  const TrainResult fed = train_fedavg(views, arch, sched, {0.01});
  const ModelVector solo = train_local(ds, arch, sched, {0.01});
  REQUIRE(fed.models[0].params == solo.params);
}

TEST_CASE("under IID data fedavg tracks centralized pooled training") {
  ScenarioConfig c = tiny_config(11);
  c.heterogeneity = 0.0;
  c.samples_per_class = 9;
  c.rounds = 60;
  const Scenario sc = make_scenario(c, c.seed);
  const auto dsets = build_datasets(sc);
  const auto views = source_views(dsets, c.sources);
  const FeatureSpec fs = FeatureSpec::from_config(c);
  const Arch arch{fs.dim(), 0, c.classes};
  const TrainSchedule sched = schedule_from_config(c);
  const LossSpec loss{c.l2};

  const ModelVector global = train_fedavg(views, arch, sched, loss).models[0];

  ReceiverDataset pooled(0, true);
  for (int k = 0; k < c.sources; ++k) {
    for (std::size_t i = 0; i < dsets[static_cast<std::size_t>(k)].size(); ++i) {
      LabeledSample s = dsets[static_cast<std::size_t>(k)].raw(i);
      s.receiver_id = 0;
      pooled.add(std::move(s));
    }
  }
  const ModelVector central = train_local(pooled, arch, sched, loss);

  std::size_t n = 0, hit_g = 0, hit_c = 0;
  for (int k = 0; k < c.sources; ++k) {
    const auto& ds = dsets[static_cast<std::size_t>(k)];
    for (std::size_t i : ds.test_indices()) {
      ++n;
      if (argmax_class(predict(global, ds.features(i))) == ds.label(i)) ++hit_g;
      if (argmax_class(predict(central, ds.features(i))) == ds.label(i)) ++hit_c;
    }
  }
  const double acc_g = double(hit_g) / double(n);
  const double acc_c = double(hit_c) / double(n);
  CHECK(std::abs(acc_g - acc_c) <= 0.02 + 1e-12);
}

TEST_CASE("IID training draws the personalized models together") {
  ScenarioConfig c = tiny_config(13);
  c.heterogeneity = 0.0;
  c.rounds = 60;
  const Scenario sc = make_scenario(c, c.seed);
  const auto dsets = build_datasets(sc);
  const auto views = source_views(dsets, c.sources);
  const FeatureSpec fs = FeatureSpec::from_config(c);
  const Arch arch{fs.dim(), 0, c.classes};
  const TrainResult tr = train_sources(views, arch, schedule_from_config(c),
                                       regularizer_from_config(c), {c.l2});
  const ModelVector global =
      train_fedavg(views, arch, schedule_from_config(c), {c.l2}).models[0];
  for (std::size_t a = 0; a < tr.models.size(); ++a) {
    CHECK(model_distance(tr.models[a], global, DistanceMetric::cosine) > 0.95);
    for (std::size_t b = a + 1; b < tr.models.size(); ++b) {
      CHECK(model_distance(tr.models[a], tr.models[b], DistanceMetric::cosine) > 0.95);
    }
  }
}

TEST_CASE("local models beat chance on their own receivers") {
  std::vector<double> accs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ScenarioConfig c = tiny_config(seed);
    const Scenario sc = make_scenario(c, c.seed);
    const auto dsets = build_datasets(sc);
    const FeatureSpec fs = FeatureSpec::from_config(c);
    const Arch arch{fs.dim(), 0, c.classes};
    double acc = 0.0;
    for (int k = 0; k < c.sources; ++k) {
      const ModelVector m = train_local(dsets[static_cast<std::size_t>(k)], arch,
                                        schedule_from_config(c), {c.l2});
      acc += evaluate(m, dsets[static_cast<std::size_t>(k)]);
    }
    accs.push_back(acc / c.sources);
  }
  CHECK(median(accs) > 1.0 / 3.0);
}

TEST_CASE("training a receiver without labels fails loudly") {
  const ScenarioConfig c = tiny_config();
  const Scenario sc = make_scenario(c, c.seed);
  const auto dsets = build_datasets(sc);
  const FeatureSpec fs = FeatureSpec::from_config(c);
  const Arch arch{fs.dim(), 0, c.classes};
  CHECK_THROWS_AS(train_local(dsets[static_cast<std::size_t>(c.sources)], arch,
                              schedule_from_config(c), {c.l2}),
                  ValidationError);
}

TEST_CASE("zero-shot models sit closer to each local optimum than the global model") {
  std::vector<double> psan_gaps, global_gaps;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ScenarioConfig c = mid_config(seed);
    const PipelineResult p = run_pipeline(c, 2);
    double gp = 0.0, gg = 0.0;
    for (int k = c.sources; k < c.receiver_count(); ++k) {
      const auto& ds = p.datasets[static_cast<std::size_t>(k)];
      gp += optimality_gap(p.target_models[static_cast<std::size_t>(k - c.sources)], ds, {c.l2})
                .gap;
      gg += optimality_gap(p.fedavg_global, ds, {c.l2}).gap;
    }
    psan_gaps.push_back(gp / c.targets);
    global_gaps.push_back(gg / c.targets);
  }
  CHECK(median(psan_gaps) < median(global_gaps));
}

TEST_CASE("reports cover every receiver and method and reproduce exactly") {
  const ScenarioConfig c = tiny_config(21);
  const PipelineResult p = run_pipeline(c, 2);
  const EvalReport rep = build_report(p);
  REQUIRE(rep.receiver_ids.size() == static_cast<std::size_t>(c.receiver_count()));
  REQUIRE(rep.acc_local.size() == rep.receiver_ids.size());
  REQUIRE(rep.acc_global.size() == rep.receiver_ids.size());
  REQUIRE(rep.acc_psan.size() == rep.receiver_ids.size());
  for (double a : rep.acc_psan) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
  double macro = 0.0;
  for (int k = 0; k < c.sources; ++k) macro += rep.acc_psan[static_cast<std::size_t>(k)];
  CHECK(rep.macro_source_psan == Catch::Approx(macro / c.sources).margin(1e-12));

  const PipelineResult p2 = run_pipeline(c, 1);
  const EvalReport rep2 = build_report(p2);
  CHECK(report_to_json(rep).dump() == report_to_json(rep2).dump());
}

TEST_CASE("metric comparison shares initialization across arms") {
  ScenarioConfig c = tiny_config(31);
  c.rounds = 12;
  const MetricComparison a = compare_metrics_experiment(c, 4);
  const MetricComparison b = compare_metrics_experiment(c, 4);
  REQUIRE(a.rounds == b.rounds);          // deterministic control
  CHECK(a.cosine_acc == b.cosine_acc);
  CHECK(a.euclidean_acc == b.euclidean_acc);
  REQUIRE(a.rounds.front() == 0);
  CHECK(a.cosine_acc.front() == a.euclidean_acc.front());  // shared init at round 0
  CHECK(a.rounds.back() == c.rounds);
}

TEST_CASE("median report is the cell-wise median") {
  const ScenarioConfig c = tiny_config(41);
  std::vector<EvalReport> reps;
  for (std::uint64_t s = 0; s < 3; ++s) {
    ScenarioConfig ci = c;
    ci.seed = c.seed + s;
    reps.push_back(build_report(run_pipeline(ci, 2)));
  }
  const EvalReport med = median_report(reps);
  for (std::size_t i = 0; i < med.receiver_ids.size(); ++i) {
    std::vector<double> cell{reps[0].acc_psan[i], reps[1].acc_psan[i], reps[2].acc_psan[i]};
    CHECK(med.acc_psan[i] == median(cell));
  }
}
