#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "psan/eval.hpp"
#include "psan/fl.hpp"

using namespace psan;

namespace {

// hand-made per-class Gaussian blobs; fast stand-in for synthesized data
ReceiverDataset blob_dataset(int receiver_id, int n_per_class, int dim, int classes,
                             double center_shift, std::uint64_t seed, bool with_test = true) {
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
      s.split = with_test && i == n_per_class - 1 ? Split::test : Split::train;
      ds.add(std::move(s));
    }
  }
  return ds;
}

std::string logs_to_string(const std::vector<RoundLog>& logs) {
  std::ostringstream os;
  for (const auto& log : logs) {
    nlohmann::json j;
    j["round"] = log.round;
    j["J"] = log.objective;
    j["F"] = log.receiver_losses;
    j["xi"] = log.coeffs;
    os << j.dump() << '\n';
  }
  return os.str();
}

}  // namespace

TEST_CASE("attention function closed-form values") {
  CHECK(attention_r(0.0, 2.0) == 0.0);
  CHECK(attention_r_prime(0.0, 2.0) == Catch::Approx(0.5).margin(1e-15));
  CHECK(attention_r(3.0, 3.0) == Catch::Approx(1.0 - std::exp(-1.0)).epsilon(1e-14));
  CHECK(attention_r(3.0, 3.0) == Catch::Approx(0.632121).margin(1e-6));
  CHECK_THROWS_AS(attention_r(-0.1, 1.0), ValidationError);
  CHECK_THROWS_AS(attention_r_prime(-0.1, 1.0), ValidationError);

  auto strm = rng::derive(1, "fl-test");
  for (int i = 0; i < 100; ++i) {
    const double sigma = strm.uniform(0.1, 5.0);
    double x1 = strm.uniform(0.0, 10.0);
    double x2 = strm.uniform(0.0, 10.0);
    if (x1 > x2) std::swap(x1, x2);
    if (x1 == x2) continue;
    CHECK(attention_r_prime(x1, sigma) > attention_r_prime(x2, sigma));
    CHECK(attention_r_prime(x1, sigma) <= 1.0 / sigma);  // bounded gradient
    CHECK(attention_r(x1, sigma) >= 0.0);
    CHECK(attention_r(x1, sigma) < 1.0);
  }
}

TEST_CASE("zero learning rate is a no-op update") {
  const auto ds = blob_dataset(0, 4, 6, 3, 0.0, 11);
  const Arch arch{6, 0, 3};
  auto strm = rng::derive(2, "fl-test");
  ModelVector m = init_model(arch, strm);
  auto sgd = rng::derive(3, "sgd");
  const ModelVector out = local_update(m, ds, 2, 2, 0.0, {0.01}, sgd);
  CHECK(out.params == m.params);
}

TEST_CASE("one SGD step matches the hand-computed softmax gradient step") {
  // single sample x = (1, 2), label 0, zero init, lr 0.1:
  // probs (0.5, 0.5); d = (-0.5, 0.5); step writes lr * (0.5, 1, -0.5, -1, 0.5, -0.5)
  ReceiverDataset ds(0, true);
  LabeledSample s;
  s.receiver_id = 0;
  s.label = 0;
  s.features = {1.0, 2.0};
  s.split = Split::train;
  ds.add(std::move(s));

  const Arch arch{2, 0, 2};
  ModelVector m = zero_model(arch);
  auto sgd = rng::derive(4, "sgd");
  const ModelVector out = local_update(m, ds, 1, 1, 0.1, {0.0}, sgd);
  CHECK(out.params[0] == Catch::Approx(0.05).margin(1e-15));   // W[0][0]
  CHECK(out.params[1] == Catch::Approx(0.10).margin(1e-15));   // W[0][1]
  CHECK(out.params[2] == Catch::Approx(-0.05).margin(1e-15));  // W[1][0]
  CHECK(out.params[3] == Catch::Approx(-0.10).margin(1e-15));  // W[1][1]
  CHECK(out.params[4] == Catch::Approx(0.05).margin(1e-15));   // b[0]
  CHECK(out.params[5] == Catch::Approx(-0.05).margin(1e-15));  // b[1]
}

TEST_CASE("two epochs equal two chained single-epoch updates") {
  const auto ds = blob_dataset(1, 5, 8, 4, 0.0, 12);
  const Arch arch{8, 0, 4};
  auto strm = rng::derive(5, "fl-test");
  const ModelVector m0 = init_model(arch, strm);

  auto s1 = rng::derive(6, "sgd");
  const ModelVector two = local_update(m0, ds, 2, 3, 0.02, {0.01}, s1);

  auto s2 = rng::derive(6, "sgd");
  ModelVector chained = local_update(m0, ds, 1, 3, 0.02, {0.01}, s2);
  chained = local_update(chained, ds, 1, 3, 0.02, {0.01}, s2);
  CHECK(two.params == chained.params);
}

TEST_CASE("local_update requires a train split") {
  ReceiverDataset empty(3, false);
  LabeledSample s;
  s.receiver_id = 3;
  s.features = {1.0};
  s.split = Split::test;
  empty.add(std::move(s));
  const Arch arch{1, 0, 2};
  ModelVector m = zero_model(arch);
  auto sgd = rng::derive(7, "sgd");
  CHECK_THROWS_AS(local_update(m, empty, 1, 1, 0.1, {0.0}, sgd), ValidationError);
}

TEST_CASE("identical models stay fixed under the coupling step") {
  const Arch arch{4, 0, 2};
  auto strm = rng::derive(8, "fl-test");
  ModelVector m = init_model(arch, strm, 0.5);
  const std::vector<ModelVector> models(3, m);
  const ServerStepParams p{2.0, 1.0, 0.3};
  const auto [stepped, xi] = server_step(models, p);
  // off-diagonals all equal 2*alpha*lambda*R'(0) = 2*0.3/sigma
  const double expected = 2.0 * 0.3 * 1.0 / 2.0;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      if (i != j) CHECK(xi[i][j] == Catch::Approx(expected).margin(1e-15));
    }
  }
  for (const auto& out : stepped) {
    for (std::size_t t = 0; t < out.params.size(); ++t) {
      CHECK(out.params[t] == Catch::Approx(m.params[t]).margin(1e-12));
    }
  }
}

TEST_CASE("two-model coupling matrix matches the hand computation") {
  // ||w1 - w2||^2 = sigma = 1, alpha*lambda = 0.1*e so the off-diagonal is 0.2
  const Arch arch{1, 0, 2};  // dim 4
  ModelVector a = zero_model(arch), b = zero_model(arch);
  b.params = {0.5, 0.5, 0.5, 0.5};  // squared distance 4 * 0.25 = 1
  const ServerStepParams p{1.0, 1.0, 0.1 * std::exp(1.0)};
  const auto [stepped, xi] = server_step({a, b}, p);
  CHECK(xi[0][0] == Catch::Approx(0.8).margin(1e-12));
  CHECK(xi[0][1] == Catch::Approx(0.2).margin(1e-12));
  CHECK(xi[1][0] == Catch::Approx(0.2).margin(1e-12));
  CHECK(xi[1][1] == Catch::Approx(0.8).margin(1e-12));
  for (std::size_t t = 0; t < 4; ++t) {
    CHECK(stepped[0].params[t] == Catch::Approx(0.2 * b.params[t]).margin(1e-12));
  }
}

TEST_CASE("alpha zero leaves models untouched with an identity matrix") {
  const Arch arch{3, 0, 2};
  auto strm = rng::derive(9, "fl-test");
  std::vector<ModelVector> models;
  for (int i = 0; i < 4; ++i) models.push_back(init_model(arch, strm, 1.0));
  const auto [stepped, xi] = server_step(models, {1.0, 1.0, 0.0});
  for (std::size_t i = 0; i < models.size(); ++i) {
    CHECK(stepped[i].params == models[i].params);
    for (std::size_t j = 0; j < models.size(); ++j) {
      CHECK(xi[i][j] == (i == j ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("an inadmissible step size is rejected with the admissible bound") {
  const Arch arch{2, 0, 2};
  ModelVector a = zero_model(arch), b = zero_model(arch);
  b.params = {1e-6, 0, 0, 0};  // nearly identical models: R' ~ 1/sigma
  try {
    server_step({a, b}, {0.01, 1.0, 50.0});
    FAIL("expected invariant error");
  } catch (const InvariantError& e) {
    CHECK(std::string(e.what()).find("admissible") != std::string::npos);
  }
}

TEST_CASE("coupling rows are stochastic under the auto step size") {
  const Arch arch{5, 0, 3};
  auto strm = rng::derive(10, "fl-test");
  std::vector<ModelVector> models;
  for (int i = 0; i < 6; ++i) models.push_back(init_model(arch, strm, 2.0));
  RegularizerSpec reg;
  reg.gamma = 1.0;
  const double sigma = median_sqdist(models);
  const double alpha = resolve_alpha(reg, models, sigma);
  REQUIRE(alpha > 0.0);
  const auto [stepped, xi] = server_step(models, {sigma, reg.effective_lambda(), alpha});
  for (const auto& row : xi) {
    double sum = 0.0;
    for (double v : row) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("gamma zero reproduces independent local training bit for bit") {
  std::vector<ReceiverDataset> dsets;
  for (int k = 0; k < 3; ++k) dsets.push_back(blob_dataset(k, 4, 6, 3, 0.3 * k, 77));
  std::vector<const ReceiverDataset*> views;
  for (const auto& d : dsets) views.push_back(&d);

  const Arch arch{6, 0, 3};
  TrainSchedule sched{8, 2, 3, 0.05, 123};
  RegularizerSpec reg;
  reg.gamma = 0.0;
  const TrainResult fed = train_sources(views, arch, sched, reg, {0.01});
  for (int k = 0; k < 3; ++k) {
    const ModelVector solo = train_local(dsets[static_cast<std::size_t>(k)], arch, sched, {0.01});
    REQUIRE(fed.models[static_cast<std::size_t>(k)].params == solo.params);
  }
}

TEST_CASE("training is deterministic and schedule independent") {
  std::vector<ReceiverDataset> dsets;
  for (int k = 0; k < 4; ++k) dsets.push_back(blob_dataset(k, 4, 6, 3, 0.2 * k, 78));
  std::vector<const ReceiverDataset*> views;
  for (const auto& d : dsets) views.push_back(&d);
  const Arch arch{6, 0, 3};
  const TrainSchedule sched{6, 2, 3, 0.05, 9};
  const RegularizerSpec reg;
  const TrainResult a = train_sources(views, arch, sched, reg, {0.01}, 1);
  const TrainResult b = train_sources(views, arch, sched, reg, {0.01}, 3);
  CHECK(logs_to_string(a.logs) == logs_to_string(b.logs));
  for (std::size_t k = 0; k < a.models.size(); ++k) {
    REQUIRE(a.models[k].params == b.models[k].params);
  }
}

TEST_CASE("coupled training decreases the multi-task objective") {
  std::vector<ReceiverDataset> dsets;
  for (int k = 0; k < 4; ++k) dsets.push_back(blob_dataset(k, 5, 6, 3, 0.15 * k, 79));
  std::vector<const ReceiverDataset*> views;
  for (const auto& d : dsets) views.push_back(&d);
  const Arch arch{6, 0, 3};
  const TrainSchedule sched{30, 2, 5, 0.05, 3};
  const RegularizerSpec reg;
  const TrainResult tr = train_sources(views, arch, sched, reg, {0.01});

  int blips = 0;
  for (std::size_t t = 4; t < tr.logs.size(); ++t) {
    const double prev = tr.logs[t - 1].objective;
    const double cur = tr.logs[t].objective;
    if (cur > prev) {
      ++blips;
      CHECK((cur - prev) / prev < 0.01);
    }
  }
  CHECK(blips <= 2);
  CHECK(tr.logs.back().objective < tr.logs.front().objective);
}

TEST_CASE("stochastic gradients have bounded variance and R' is bounded") {
  // the without-replacement estimator's deviation is bounded by the worst
  // single-sample deviation; R' is bounded by 1/sigma
  const auto ds = blob_dataset(0, 6, 6, 3, 0.0, 80);
  const Arch arch{6, 0, 3};
  auto strm = rng::derive(11, "fl-test");
  ModelVector m = init_model(arch, strm, 0.5);
  const LossSpec spec{0.01};

  const auto full = loss_and_grad(m, make_batch(ds, ds.train_indices()), spec).second;
  double worst_single = 0.0;
  for (std::size_t i : ds.train_indices()) {
    const std::size_t one[] = {i};
    const auto gi = loss_and_grad(m, make_batch(ds, one), spec).second;
    worst_single = std::max(worst_single, squared_distance(gi, full));
  }
  double mean_batch_dev = 0.0;
  int batches = 0;
  const auto& idx = ds.train_indices();
  for (std::size_t lo = 0; lo < idx.size(); lo += 3) {
    const std::size_t hi = std::min(idx.size(), lo + 3);
    const auto gb =
        loss_and_grad(m, make_batch(ds, {idx.data() + lo, hi - lo}), spec).second;
    mean_batch_dev += squared_distance(gb, full);
    ++batches;
  }
  mean_batch_dev /= batches;
  CHECK(mean_batch_dev <= worst_single + 1e-12);
}
