// Batch entry point: gen-data -> train -> transfer -> eval, every stage driven
// by one config file and reproducible from its manifest.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "psan/eval.hpp"
#include "psan/manifest.hpp"

namespace fs = std::filesystem;
using namespace psan;

namespace {

// Relative paths resolve against $PSAN_OUT when it is set.
fs::path resolve_dir(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("PSAN_OUT")) path = fs::path(root) / path;
  }
  return path;
}

// One manifest per output directory; refuse to overwrite a different run.
void prepare_out_dir(const fs::path& out, const std::string& stage,
                     const std::string& config_hash) {
  fs::create_directories(out);
  const fs::path mpath = out / "manifest.json";
  if (fs::exists(mpath)) {
    std::ifstream is(mpath);
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    require(!j.is_discarded() && j.contains("stage") && j.contains("config_hash"),
            "output dir " + out.string() + " holds an unreadable manifest");
    require(j["stage"] == stage && j["config_hash"] == config_hash,
            "output dir " + out.string() + " already belongs to a different run (" +
                j["stage"].get<std::string>() + "/" + j["config_hash"].get<std::string>() +
                "); choose another --out");
  }
}

nlohmann::json label_reads_json(const std::vector<ReceiverDataset>& dsets) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& ds : dsets) j[std::to_string(ds.receiver_id())] = ds.label_reads();
  return j;
}

void assert_target_reads_zero(const std::vector<ReceiverDataset>& dsets, int sources,
                              const std::string& stage) {
  for (std::size_t k = static_cast<std::size_t>(sources); k < dsets.size(); ++k) {
    require_invariant(dsets[k].label_reads() == 0,
                      stage + ": zero-label guarantee violated for target receiver " +
                          std::to_string(dsets[k].receiver_id()));
  }
}

// --- gen-data ------------------------------------------------------------------

struct GenArgs {
  std::string config_path;
  std::string out;
  std::int64_t seed = -1;
  bool dump_grids = false;
  int jobs = 1;
};

void cmd_gen_data(const GenArgs& a) {
  std::ifstream is(a.config_path);
  require(is.good(), "gen-data: cannot open config " + a.config_path);
  nlohmann::json cj = nlohmann::json::parse(is, nullptr, false);
  require(!cj.is_discarded(), "gen-data: config is not valid JSON: " + a.config_path);
  ScenarioConfig cfg = config_from_json(cj);
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);

  const fs::path out = resolve_dir(a.out);
  RunManifest man = make_manifest("gen-data", cfg);
  prepare_out_dir(out, man.stage, man.config_hash);

  Scenario sc = make_scenario(cfg, cfg.seed);
  auto datasets = build_datasets(sc, a.jobs);

  {
    std::ofstream os(out / "profiles.jsonl");
    require(os.good(), "gen-data: cannot write profiles.jsonl");
    for (const auto& sp : sc.profiles) os << profile_to_json(sp).dump() << '\n';
  }
  write_datasets_jsonl(datasets, (out / "datasets.jsonl").string());
  man.artifacts = {"profiles.jsonl", "datasets.jsonl"};

  if (a.dump_grids) {
    fs::create_directories(out / "grids");
    for (int k = 0; k < cfg.receiver_count(); ++k) {
      for (int c = 0; c < cfg.classes; ++c) {
        const int n = sc.class_counts[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
        for (int i = 0; i < n; ++i) {
          auto real = realize_sample(sc, k, c, i);
          const CsiGrid grid =
              synthesize(real.profile, real.gesture, cfg.grid, cfg.noise_std, real.noise_stream);
          char name[64];
          std::snprintf(name, sizeof(name), "grids/r%02d_c%d_s%02d.csigrid", k, c, i);
          write_grid(grid, (out / name).string());
          if (k == 0 && c == 0 && i == 0) {
            write_grid_csv(grid, (out / "grids/r00_c0_s00.csv").string());
          }
        }
      }
    }
    man.artifacts.push_back("grids/");
  }

  const FeatureSpec fspec = FeatureSpec::from_config(cfg);
  man.extra["feature_spec"] = fspec.to_json();
  man.extra["feature_dim"] = fspec.dim();
  man.extra["label_reads"] = label_reads_json(datasets);
  write_manifest(man, out.string());
  std::cout << "gen-data: wrote " << cfg.receiver_count() << " receivers ("
            << cfg.sources << " sources) to " << out.string() << "\n";
}

// --- train --------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::string mode = "psan";
  int jobs = 1;
  std::int64_t rounds = -1;
};

void cmd_train(const TrainArgs& a) {
  require(a.mode == "psan" || a.mode == "fedavg" || a.mode == "local",
          "train: --mode must be psan, fedavg or local");
  const fs::path data_dir = resolve_dir(a.data);
  const RunManifest data_man = read_manifest(data_dir.string());
  ScenarioConfig cfg = data_man.config;
  if (a.rounds >= 0) cfg.rounds = static_cast<int>(a.rounds);

  auto datasets = read_datasets_jsonl((data_dir / "datasets.jsonl").string(),
                                      cfg.receiver_count(), cfg.sources);
  const FeatureSpec fspec = FeatureSpec::from_config(cfg);
  const Arch arch{fspec.dim(), cfg.hidden, cfg.classes};
  const TrainSchedule sched = schedule_from_config(cfg);
  const LossSpec loss{cfg.l2};
  const auto sources = source_views(datasets, cfg.sources);

  const fs::path out = resolve_dir(a.out);
  RunManifest man = make_manifest("train", cfg, data_man.config_hash);
  prepare_out_dir(out, man.stage, man.config_hash);
  man.extra["mode"] = a.mode;
  man.extra["arch"] = {{"input_dim", arch.input_dim},
                       {"hidden", arch.hidden},
                       {"classes", arch.classes}};

  if (a.mode == "psan") {
    const TrainResult tr =
        train_sources(sources, arch, sched, regularizer_from_config(cfg), loss, a.jobs);
    for (int k = 0; k < cfg.sources; ++k) {
      const std::string name = source_model_name(k);
      write_model(tr.models[static_cast<std::size_t>(k)], (out / name).string());
      man.artifacts.push_back(name);
    }
    write_round_logs(tr.logs, (out / "metrics.jsonl").string());
    man.artifacts.push_back("metrics.jsonl");
    man.extra["resolved_sigma"] = tr.resolved_sigma;
  } else if (a.mode == "fedavg") {
    const TrainResult tr = train_fedavg(sources, arch, sched, loss, a.jobs);
    write_model(tr.models[0], (out / "global.model").string());
    write_round_logs(tr.logs, (out / "metrics.jsonl").string());
    man.artifacts = {"global.model", "metrics.jsonl"};
  } else {
    std::ofstream os(out / "metrics.jsonl");
    require(os.good(), "train: cannot write metrics.jsonl");
    for (int k = 0; k < cfg.sources; ++k) {
      const ModelVector m = train_local(datasets[static_cast<std::size_t>(k)], arch, sched, loss);
      const std::string name = local_model_name(k);
      write_model(m, (out / name).string());
      man.artifacts.push_back(name);
      const auto batch = make_batch(datasets[static_cast<std::size_t>(k)],
                                    datasets[static_cast<std::size_t>(k)].train_indices());
      nlohmann::json j;
      j["receiver_id"] = k;
      j["F"] = loss_and_grad(m, batch, loss).first;
      os << j.dump() << '\n';
    }
    man.artifacts.push_back("metrics.jsonl");
  }

  assert_target_reads_zero(datasets, cfg.sources, "train");
  man.extra["label_reads"] = label_reads_json(datasets);
  write_manifest(man, out.string());
  std::cout << "train: mode=" << a.mode << " wrote checkpoints to " << out.string() << "\n";
}

// --- transfer -----------------------------------------------------------------

struct TransferArgs {
  std::string data;
  std::string models;
  std::string out;
  std::string metric;  // optional; must match the training run
};

void cmd_transfer(const TransferArgs& a) {
  const fs::path data_dir = resolve_dir(a.data);
  const fs::path models_dir = resolve_dir(a.models);
  const RunManifest data_man = read_manifest(data_dir.string());
  const RunManifest models_man = read_manifest(models_dir.string());
  require(models_man.stage == "train", "transfer: --models must point at a train output");
  require(models_man.extra.value("mode", "") == "psan",
          "transfer: trained checkpoints are mode \"" + models_man.extra.value("mode", "?") +
              "\"; transfer needs a psan run");
  require_same_run(models_man, data_man, "transfer");
  const ScenarioConfig cfg = models_man.config;

  if (!a.metric.empty()) {
    const DistanceMetric requested = metric_from_string(a.metric);
    require(requested == cfg.metric,
            "transfer: metric mismatch between training run and transfer flags (trained with " +
                to_string(cfg.metric) + ", requested " + a.metric + ")");
  }

  // profiles for embeddings; the label-bearing dataset file is never opened here
  std::vector<SemanticProfile> profiles;
  {
    std::ifstream is(data_dir / "profiles.jsonl");
    require(is.good(), "transfer: cannot open profiles.jsonl in " + data_dir.string());
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty()) profiles.push_back(profile_from_json(nlohmann::json::parse(line)));
    }
  }
  require(static_cast<int>(profiles.size()) == cfg.receiver_count(),
          "transfer: profiles.jsonl holds " + std::to_string(profiles.size()) +
              " receivers; config expects " + std::to_string(cfg.receiver_count()));

  std::vector<ModelVector> source_models;
  std::vector<std::vector<double>> source_emb;
  for (int k = 0; k < cfg.sources; ++k) {
    source_models.push_back(read_model((models_dir / source_model_name(k)).string()));
    source_emb.push_back(profiles[static_cast<std::size_t>(k)].embedding);
  }
  const double sigma = transfer_bandwidth(source_models, cfg.metric);

  const fs::path out = resolve_dir(a.out);
  RunManifest man = make_manifest("transfer", cfg, data_man.config_hash);
  prepare_out_dir(out, man.stage, man.config_hash);
  man.extra["models_config_hash"] = models_man.config_hash;
  man.extra["metric"] = to_string(cfg.metric);
  man.extra["aggregation_bandwidth"] = sigma;
  man.extra["datasets_loaded"] = false;  // labels were unreachable in this stage

  const auto pairs = build_pairs(source_emb, source_models, cfg.metric);
  const MappingModel mapping =
      fit_mapping(pairs, cfg.metric, cfg.mapping_hidden, cfg.mapping_epochs, cfg.mapping_lr,
                  cfg.seed);
  write_mapping(mapping, (out / "mapping.bin").string());
  write_mapping_csv(mapping, pairs, (out / "mapping_pairs.csv").string());
  man.artifacts = {"mapping.bin", "mapping_pairs.csv"};
  man.extra["mapping_train_rmse"] = mapping.train_rmse;

  if (cfg.targets == 0) {
    std::cerr << "transfer: warning: no target receivers in this scenario\n";
  }
  std::vector<AggregationWeights> all_weights;
  std::vector<int> source_ids;
  for (int k = 0; k < cfg.sources; ++k) source_ids.push_back(k);
  for (int k = cfg.sources; k < cfg.receiver_count(); ++k) {
    auto w = compute_weights(profiles[static_cast<std::size_t>(k)].embedding, source_emb, mapping,
                             sigma, cfg.metric, k);
    const ModelVector target = aggregate(w, source_models);
    const std::string name = target_model_name(k);
    write_model(target, (out / name).string());
    man.artifacts.push_back(name);
    all_weights.push_back(std::move(w));
  }
  write_weights_csv(all_weights, source_ids, (out / "weights.csv").string());
  man.artifacts.push_back("weights.csv");
  write_manifest(man, out.string());
  std::cout << "transfer: wrote " << cfg.targets << " target models to " << out.string() << "\n";
}

// --- eval ---------------------------------------------------------------------

struct EvalArgs {
  std::string data;
  std::string models;
  std::string transfer;
  std::string out;
  int seeds = 1;
  int jobs = 1;
  bool compare_metrics = false;
  int eval_every = 10;
};

void cmd_eval(const EvalArgs& a) {
  const fs::path data_dir = resolve_dir(a.data);
  const fs::path models_dir = resolve_dir(a.models);
  const fs::path transfer_dir = resolve_dir(a.transfer);
  const RunManifest data_man = read_manifest(data_dir.string());
  const RunManifest models_man = read_manifest(models_dir.string());
  const RunManifest transfer_man = read_manifest(transfer_dir.string());
  require(models_man.stage == "train" && models_man.extra.value("mode", "") == "psan",
          "eval: --models must point at a psan train output");
  require(transfer_man.stage == "transfer", "eval: --transfer must point at a transfer output");
  require_same_run(models_man, data_man, "eval");
  require_same_run(transfer_man, data_man, "eval");
  require(transfer_man.extra.value("models_config_hash", "") == models_man.config_hash,
          "eval: transfer artifacts were built from a different train run");

  // zero-label audit across the recorded pipeline
  const ScenarioConfig cfg = models_man.config;
  if (models_man.extra.contains("label_reads")) {
    for (int k = cfg.sources; k < cfg.receiver_count(); ++k) {
      const long reads = models_man.extra["label_reads"].value(std::to_string(k), 0L);
      require_invariant(reads == 0, "eval: train stage read " + std::to_string(reads) +
                                        " labels of target receiver " + std::to_string(k));
    }
  }

  require(a.seeds >= 1, "eval: --seeds must be >= 1");
  const fs::path out = resolve_dir(a.out);
  RunManifest man = make_manifest("eval", cfg, data_man.config_hash);
  prepare_out_dir(out, man.stage, man.config_hash);

  std::vector<EvalReport> reports;
  std::vector<MetricComparison> comparisons;
  for (int i = 0; i < a.seeds; ++i) {
    ScenarioConfig run_cfg = cfg;
    run_cfg.seed = cfg.seed + static_cast<std::uint64_t>(i);
    if (i == 0 && a.seeds == 1) {
      // evaluate the artifacts actually on disk
      auto datasets = read_datasets_jsonl((data_dir / "datasets.jsonl").string(),
                                          cfg.receiver_count(), cfg.sources);
      std::vector<ModelVector> psan_models;
      for (int k = 0; k < cfg.sources; ++k) {
        psan_models.push_back(read_model((models_dir / source_model_name(k)).string()));
      }
      std::vector<ModelVector> target_models;
      for (int k = cfg.sources; k < cfg.receiver_count(); ++k) {
        target_models.push_back(read_model((transfer_dir / target_model_name(k)).string()));
      }
      const Arch arch = psan_models.empty() ? Arch{} : psan_models.front().arch;
      const TrainSchedule sched = schedule_from_config(run_cfg);
      const LossSpec loss{cfg.l2};
      const auto sources = source_views(datasets, cfg.sources);
      std::vector<ModelVector> local_models(static_cast<std::size_t>(cfg.sources));
      parallel_for(static_cast<std::size_t>(cfg.sources), a.jobs, [&](std::size_t k) {
        local_models[k] = train_local(datasets[k], arch, sched, loss);
      });
      const ModelVector global = train_fedavg(sources, arch, sched, loss, a.jobs).models[0];
      reports.push_back(
          build_report(run_cfg, datasets, psan_models, local_models, global, target_models));
    } else {
      const PipelineResult p = run_pipeline(run_cfg, a.jobs);
      reports.push_back(build_report(p));
    }
    if (a.compare_metrics) {
      comparisons.push_back(compare_metrics_experiment(run_cfg, a.eval_every, a.jobs));
      char name[48];
      std::snprintf(name, sizeof(name), "curves_seed_%llu.csv",
                    static_cast<unsigned long long>(run_cfg.seed));
      write_metric_comparison_csv(comparisons.back(), (out / name).string());
      man.artifacts.push_back(name);
    }
  }

  const EvalReport med = median_report(reports);
  nlohmann::json rj;
  rj["median"] = report_to_json(med);
  rj["seeds"] = nlohmann::json::array();
  for (const auto& r : reports) rj["seeds"].push_back(report_to_json(r));
  if (a.compare_metrics) {
    std::vector<double> fc, fe;
    for (const auto& c : comparisons) {
      fc.push_back(c.final_cosine);
      fe.push_back(c.final_euclidean);
    }
    rj["metric_comparison"] = {{"median_final_cosine", median(fc)},
                               {"median_final_euclidean", median(fe)},
                               {"median_delta_points", 100.0 * (median(fc) - median(fe))}};
  }
  {
    std::ofstream os(out / "report.json");
    require(os.good(), "eval: cannot write report.json");
    os << rj.dump(2) << '\n';
  }
  write_report_csv(reports, (out / "report.csv").string());
  man.artifacts.push_back("report.json");
  man.artifacts.push_back("report.csv");
  write_manifest(man, out.string());

  std::cout << "eval: median target accuracy  local=" << med.macro_target_local
            << "  global=" << med.macro_target_global << "  psan=" << med.macro_target_psan
            << "\n";

  if (cfg.hard_min_target_psan_minus_global >= 0.0) {
    const double pts = 100.0 * (med.macro_target_psan - med.macro_target_global);
    require_invariant(pts >= cfg.hard_min_target_psan_minus_global,
                      "eval: hard check failed: psan-global target delta " + std::to_string(pts) +
                          " points < required " +
                          std::to_string(cfg.hard_min_target_psan_minus_global));
  }
  if (cfg.hard_min_target_psan_minus_local >= 0.0) {
    const double pts = 100.0 * (med.macro_target_psan - med.macro_target_local);
    require_invariant(pts >= cfg.hard_min_target_psan_minus_local,
                      "eval: hard check failed: psan-local target delta " + std::to_string(pts) +
                          " points < required " +
                          std::to_string(cfg.hard_min_target_psan_minus_local));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pSAN zero-shot wireless sensing simulator"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "synthesize receiver profiles and datasets");
  gen_cmd->add_option("--config", gen.config_path, "scenario config JSON")->required();
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "override the config seed");
  gen_cmd->add_flag("--dump-grids", gen.dump_grids, "also export raw CSI grids");
  gen_cmd->add_option("--jobs", gen.jobs, "worker threads (output-invariant)");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train source-receiver models");
  train_cmd->add_option("--data", train.data, "gen-data output directory")->required();
  train_cmd->add_option("--out", train.out, "output directory")->required();
  train_cmd->add_option("--mode", train.mode, "psan | fedavg | local");
  train_cmd->add_option("--jobs", train.jobs, "worker threads (output-invariant)");
  train_cmd->add_option("--rounds", train.rounds, "override config rounds");

  TransferArgs transfer;
  auto* transfer_cmd =
      app.add_subcommand("transfer", "build zero-shot models for target receivers");
  transfer_cmd->add_option("--data", transfer.data, "gen-data output directory")->required();
  transfer_cmd->add_option("--models", transfer.models, "psan train output directory")
      ->required();
  transfer_cmd->add_option("--out", transfer.out, "output directory")->required();
  transfer_cmd->add_option("--metric", transfer.metric,
                           "must match the metric the run was trained with");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "compare Local / Global / pSAN accuracy");
  eval_cmd->add_option("--data", ev.data, "gen-data output directory")->required();
  eval_cmd->add_option("--models", ev.models, "psan train output directory")->required();
  eval_cmd->add_option("--transfer", ev.transfer, "transfer output directory")->required();
  eval_cmd->add_option("--out", ev.out, "output directory")->required();
  eval_cmd->add_option("--seeds", ev.seeds, "number of seeds (medians reported)");
  eval_cmd->add_option("--jobs", ev.jobs, "worker threads (output-invariant)");
  eval_cmd->add_flag("--compare-metrics", ev.compare_metrics,
                     "emit cosine-vs-euclidean accuracy curves");
  eval_cmd->add_option("--eval-every", ev.eval_every, "curve sampling stride in rounds");

  try {
    app.parse(argc, argv);
    if (gen_cmd->parsed()) cmd_gen_data(gen);
    if (train_cmd->parsed()) cmd_train(train);
    if (transfer_cmd->parsed()) cmd_transfer(transfer);
    if (eval_cmd->parsed()) cmd_eval(ev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const InvariantError& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
