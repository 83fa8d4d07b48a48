#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include "psan/eval.hpp"
#include "psan/manifest.hpp"

using namespace psan;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PSAN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

ScenarioConfig cli_config() {
  ScenarioConfig c;
  c.sources = 4;
  c.targets = 2;
  c.classes = 3;
  c.samples_per_class = 3;
  c.target_test_per_class = 3;
  c.grid.packets = 64;
  c.grid.subcarriers = 6;
  c.grid.antennas = 2;
  c.dfs_bins = 12;
  c.rounds = 15;
  c.mapping_epochs = 400;
  c.seed = 3;
  return c;
}

struct CliRun {
  fs::path root, data, models, tr, ev;
};

CliRun fresh_dirs(const std::string& name) {
  CliRun r;
  r.root = fs::temp_directory_path() / ("psan_cli_" + name);
  fs::remove_all(r.root);
  fs::create_directories(r.root);
  r.data = r.root / "data";
  r.models = r.root / "models";
  r.tr = r.root / "transfer";
  r.ev = r.root / "eval";
  return r;
}

void write_config(const fs::path& path, const ScenarioConfig& c) {
  std::ofstream os(path);
  os << config_to_json(c).dump(2) << '\n';
}

}  // namespace

TEST_CASE("full pipeline runs and reproduces byte-identically") {
  const CliRun r = fresh_dirs("pipeline");
  write_config(r.root / "config.json", cli_config());

  REQUIRE(run_cli("gen-data --config " + (r.root / "config.json").string() + " --out " +
                  r.data.string()) == 0);
  REQUIRE(fs::exists(r.data / "profiles.jsonl"));
  REQUIRE(fs::exists(r.data / "datasets.jsonl"));
  REQUIRE(fs::exists(r.data / "manifest.json"));

  // a rerun of gen-data is idempotent
  const std::string datasets_before = slurp(r.data / "datasets.jsonl");
  REQUIRE(run_cli("gen-data --config " + (r.root / "config.json").string() + " --out " +
                  r.data.string()) == 0);
  CHECK(slurp(r.data / "datasets.jsonl") == datasets_before);

  REQUIRE(run_cli("train --data " + r.data.string() + " --out " + r.models.string()) == 0);
  REQUIRE(fs::exists(r.models / "source_00.model"));
  REQUIRE(fs::exists(r.models / "source_03.model"));
  REQUIRE(fs::exists(r.models / "metrics.jsonl"));

  REQUIRE(run_cli("transfer --data " + r.data.string() + " --models " + r.models.string() +
                  " --out " + r.tr.string()) == 0);
  REQUIRE(fs::exists(r.tr / "mapping.bin"));
  REQUIRE(fs::exists(r.tr / "target_04.model"));
  REQUIRE(fs::exists(r.tr / "target_05.model"));
  // audit rows: one per (target, source)
  std::ifstream wcsv(r.tr / "weights.csv");
  int lines = 0;
  std::string line;
  while (std::getline(wcsv, line)) ++lines;
  CHECK(lines == 1 + 2 * 4);

  REQUIRE(run_cli("eval --data " + r.data.string() + " --models " + r.models.string() +
                  " --transfer " + r.tr.string() + " --out " + r.ev.string()) == 0);
  REQUIRE(fs::exists(r.ev / "report.json"));
  REQUIRE(fs::exists(r.ev / "report.csv"));

  // identical rerun of eval reproduces the report bytes
  const std::string report_before = slurp(r.ev / "report.json");
  REQUIRE(run_cli("eval --data " + r.data.string() + " --models " + r.models.string() +
                  " --transfer " + r.tr.string() + " --out " + r.ev.string()) == 0);
  CHECK(slurp(r.ev / "report.json") == report_before);

  // and a parallel re-train writes byte-identical checkpoints and metrics
  const fs::path models2 = r.root / "models_j2";
  REQUIRE(run_cli("train --data " + r.data.string() + " --out " + models2.string() +
                  " --jobs 2") == 0);
  CHECK(slurp(models2 / "source_00.model") == slurp(r.models / "source_00.model"));
  CHECK(slurp(models2 / "metrics.jsonl") == slurp(r.models / "metrics.jsonl"));
}

TEST_CASE("gen-data surfaces config validation errors with exit code 2") {
  const CliRun r = fresh_dirs("badcfg");
  ScenarioConfig c = cli_config();
  c.sources = 1;  // pair construction needs two sources
  write_config(r.root / "config.json", c);
  CHECK(run_cli("gen-data --config " + (r.root / "config.json").string() + " --out " +
                r.data.string()) == 2);
}

TEST_CASE("usage errors exit with code 1") {
  CHECK(run_cli("gen-data --nonsense") == 1);
  CHECK(run_cli("") == 1);
}

TEST_CASE("train --rounds 0 keeps the broadcast initialization") {
  const CliRun r = fresh_dirs("rounds0");
  write_config(r.root / "config.json", cli_config());
  REQUIRE(run_cli("gen-data --config " + (r.root / "config.json").string() + " --out " +
                  r.data.string()) == 0);
  REQUIRE(run_cli("train --data " + r.data.string() + " --out " + r.models.string() +
                  " --rounds 0") == 0);
  const ModelVector m = read_model((r.models / "source_02.model").string());
  const ScenarioConfig c = cli_config();
  auto strm = rng::derive(c.seed, "init");
  const FeatureSpec fs = FeatureSpec::from_config(c);
  const ModelVector expected = init_model({fs.dim(), c.hidden, c.classes}, strm);
  CHECK(m.params == expected.params);
}

TEST_CASE("fedavg mode writes a single global checkpoint") {
  const CliRun r = fresh_dirs("fedavg");
  write_config(r.root / "config.json", cli_config());
  REQUIRE(run_cli("gen-data --config " + (r.root / "config.json").string() + " --out " +
                  r.data.string()) == 0);
  REQUIRE(run_cli("train --data " + r.data.string() + " --out " + r.models.string() +
                  " --mode fedavg") == 0);
  CHECK(fs::exists(r.models / "global.model"));
  CHECK_FALSE(fs::exists(r.models / "source_00.model"));

  // transfer refuses non-psan checkpoints
  CHECK(run_cli("transfer --data " + r.data.string() + " --models " + r.models.string() +
                " --out " + r.tr.string()) == 2);
}

TEST_CASE("transfer rejects a metric mismatch") {
  const CliRun r = fresh_dirs("metric");
  write_config(r.root / "config.json", cli_config());
  REQUIRE(run_cli("gen-data --config " + (r.root / "config.json").string() + " --out " +
                  r.data.string()) == 0);
  REQUIRE(run_cli("train --data " + r.data.string() + " --out " + r.models.string()) == 0);
  CHECK(run_cli("transfer --data " + r.data.string() + " --models " + r.models.string() +
                " --out " + r.tr.string() + " --metric euclidean") == 2);
  CHECK(run_cli("transfer --data " + r.data.string() + " --models " + r.models.string() +
                " --out " + r.tr.string() + " --metric cosine") == 0);
}

TEST_CASE("artifacts from different runs refuse to mix") {
  const CliRun r = fresh_dirs("mix");
  write_config(r.root / "config.json", cli_config());
  ScenarioConfig other = cli_config();
  other.seed = 99;
  write_config(r.root / "other.json", other);

  REQUIRE(run_cli("gen-data --config " + (r.root / "config.json").string() + " --out " +
                  r.data.string()) == 0);
  const fs::path other_data = r.root / "other_data";
  REQUIRE(run_cli("gen-data --config " + (r.root / "other.json").string() + " --out " +
                  other_data.string()) == 0);
  REQUIRE(run_cli("train --data " + r.data.string() + " --out " + r.models.string()) == 0);

  // models trained on data A, transfer pointed at data B
  CHECK(run_cli("transfer --data " + other_data.string() + " --models " + r.models.string() +
                " --out " + r.tr.string()) == 2);

  // writing a different run into an existing output dir is refused
  CHECK(run_cli("gen-data --config " + (r.root / "other.json").string() + " --out " +
                r.data.string()) == 2);
}

TEST_CASE("PSAN_OUT provides the default output root") {
  const CliRun r = fresh_dirs("envroot");
  write_config(r.root / "config.json", cli_config());
  const std::string cmd = "PSAN_OUT=" + r.root.string() + " " + PSAN_CLI_PATH +
                          " gen-data --config " + (r.root / "config.json").string() +
                          " --out rel_data >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(rc));
  REQUIRE(WEXITSTATUS(rc) == 0);
  CHECK(fs::exists(r.root / "rel_data" / "manifest.json"));
}

TEST_CASE("gen-data --dump-grids exports importable grids") {
  const CliRun r = fresh_dirs("grids");
  ScenarioConfig c = cli_config();
  c.samples_per_class = 2;
  c.target_test_per_class = 1;
  write_config(r.root / "config.json", c);
  REQUIRE(run_cli("gen-data --config " + (r.root / "config.json").string() + " --out " +
                  r.data.string() + " --dump-grids") == 0);
  REQUIRE(fs::exists(r.data / "grids" / "r00_c0_s00.csigrid"));
  REQUIRE(fs::exists(r.data / "grids" / "r00_c0_s00.csv"));
  const CsiGrid g = read_grid((r.data / "grids" / "r00_c0_s00.csigrid").string());
  CHECK(g.spec.packets == c.grid.packets);
  CHECK(g.spec.subcarriers == c.grid.subcarriers);
}
