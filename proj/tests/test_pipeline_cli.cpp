#include <doctest.h>

#include <nlohmann/json.hpp>

#include "e2e.hpp"
#include "rvt/cli.hpp"
#include "rvt/pipeline.hpp"
#include "test_support.hpp"

using namespace rvt;
using nlohmann::json;
using rvt::testing::read_file;
using rvt::testing::TempDir;

namespace {

std::vector<std::string> small_fixtures(const std::filesystem::path& out) {
  return {"fixtures", "--out", out.string(), "--seed", "1", "--train-per-task", "3", "--dev-per-task", "2",
          "--feature-dim", "8", "--vc-dim", "4", "--merges", "80"};
}

}  // namespace

TEST_CASE("fixtures are byte-identical across runs") {
  TempDir dir;
  REQUIRE(run_cli(small_fixtures(dir / "a")) == 0);
  REQUIRE(run_cli(small_fixtures(dir / "b")) == 0);
  CHECK(hash_path(dir / "a") == hash_path(dir / "b"));
  CHECK(std::filesystem::exists(dir / "a.manifest.json"));
  const auto manifest = json::parse(read_file(dir / "a.manifest.json"));
  CHECK(manifest["command"] == "fixtures");
  CHECK(manifest["seed"] == 1);
  for (const Task t : {Task::VCR, Task::ESNLIVE, Task::VQAE})
    CHECK(std::filesystem::exists(FixtureLayout{dir / "a"}.manifest(t)));
  auto other = small_fixtures(dir / "c");
  other[4] = "2";
  REQUIRE(run_cli(other) == 0);
  CHECK(hash_path(dir / "a") != hash_path(dir / "c"));
}

TEST_CASE("exit codes") {
  TempDir dir;
  CHECK(run_cli({"no-such-command"}) == 2);
  CHECK(run_cli({"fixtures", "--bogus-flag"}) == 2);
  CHECK(run_cli({}) == 2);
  CHECK(run_cli({"limits", "--data", (dir / "missing").string()}) == 1);
  CHECK(run_cli({"report", "--tasks", (dir / "none.jsonl").string(), "--judgments", (dir / "none.jsonl").string()}) ==
        1);
  CHECK(run_cli({"fixtures", "--help"}) == 0);
}

TEST_CASE("train writes checkpoints and a loss curve") {
  TempDir dir;
  REQUIRE(run_cli(small_fixtures(dir / "d")) == 0);
  REQUIRE(run_cli({"limits", "--data", (dir / "d").string(), "--with-features"}) == 0);
  const auto run = dir / "run";
  REQUIRE(run_cli({"train", "--data", (dir / "d").string(), "--mode", "uniform", "--source", "situation", "--epochs",
                   "1", "--batch-size", "4", "--n-layers", "1", "--n-heads", "2", "--d-model", "16", "--output-dir",
                   run.string()}) == 0);
  for (const char* sub : {"best", "last", "final"}) CHECK(std::filesystem::exists(run / sub / kCheckpointMeta));
  CHECK(std::filesystem::exists(run / "loss_curve.csv"));
  CHECK(json::parse(read_file(run / "run.json"))["variant"] == "uniform-situation");
  CHECK(run_cli({"train", "--data", (dir / "d").string(), "--mode", "hybrid", "--output-dir",
                 (dir / "bad").string()}) == 1);
}

TEST_CASE("config files fill in flags that were not given") {
  TempDir dir;
  rvt::testing::write_file(dir / "cfg.json", R"({"train_per_task": 2, "dev_per_task": 1, "feature_dim": 8,
    "vc_dim": 4, "merges": 40, "seed": 5})");
  REQUIRE(run_cli({"fixtures", "--config", (dir / "cfg.json").string(), "--out", (dir / "x").string(), "--seed",
                   "1"}) == 0);
  const auto manifest = json::parse(read_file(dir / "x.manifest.json"));
  CHECK(manifest["seed"] == 1);
  CHECK(manifest["config"].dump().find("cfg.json") != std::string::npos);
  const auto insts = load_instances(FixtureLayout{dir / "x"}.manifest(Task::VQAE), Task::VQAE).instances;
  CHECK(insts.size() == 3);
}

TEST_CASE("the pipeline composes with complete joins") {
  TempDir dir;
  const auto res = rvt::testing::run_pipeline(dir.path(), {Variant{}, Variant::parse("hybrid-objects")});
  CHECK(res.failed_steps.empty());
  REQUIRE(res.report.is_object());
  CHECK(res.report["coverage"]["joins_complete"] == true);
  CHECK(res.report["rows"].size() == 8);
  const auto scores = json::parse(read_file(dir / "scores.json"));
  CHECK(scores["instances"].size() == 2 * 6);
}
