#include <gtest/gtest.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>

#include "ltx/pipeline.hpp"
#include "test_support.hpp"

using namespace ltx;
using ltx::testing::TempDir;

namespace {

std::string cli() {
  const char* p = std::getenv("LTX_CLI");
  return p ? p : "ltx";
}

// Runs the CLI with stdout/stderr captured to files in `dir`.
int run_cli(const fs::path& dir, const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" + cli() + "' " + args + " >'" +
                          (dir / "stdout.txt").string() + "' 2>'" + (dir / "stderr.txt").string() + "'";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string stderr_text(const fs::path& dir) { return read_file_bytes(dir / "stderr.txt"); }

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file_bytes(e.path());
  return out;
}

// Names of files that are missing on one side or differ in content.
std::vector<std::string> tree_diff(const fs::path& a, const fs::path& b) {
  const auto ta = tree(a), tb = tree(b);
  std::vector<std::string> out;
  for (const auto& [k, v] : ta)
    if (!tb.count(k) || tb.at(k) != v) out.push_back(k);
  for (const auto& [k, v] : tb)
    if (!ta.count(k)) out.push_back(k);
  return out;
}

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& body) {
  const fs::path p = dir / name;
  write_file_bytes(p, body);
  return p;
}

const char* kMinimal = R"({
  "seed": 3, "run_id": "mini",
  "dataset": {"samples_per_class": 16},
  "pruning": {"rounds": 2, "train_iters": 20}
})";

std::string config_arg(const fs::path& cfg, const fs::path& out) {
  return "--config '" + cfg.string() + "' --out '" + out.string() + "'";
}

}  // namespace

TEST(Cli, MinimalRunCompletesWithinBudget) {
  TempDir dir("cli_min");
  const fs::path cfg = write_config(dir.path(), "c.json", kMinimal);
  const auto t0 = std::chrono::steady_clock::now();
  ASSERT_EQ(run_cli(dir.path(), "run " + config_arg(cfg, dir.path() / "out")), 0) << stderr_text(dir.path());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 60.0);
  const fs::path run = dir.path() / "out" / "mini";
  for (const char* f : {"config.json", "init.ltxc", "round_1/model.ltxc", "round_1/mask.ltxm", "round_1/record.json",
                        "round_2/concept_bank.ltxc", "round_2/pcbm.ltxc", "round_2/heatmaps.ltxc",
                        "report/consistency.csv", "report/consistency.json", "report/accuracy_curve.csv",
                        "report/topk_concepts.csv", "report/topk_table.md"})
    EXPECT_TRUE(fs::exists(run / f)) << f;
  // One heatmap and one panel per class (first test sample of each class).
  std::size_t panels = 0;
  for (const auto& e : fs::directory_iterator(run / "report" / "panels")) panels += e.path().extension() == ".pgm";
  EXPECT_EQ(panels, 4u);
}

TEST(Cli, RerunIsByteIdenticalAcrossThreadCounts) {
  TempDir dir("cli_det");
  const fs::path cfg = write_config(dir.path(), "c.json", kMinimal);
  ASSERT_EQ(run_cli(dir.path(), "run " + config_arg(cfg, dir.path() / "a"), "LTX_THREADS=1"), 0);
  ASSERT_EQ(run_cli(dir.path(), "run " + config_arg(cfg, dir.path() / "b"), "LTX_THREADS=3"), 0);
  EXPECT_EQ(read_file_bytes(dir.path() / "a" / "mini" / "report" / "consistency.csv"),
            read_file_bytes(dir.path() / "b" / "mini" / "report" / "consistency.csv"));
  EXPECT_EQ(tree_diff(dir.path() / "a" / "mini", dir.path() / "b" / "mini"), std::vector<std::string>{});
}

TEST(Cli, StagewiseEqualsRun) {
  TempDir dir("cli_stages");
  const fs::path cfg = write_config(dir.path(), "c.json", kMinimal);
  ASSERT_EQ(run_cli(dir.path(), "run " + config_arg(cfg, dir.path() / "whole")), 0);
  for (const char* stage : {"train", "prune", "concepts", "pcbm", "gradcam", "report"})
    ASSERT_EQ(run_cli(dir.path(), std::string(stage) + " " + config_arg(cfg, dir.path() / "staged")), 0)
        << stage << ": " << stderr_text(dir.path());
  EXPECT_EQ(tree_diff(dir.path() / "whole" / "mini", dir.path() / "staged" / "mini"), std::vector<std::string>{});
}

TEST(Cli, PcbmBeforeConceptsNamesConceptBank) {
  TempDir dir("cli_missing");
  const fs::path cfg = write_config(dir.path(), "c.json", kMinimal);
  ASSERT_EQ(run_cli(dir.path(), "train " + config_arg(cfg, dir.path() / "o")), 0);
  EXPECT_EQ(run_cli(dir.path(), "pcbm " + config_arg(cfg, dir.path() / "o")), 1);
  EXPECT_NE(stderr_text(dir.path()).find("concept_bank.ltxc"), std::string::npos) << stderr_text(dir.path());
  EXPECT_EQ(run_cli(dir.path(), "report " + config_arg(cfg, dir.path() / "o")), 1);
  EXPECT_NE(stderr_text(dir.path()).find("round_2/record.json"), std::string::npos);
}

TEST(Cli, ReportOnSingleRoundIsSelfComparison) {
  TempDir dir("cli_one");
  const fs::path cfg = write_config(dir.path(), "c.json", R"({
    "seed": 5, "run_id": "one", "dataset": {"samples_per_class": 12},
    "pruning": {"rounds": 1, "train_iters": 10}})");
  ASSERT_EQ(run_cli(dir.path(), "run " + config_arg(cfg, dir.path() / "o")), 0) << stderr_text(dir.path());
  const CsvTable t = read_csv(dir.path() / "o" / "one" / "report" / "consistency.csv");
  const auto overlap = *t.column("topk_overlap");
  const auto spearman = *t.column("spearman");
  const auto pearson = *t.column("heatmap_pearson");
  std::size_t concept_rows = 0;
  for (const auto& row : t.rows) {
    if (row[0] == "concept") {
      ++concept_rows;
      EXPECT_EQ(row[overlap], "1");
      EXPECT_EQ(row[spearman], "1");
    } else {
      EXPECT_TRUE(row[pearson] == "1" || row[pearson] == "NA");
    }
  }
  EXPECT_EQ(concept_rows, 4u);
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli_codes");
  const fs::path out = dir.path() / "o";
  const fs::path p1 = write_config(dir.path(), "p1.json", R"({"pruning": {"fraction": 1.0}})");
  EXPECT_EQ(run_cli(dir.path(), "run " + config_arg(p1, out)), 2);
  const fs::path unknown = write_config(dir.path(), "u.json", R"({"pruning": {"fractoin": 0.2}})");
  EXPECT_EQ(run_cli(dir.path(), "run " + config_arg(unknown, out)), 2);
  EXPECT_NE(stderr_text(dir.path()).find("fractoin"), std::string::npos);
  const fs::path bad_json = write_config(dir.path(), "b.json", "{ not json");
  EXPECT_EQ(run_cli(dir.path(), "run " + config_arg(bad_json, out)), 2);
  const fs::path bad_layer = write_config(dir.path(), "l.json", R"({"gradcam": {"layer": "head"}})");
  EXPECT_EQ(run_cli(dir.path(), "run " + config_arg(bad_layer, out)), 2);
  const fs::path bad_k = write_config(dir.path(), "k.json", R"({"pcbm": {"top_k": 9}})");
  EXPECT_EQ(run_cli(dir.path(), "run " + config_arg(bad_k, out)), 2);
  EXPECT_EQ(run_cli(dir.path(), "run --config '" + (dir.path() / "nope.json").string() + "'"), 2);
  EXPECT_EQ(run_cli(dir.path(), "frobnicate"), 2);
  EXPECT_EQ(run_cli(dir.path(), "run"), 2);
  EXPECT_FALSE(fs::exists(out));  // nothing written on validation failure
  // A schema-valid config whose dataset directory does not exist fails at run time.
  const fs::path missing = write_config(dir.path(), "m.json",
                                        R"({"dataset": {"source": "directory", "path": "/nonexistent/ltx"}})");
  EXPECT_EQ(run_cli(dir.path(), "run " + config_arg(missing, out)), 1);
}

TEST(Cli, RerunWithoutForceIsAppendOnly) {
  TempDir dir("cli_append");
  const fs::path cfg = write_config(dir.path(), "c.json", kMinimal);
  const fs::path out = dir.path() / "o";
  ASSERT_EQ(run_cli(dir.path(), "run " + config_arg(cfg, out)), 0);
  const auto before = tree(out / "mini");
  ASSERT_EQ(run_cli(dir.path(), "pcbm " + config_arg(cfg, out)), 0);
  std::vector<fs::path> reruns;
  for (const auto& e : fs::directory_iterator(out / "mini"))
    if (e.path().filename().string().rfind("rerun_", 0) == 0) reruns.push_back(e.path());
  ASSERT_EQ(reruns.size(), 1u);
  EXPECT_TRUE(fs::exists(reruns[0] / "round_2" / "pcbm.ltxc"));
  EXPECT_EQ(read_file_bytes(reruns[0] / "round_2" / "pcbm.ltxc"), before.at("round_2/pcbm.ltxc"));
  auto after = tree(out / "mini");
  std::erase_if(after, [](const auto& kv) { return kv.first.rfind("rerun_", 0) == 0; });
  EXPECT_TRUE(after == before);
  // --force writes in place and creates no new rerun directory.
  ASSERT_EQ(run_cli(dir.path(), "pcbm --force " + config_arg(cfg, out)), 0);
  std::size_t count = 0;
  for (const auto& e : fs::directory_iterator(out / "mini")) count += e.path().filename().string().rfind("rerun_", 0) == 0;
  EXPECT_EQ(count, 1u);
}

TEST(Cli, UnknownSampleIdRejectedBeforeWork) {
  TempDir dir("cli_ids");
  const fs::path cfg = write_config(dir.path(), "c.json", R"({
    "run_id": "ids", "dataset": {"samples_per_class": 12}, "pruning": {"rounds": 1, "train_iters": 5},
    "gradcam": {"sample_ids": [100000]}})");
  EXPECT_EQ(run_cli(dir.path(), "run " + config_arg(cfg, dir.path() / "o")), 2);
  EXPECT_FALSE(fs::exists(dir.path() / "o" / "ids"));
}

TEST(Cli, ExportedDatasetRunsFromDirectory) {
  TempDir dir("cli_export");
  const fs::path synth = write_config(dir.path(), "s.json", R"({
    "seed": 8, "run_id": "s", "dataset": {"samples_per_class": 12}, "pruning": {"rounds": 1, "train_iters": 5}})");
  ASSERT_EQ(run_cli(dir.path(), "export-data --config '" + synth.string() + "' --dir '" +
                                    (dir.path() / "data").string() + "'"),
            0);
  EXPECT_TRUE(fs::exists(dir.path() / "data" / "manifest.csv"));
  const fs::path from_dir = write_config(dir.path(), "d.json", R"({
    "seed": 8, "run_id": "d", "dataset": {"source": "directory", "path": ")" + (dir.path() / "data").string() +
                                                                         R"("}, "pruning": {"rounds": 1, "train_iters": 5}})");
  ASSERT_EQ(run_cli(dir.path(), "run " + config_arg(from_dir, dir.path() / "o")), 0) << stderr_text(dir.path());
  EXPECT_TRUE(fs::exists(dir.path() / "o" / "d" / "report" / "consistency.csv"));
}

TEST(Config, DefaultsAndRoundTrip) {
  const ExperimentConfig c = parse_config(nlohmann::json::object());
  EXPECT_EQ(c.schedule.fraction, 0.10);
  EXPECT_EQ(c.schedule.rounds, 15u);
  EXPECT_TRUE(c.schedule.rewind);
  EXPECT_EQ(c.pcbm.epochs, 35u);
  EXPECT_EQ(c.pcbm.lr, 0.01);
  EXPECT_EQ(c.train.lr, 0.01);
  EXPECT_EQ(c.examples_per_concept, 50u);
  EXPECT_EQ(c.top_k, 3u);
  EXPECT_EQ(c.generator.num_concepts, 8u);
  EXPECT_EQ(c.generator.num_classes, 4u);
  EXPECT_EQ(c.generator.samples_per_class, 500u);
  EXPECT_EQ(c.cam_layer, "conv2");
  const nlohmann::json j = config_to_json(c);
  EXPECT_EQ(config_to_json(parse_config(j)), j);
}

TEST(Config, ValidationErrorsAreConfigErrors) {
  for (const char* text : {R"({"pruning": {"fraction": 0}})", R"({"pruning": {"rounds": 0}})",
                           R"({"dataset": {"num_concepts": 2, "num_classes": 4}})",
                           R"({"dataset": {"class_rules": [[0, 9]]}})", R"({"dataset": {"concept_names": ["a"]}})",
                           R"({"concepts": {"mode": "tcav"}})", R"({"pcbm": {"alpha": 2}})",
                           R"({"gradcam": {"classes": [4]}})", R"({"seed": "x"})", R"({"run_id": "../up"})"}) {
    try {
      parse_config(nlohmann::json::parse(text));
      ADD_FAILURE() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::Config) << text;
    }
  }
}
