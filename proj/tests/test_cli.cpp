#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kCli = SEQTR_CLI;
const fs::path kConfigs = SEQTR_CONFIG_DIR;

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("seqtr_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
             std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  int run(const std::string& args) {
    const std::string cmd = kCli.string() + " " + args + " >" + (root_ / "stdout.txt").string() + " 2>" +
                            (root_ / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string stderr_text() const { return slurp(root_ / "stderr.txt"); }
  std::string stdout_text() const { return slurp(root_ / "stdout.txt"); }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  fs::path write_config(const std::string& name, const json& j) const {
    const fs::path p = root_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }
  static json toy() {
    std::ifstream in(kConfigs / "toy.json");
    return json::parse(in);
  }
  // gen-data + train with the toy config; returns the run directory
  fs::path prepare_run(std::size_t steps = 40) {
    json cfg = toy();
    cfg["optimizer"]["steps"] = steps;
    cfg["data"]["path"] = (root_ / "data").string();
    const fs::path c = write_config("run.json", cfg);
    EXPECT_EQ(run("gen-data --config " + c.string() + " --out " + (root_ / "data").string()), 0) << stderr_text();
    EXPECT_EQ(run("train --config " + c.string() + " --out " + (root_ / "run").string()), 0) << stderr_text();
    return root_ / "run";
  }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, GenDataIsDeterministic) {
  const std::string cfg = (kConfigs / "toy.json").string();
  ASSERT_EQ(run("gen-data --config " + cfg + " --out " + (root_ / "a").string()), 0) << stderr_text();
  ASSERT_EQ(run("gen-data --config " + cfg + " --out " + (root_ / "b").string()), 0) << stderr_text();
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root_ / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(root_ / "b" / fs::relative(e.path(), root_ / "a"))) << e.path();
  }
  EXPECT_GT(files, 1u);
  ASSERT_EQ(run("gen-data --config " + cfg + " --seed 2 --out " + (root_ / "c").string()), 0);
  bool differs = false;
  for (const auto& e : fs::recursive_directory_iterator(root_ / "a"))
    if (e.is_regular_file() && slurp(e.path()) != slurp(root_ / "c" / fs::relative(e.path(), root_ / "a")))
      differs = true;
  EXPECT_TRUE(differs);
}

TEST_F(Cli, InfeasibleBenchmarkIsConfigError) {
  json cfg = toy();
  cfg["data"]["benchmark"]["num_queries"] = 1000;
  const fs::path c = write_config("bad.json", cfg);
  EXPECT_EQ(run("gen-data --config " + c.string() + " --out " + (root_ / "d").string()), 1);
  EXPECT_NE(stderr_text().find("config error"), std::string::npos);
}

TEST_F(Cli, UnknownConfigKeyIsConfigError) {
  json cfg = toy();
  cfg["model"]["heads_typo"] = 3;
  const fs::path c = write_config("bad.json", cfg);
  EXPECT_EQ(run("gen-data --config " + c.string() + " --out " + (root_ / "d").string()), 1);
  EXPECT_NE(stderr_text().find("heads_typo"), std::string::npos);
}

TEST_F(Cli, MissingConfigFileIsIoError) {
  EXPECT_EQ(run("gen-data --config " + (root_ / "nope.json").string() + " --out " + (root_ / "d").string()), 2);
}

TEST_F(Cli, TrainZeroStepsWritesOneLossRow) {
  const fs::path run_dir = prepare_run(0);
  const std::string curve = slurp(run_dir / "loss_curve.csv");
  EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 2);
  EXPECT_TRUE(fs::exists(run_dir / "checkpoint"));
}

TEST_F(Cli, TrainMissingDataIsIoError) {
  json cfg = toy();
  cfg["data"]["path"] = (root_ / "absent").string();
  const fs::path c = write_config("run.json", cfg);
  EXPECT_EQ(run("train --config " + c.string() + " --out " + (root_ / "run").string()), 2);
}

TEST_F(Cli, TrainRejectsDatasetOfWrongWidth) {
  json cfg = toy();
  cfg["data"]["path"] = (root_ / "data").string();
  ASSERT_EQ(run("gen-data --config " + write_config("a.json", cfg).string() + " --out " + (root_ / "data").string()), 0);
  cfg["model"]["d"] = 12;
  cfg["data"]["benchmark"]["channels"] = 12;
  EXPECT_EQ(run("train --config " + write_config("b.json", cfg).string() + " --out " + (root_ / "run").string()), 1);
}

TEST_F(Cli, EvalWritesResultsAndSummary) {
  const fs::path run_dir = prepare_run();
  const std::string data = (root_ / "data").string();
  ASSERT_EQ(run("eval --checkpoint " + (run_dir / "checkpoint").string() + " --data " + data + " --out " +
                (root_ / "eval").string()),
            0)
      << stderr_text();
  const json s = json::parse(slurp(root_ / "eval" / "summary.json"));
  EXPECT_GE(s.at("mAP").get<double>(), 0.0);
  EXPECT_LE(s.at("mAP").get<double>(), 1.0);
  const std::string results = slurp(root_ / "eval" / "results.csv");
  EXPECT_EQ(results.substr(0, results.find('\n')), "query_id,rank,scene_id,score,correct");
  std::istringstream rows(results.substr(results.find('\n') + 1));
  std::set<std::string> queries;
  for (std::string line; std::getline(rows, line);) queries.insert(line.substr(0, line.find(',')));
  EXPECT_EQ(queries.size(), 6u);
  EXPECT_NE(stdout_text().find("mAP"), std::string::npos);
}

TEST_F(Cli, CbgmWithNoContextMatchesPlainEval) {
  const fs::path run_dir = prepare_run();
  const std::string base = "eval --checkpoint " + (run_dir / "checkpoint").string() + " --data " +
                           (root_ / "data").string() + " --out ";
  ASSERT_EQ(run(base + (root_ / "plain").string()), 0) << stderr_text();
  ASSERT_EQ(run(base + (root_ / "cbgm").string() + " --cbgm --k2 0"), 0) << stderr_text();
  EXPECT_EQ(slurp(root_ / "plain" / "results.csv"), slurp(root_ / "cbgm" / "results.csv"));
  json a = json::parse(slurp(root_ / "plain" / "summary.json"));
  json b = json::parse(slurp(root_ / "cbgm" / "summary.json"));
  for (const char* k : {"mAP", "top1", "top5", "top10"}) EXPECT_EQ(a.at(k), b.at(k)) << k;
}

TEST_F(Cli, SweepReportsOnePointPerGallerySize) {
  const fs::path run_dir = prepare_run();
  ASSERT_EQ(run("sweep --checkpoint " + (run_dir / "checkpoint").string() + " --data " + (root_ / "data").string() +
                " --gallery-sizes 4,10 --out " + (root_ / "sweep").string()),
            0)
      << stderr_text();
  const json s = json::parse(slurp(root_ / "sweep" / "summary.json"));
  ASSERT_EQ(s.at("curves").size(), 2u);
}

TEST_F(Cli, BadGallerySizeListIsConfigError) {
  const fs::path run_dir = prepare_run(0);
  EXPECT_EQ(run("sweep --checkpoint " + (run_dir / "checkpoint").string() + " --data " + (root_ / "data").string() +
                " --gallery-sizes 4,x --out " + (root_ / "sweep").string()),
            1);
}

TEST_F(Cli, EvalConfigWithOtherSchemeIsRejected) {
  const fs::path run_dir = prepare_run(0);
  json cfg = toy();
  cfg["model"]["scheme"] = "parallel";
  EXPECT_EQ(run("eval --checkpoint " + (run_dir / "checkpoint").string() + " --config " +
                write_config("p.json", cfg).string() + " --data " + (root_ / "data").string() + " --out " +
                (root_ / "e").string()),
            1);
}

TEST_F(Cli, EvalMissingCheckpointIsIoError) {
  EXPECT_EQ(run("eval --checkpoint " + (root_ / "none").string() + " --out " + (root_ / "e").string()), 2);
}

TEST_F(Cli, GradcheckDefaultPasses) {
  EXPECT_EQ(run("gradcheck"), 0) << stderr_text() << stdout_text();
  EXPECT_NE(stdout_text().find("max relative error"), std::string::npos);
}

TEST_F(Cli, GradcheckMinimalConfigPasses) {
  EXPECT_EQ(run("gradcheck --config " + (kConfigs / "gradcheck_minimal.json").string()), 0) << stderr_text();
}

TEST_F(Cli, GradcheckCorruptedBlockFailsWithCode4) {
  std::ifstream in(kConfigs / "gradcheck_minimal.json");
  json cfg = json::parse(in);
  cfg["gradcheck"]["corrupt_block"] = "softmax_rows";
  EXPECT_EQ(run("gradcheck --config " + write_config("g.json", cfg).string()), 4);
  EXPECT_NE(stderr_text().find("softmax_rows"), std::string::npos);
}

TEST_F(Cli, BenchWritesCsv) {
  ASSERT_EQ(run("bench --config " + (kConfigs / "toy.json").string() + " --out " + root_.string()), 0)
      << stderr_text();
  const std::string csv = slurp(root_ / "bench.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_NE(csv.find("\nshared,504,"), std::string::npos);
  EXPECT_NE(csv.find("\nparallel,1512,"), std::string::npos);
}

TEST_F(Cli, MissingSubcommandIsUsageError) { EXPECT_NE(run(""), 0); }
