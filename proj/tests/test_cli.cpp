#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string output;
};

Result cli(const std::string& args) {
  const std::string cmd = std::string(DEEPCLUST_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed");
  std::string out;
  char buf[4096];
  while (std::size_t got = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, got);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("deepclust_cli_" + std::string(
        ::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = (dir / "c.cfg").string();
    std::ofstream(config) << "data = blobs\nk = 3\nblobs_n_per_cluster = 50\nblobs_dim = 6\nhidden = 16\n"
                             "latent_dim = 3\nbatch_size = 32\npretrain_steps = 100\nfinetune_steps = 100\n"
                             "output_dir = " << (dir / "default_out").string() << "\n";
  }
  void TearDown() override { fs::remove_all(dir); }

  fs::path dir;
  std::string config;
};

}  // namespace

TEST_F(Cli, RunWritesReportWithMetrics) {
  const Result r = cli("run --config " + config + " --out " + (dir / "o").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto j = nlohmann::json::parse(slurp(dir / "o" / "report.json"));
  EXPECT_TRUE(j.contains("nmi"));
  EXPECT_TRUE(j["nmi"].is_number());
  EXPECT_TRUE(j["acc"].is_number());
  EXPECT_EQ(line_count(dir / "o" / "assignments.csv"), 150u);
  EXPECT_TRUE(fs::exists(dir / "o" / "model.ckpt"));
}

TEST_F(Cli, RunDefaultsToConfigOutputDir) {
  ASSERT_EQ(cli("run --config " + config).code, 0);
  EXPECT_TRUE(fs::exists(dir / "default_out" / "report.json"));
}

TEST_F(Cli, RepeatedRunsAgreeExceptWallClock) {
  ASSERT_EQ(cli("run --config " + config + " --out " + (dir / "a").string()).code, 0);
  ASSERT_EQ(cli("run --config " + config + " --out " + (dir / "b").string()).code, 0);
  auto a = nlohmann::ordered_json::parse(slurp(dir / "a" / "report.json"));
  auto b = nlohmann::ordered_json::parse(slurp(dir / "b" / "report.json"));
  a.erase("wall_clock_s");
  b.erase("wall_clock_s");
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_EQ(slurp(dir / "a" / "model.ckpt"), slurp(dir / "b" / "model.ckpt"));
}

TEST_F(Cli, StagedCommandsMatchRun) {
  const std::string s = (dir / "s").string();
  ASSERT_EQ(cli("run --config " + config + " --out " + (dir / "r").string()).code, 0);
  ASSERT_EQ(cli("pretrain --config " + config + " --out " + s).code, 0);
  ASSERT_EQ(cli("finetune --config " + config + " --checkpoint " + s + "/pretrained.ckpt --out " + s).code, 0);
  ASSERT_EQ(cli("cluster --config " + config + " --checkpoint " + s + "/finetuned.ckpt --out " + s).code, 0);
  EXPECT_EQ(slurp(dir / "s" / "assignments.csv"), slurp(dir / "r" / "assignments.csv"));
  EXPECT_EQ(slurp(dir / "s" / "finetuned.ckpt"), slurp(dir / "r" / "model.ckpt"));
}

TEST_F(Cli, EvaluateIdenticalFilesIsPerfect) {
  std::ofstream(dir / "p.csv") << "0\n0\n1\n1\n2\n";
  const Result r = cli("evaluate --pred " + (dir / "p.csv").string() + " --truth " + (dir / "p.csv").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.output, "nmi=1 acc=1\n");
}

TEST_F(Cli, EvaluateReadsLabelColumns) {
  std::ofstream(dir / "p.csv") << "id,cluster\n0,1\n1,1\n2,0\n3,0\n";
  std::ofstream(dir / "t.csv") << "0\n0\n1\n1\n";
  const Result r = cli("evaluate --pred " + (dir / "p.csv").string() + " --pred-column 1 --truth " +
                       (dir / "t.csv").string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output, "nmi=1 acc=1\n");
  std::ofstream(dir / "short.csv") << "0\n1\n";
  EXPECT_EQ(cli("evaluate --pred " + (dir / "short.csv").string() + " --truth " + (dir / "t.csv").string()).code, 1);
}

TEST_F(Cli, ExportEmbeddingsRowCounts) {
  ASSERT_EQ(cli("run --config " + config + " --out " + (dir / "o").string()).code, 0);
  const fs::path csv = dir / "z.csv", pca = dir / "pc.csv";
  const Result r = cli("export-embeddings --config " + config + " --checkpoint " + (dir / "o" / "model.ckpt").string() +
                       " --csv " + csv.string() + " --pca " + pca.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(line_count(csv), 151u);
  EXPECT_EQ(line_count(pca), 151u);
  const std::string head = slurp(pca).substr(0, slurp(pca).find('\n'));
  EXPECT_EQ(head, "sample_id,pc_0,pc_1");
  EXPECT_EQ(slurp(csv).substr(0, slurp(csv).find('\n')), "sample_id,assigned_cluster,z_0,z_1,z_2");
}

TEST_F(Cli, MissingConfigNamesThePath) {
  const Result r = cli("run --config " + (dir / "absent.cfg").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find((dir / "absent.cfg").string()), std::string::npos) << r.output;
}

TEST_F(Cli, BadConfigReportsLocation) {
  std::ofstream(dir / "bad.cfg") << "data = blobs\nk = 3\nalpha_constant = 1.5\n";
  const Result r = cli("run --config " + (dir / "bad.cfg").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("bad.cfg:3"), std::string::npos) << r.output;
}

TEST_F(Cli, UsageErrorsExitTwo) {
  const std::vector<std::string> cases = {"bogus", "", "run --config " + config + " --nope", "evaluate --pred x",
                                          "run --config"};
  for (const std::string& args : cases) {
    const Result r = cli(args);
    EXPECT_EQ(r.code, 2) << args << "\n" << r.output;
    EXPECT_NE(r.output.find("Usage"), std::string::npos) << args;
  }
  EXPECT_NE(cli("bogus").output.find("bogus"), std::string::npos);
  EXPECT_EQ(cli("--help").code, 0);
}
