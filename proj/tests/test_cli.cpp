#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "msda/eval.hpp"

using namespace msda;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(MSDA_CLI_PATH) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(fs::temp_directory_path() / ("msda_test_cli_" + std::to_string(::getpid())));
    fs::remove_all(*dir_);
    fs::create_directories(*dir_);
    const auto r = run("gen-data --out " + (*dir_ / "data").string() +
                       " --seed 3 --source-train 12 --target-train 12 --target-test 4"
                       " --source-test 4 --size 32");
    ASSERT_EQ(r.code, 0) << r.out;
    std::ofstream(*dir_ / "small.cfg") << "input_size = 32\nbase_channels = 4\nbatch_size = 4\n"
                                          "iterations = 4\nburn_in = 2\nlog_every = 1\n"
                                          "checkpoint_every = 2\ndata = "
                                       << (*dir_ / "data").string() << "\n";
  }
  static void TearDownTestSuite() {
    fs::remove_all(*dir_);
    delete dir_;
  }
  static std::string path(const std::string& rel) { return (*dir_ / rel).string(); }
  static std::string train_args(const std::string& out) {
    return "train --quiet --config " + path("small.cfg") + " --out " + path(out);
  }

  static inline fs::path* dir_ = nullptr;
};

}  // namespace

TEST_F(Cli, GenDataPrintsCountsAndIsReproducible) {
  const auto r = run("gen-data --out " + path("g1") +
                     " --seed 5 --source-train 3 --target-train 2 --target-test 1 --size 32");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(r.out.rfind("# gen-data resolved configuration\n", 0), 0u);
  EXPECT_NE(r.out.find("source_train 3"), std::string::npos);
  EXPECT_NE(r.out.find("records 6"), std::string::npos);
  ASSERT_EQ(run("gen-data --out " + path("g2") +
                " --seed 5 --source-train 3 --target-train 2 --target-test 1 --size 32")
                .code,
            0);
  EXPECT_EQ(slurp(path("g1/manifest.tsv")), slurp(path("g2/manifest.tsv")));
  EXPECT_EQ(slurp(path("g1/images/target_train/000001.ppm")),
            slurp(path("g2/images/target_train/000001.ppm")));
}

TEST_F(Cli, UsageAndIoErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("gen-data").code, 2);
  EXPECT_EQ(run("gen-data --out " + path("x") + " --bogus 1").code, 2);
  EXPECT_EQ(run("gen-data --out /proc/forbidden/dir --size 32").code, 2);
  EXPECT_EQ(run("eval --data " + path("data")).code, 2);
  EXPECT_EQ(run("eval --data " + path("data") + " --ckpt " + path("none.msda")).code, 2);
  EXPECT_EQ(run("train --config " + path("missing.cfg")).code, 2);
  EXPECT_EQ(run(train_args("bad") + " --scales F4").code, 2);
}

TEST_F(Cli, TrainEchoesConfigAndWritesArtifacts) {
  const auto r = run(train_args("run_a"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.rfind("# train resolved configuration\n", 0), 0u);
  EXPECT_NE(r.out.find("grl_lambda = 0.1\n"), std::string::npos);
  EXPECT_NE(r.out.find("scales_adapted = F1,F2,F3\n"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("run_a/final.msda")));
  EXPECT_TRUE(fs::exists(path("run_a/ckpt_000002.msda")));
  const auto csv = slurp(path("run_a/metrics.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);

  // Same flags again: identical artifacts.
  ASSERT_EQ(run(train_args("run_b")).code, 0);
  EXPECT_EQ(csv, slurp(path("run_b/metrics.csv")));
  EXPECT_EQ(slurp(path("run_a/final.msda")), slurp(path("run_b/final.msda")));
}

TEST_F(Cli, ResumeMatchesUninterrupted) {
  ASSERT_EQ(run(train_args("full")).code, 0);
  ASSERT_EQ(run(train_args("half") + " --iterations 2").code, 0);
  ASSERT_EQ(run(train_args("half") + " --resume " + path("half/final.msda")).code, 0);
  EXPECT_EQ(slurp(path("full/metrics.csv")), slurp(path("half/metrics.csv")));
  EXPECT_EQ(slurp(path("full/final.msda")), slurp(path("half/final.msda")));
}

TEST_F(Cli, NoAdaptLogsZeroDomainLoss) {
  ASSERT_EQ(run(train_args("plain") + " --no-adapt").code, 0);
  std::ifstream in(path("plain/metrics.csv"));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 9u);
    EXPECT_EQ(f[2], "0");
    EXPECT_EQ(f[3], "0");
    EXPECT_EQ(f[4], "0");
  }
  EXPECT_EQ(load_checkpoint(path("plain/final.msda")).params.count(Group::kDan), 0u);
}

TEST_F(Cli, ScalesFlagLimitsDanParameters) {
  ASSERT_EQ(run(train_args("f3") + " --scales F3 --iterations 1").code, 0);
  const auto ck = load_checkpoint(path("f3/final.msda"));
  for (const auto& e : ck.params.entries()) {
    if (e.group == Group::kDan) EXPECT_TRUE(e.name.starts_with("dan/f3/")) << e.name;
  }
  EXPECT_EQ(ck.params.count(Group::kDan), 4u);
}

TEST_F(Cli, EvalOnOracleDetectionsPrintsPerfectMap) {
  const auto manifest = load_manifest(path("data"));
  std::vector<Detection> dets;
  const auto test = load_labeled(manifest, Split::kTargetTest);
  for (std::size_t i = 0; i < test.size(); ++i) {
    for (const auto& g : test[i].boxes) dets.push_back({g.class_id, g.box, 1.0, i});
  }
  write_detections(path("oracle.txt"), dets);
  const auto r = run("eval --data " + path("data") + " --detections " + path("oracle.txt"));
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("mAP,1.000000"), std::string::npos) << r.out;
}

TEST_F(Cli, EvalStripPredictPipeline) {
  ASSERT_EQ(run(train_args("pipe")).code, 0);
  const auto ev = run("eval --data " + path("data") + " --ckpt " + path("pipe/final.msda") +
                      " --dump " + path("pipe/dets.txt") + " --confusion");
  ASSERT_EQ(ev.code, 0) << ev.out;
  EXPECT_NE(ev.out.find("class,ap\n"), std::string::npos);
  EXPECT_NE(ev.out.find("domain_confusion,"), std::string::npos);

  ASSERT_EQ(run("strip --ckpt " + path("pipe/final.msda") + " --out " + path("pipe/s.msda")).code,
            0);
  const auto ev2 = run("eval --data " + path("data") + " --ckpt " + path("pipe/s.msda") +
                       " --dump " + path("pipe/dets2.txt"));
  ASSERT_EQ(ev2.code, 0);
  EXPECT_EQ(slurp(path("pipe/dets.txt")), slurp(path("pipe/dets2.txt")));
  // A stripped checkpoint has no DAN to query.
  EXPECT_EQ(run("eval --data " + path("data") + " --ckpt " + path("pipe/s.msda") + " --confusion")
                .code,
            2);

  const auto pr = run("predict --ckpt " + path("pipe/s.msda") + " --image " +
                      path("data/images/target_test/000000.ppm") + " --conf 0.99");
  EXPECT_EQ(pr.code, 0);
  EXPECT_EQ(pr.out.rfind("# predict resolved configuration\n", 0), 0u);
  EXPECT_EQ(run("predict --ckpt " + path("pipe/s.msda") + " --image " + path("nope.ppm")).code, 2);
}

TEST_F(Cli, AblatePrintsEightRows) {
  const auto r = run("ablate --config " + path("small.cfg") + " --iterations 1 --seeds 1 --out " +
                     path("abl") + " --csv " + path("abl.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto csv = slurp(path("abl.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
  EXPECT_EQ(csv.rfind("subset,ap_circle,ap_square,ap_triangle,map\nbaseline,", 0), 0u);
  EXPECT_NE(r.out.find(csv), std::string::npos);
}

TEST_F(Cli, DivergenceExitsThree) {
  std::ofstream(path("hot.cfg")) << "input_size = 32\nbase_channels = 4\nbatch_size = 4\n"
                                    "iterations = 6\nburn_in = 0\ngrad_clip = 0\n"
                                    "learning_rate = 1e12\ndata = "
                                 << path("data") << "\n";
  EXPECT_EQ(run("train --quiet --config " + path("hot.cfg") + " --out " + path("hot")).code, 3);
}

TEST_F(Cli, GradAuditPassesAndExitsZero) {
  const auto r = run("grad-audit --seeds 2");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("conv2d"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}
