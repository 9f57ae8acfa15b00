#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "dcshield/delay_model.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(DCSHIELD_CLI) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) throw std::runtime_error("popen failed");
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("dcshield_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    ASSERT_EQ(cli("build-env --env car-following --out " + p("car")).code, 0);
    std::ofstream cfg(p("small.json"));
    cfg << R"({"width": 4, "height": 4, "goal": [3, 3], "obstacle_start": [2, 2], "horizon": 30})";
    cfg.close();
    ASSERT_EQ(cli("build-env --env gridworld --config " + p("small.json") + " --out " + p("grid")).code, 0);
    for (int tau : {1, 3}) {
      std::ofstream dm(p("ref" + std::to_string(tau) + ".dm"));
      dcshield::write_delay_model(dm, dcshield::DelayModel::reference(tau));
    }
  }

  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string p(const std::string& name) { return (dir_ / name).string(); }

  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("verify").code, 2);
  EXPECT_EQ(cli("verify --env " + p("car") + " --stop sometimes").code, 2);
  EXPECT_EQ(cli("build-dcmdp --env " + p("car") + " --delay-model " + p("ref1.dm") + " --constant-delay 1").code, 2);
  EXPECT_EQ(cli("build-dcmdp --env " + p("car")).code, 2);
  EXPECT_EQ(cli("--help").code, 0);
}

TEST_F(Cli, BuildEnvWritesModelMetadataAndManifest) {
  EXPECT_TRUE(fs::exists(p("car.mdp")));
  EXPECT_TRUE(fs::exists(p("car.meta.json")));
  EXPECT_TRUE(fs::exists(p("car.manifest.json")));
  std::ifstream meta(p("car.meta.json"));
  const auto j = nlohmann::json::parse(meta);
  EXPECT_EQ(j["env"], "car-following");
  EXPECT_EQ(j["controller"].size(), 484u);
}

TEST_F(Cli, BuildDcmdpReportsTheProductSize) {
  const auto r = cli("build-dcmdp --env " + p("car") + " --delay-model " + p("ref3.dm"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("states 75504"), std::string::npos) << r.out;
  const auto c = cli("--json build-dcmdp --env " + p("car") + " --constant-delay 2 --out " + p("car_c2"));
  EXPECT_EQ(c.code, 0);
  const auto j = nlohmann::json::parse(c.out.substr(c.out.find('{')));
  EXPECT_EQ(j["states"], 484u * 25u);
  EXPECT_TRUE(fs::exists(p("car_c2.mdp")));
  EXPECT_TRUE(fs::exists(p("car_c2.map")));
}

TEST_F(Cli, VerifyPrintsExtremalAndControllerValues) {
  const auto r = cli("--json verify --env " + p("grid") + " --delay-model " + p("ref1.dm"));
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out.substr(r.out.find('{')));
  EXPECT_LE(j["expected_vmin"].get<double>(), j["expected_vpolicy"].get<double>() + 1e-9);
  EXPECT_LE(j["expected_vpolicy"].get<double>(), j["expected_vmax"].get<double>() + 1e-9);
  const auto plain = cli("verify --env " + p("grid") + " --stop residual");
  EXPECT_EQ(plain.code, 0);
  EXPECT_NE(plain.out.find("E_Init[Vmax]"), std::string::npos);
}

TEST_F(Cli, InfeasibleTargetExitsWithThree) {
  const auto r = cli("--json verify --env " + p("grid") + " --constant-delay 2");
  ASSERT_EQ(r.code, 0);
  const double vmax = nlohmann::json::parse(r.out.substr(r.out.find('{')))["expected_vmax"].get<double>();
  ASSERT_LT(vmax, 0.99) << "the small gridworld should not be perfectly winnable under delay";
  const std::string delta = std::to_string(std::min(1.0, vmax + 0.01));
  EXPECT_EQ(cli("synthesize-shield --env " + p("grid") + " --constant-delay 2 --mode policy-free --delta " + delta +
                " --out " + p("never.shield"))
                .code,
            3);
  EXPECT_FALSE(fs::exists(p("never.shield")));
}

TEST_F(Cli, ShieldBoundToAnotherProductExitsWithFour) {
  ASSERT_EQ(cli("synthesize-shield --env " + p("grid") + " --delay-model " + p("ref1.dm") +
                " --mode policy-free --delta 0.5 --out " + p("g1.shield"))
                .code,
            0);
  EXPECT_EQ(cli("simulate --env " + p("grid") + " --constant-delay 1 --shield " + p("g1.shield") + " --episodes 2").code,
            4);
  EXPECT_EQ(cli("simulate --env " + p("grid") + " --delay-model " + p("ref1.dm") + " --shield " + p("g1.shield") +
                " --episodes 2")
                .code,
            0);
}

TEST_F(Cli, SimulateWritesALogWhoseSummaryMatches) {
  const auto r = cli("--json simulate --env " + p("grid") + " --delay-model " + p("ref1.dm") +
                     " --episodes 20 --seed 3 --log " + p("run.jsonl"));
  ASSERT_EQ(r.code, 0);
  const auto printed = nlohmann::json::parse(r.out.substr(r.out.find('{')));
  std::ifstream log(p("run.jsonl"));
  std::string line, last;
  std::size_t episodes = 0;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j["kind"] == "episode") ++episodes;
    last = line;
  }
  EXPECT_EQ(episodes, 20u);
  const auto summary = nlohmann::json::parse(last);
  EXPECT_EQ(summary["kind"], "summary");
  EXPECT_EQ(summary["satisfied"], printed["satisfied"]);
  // Same seed, same numbers.
  const auto again = cli("--json simulate --env " + p("grid") + " --delay-model " + p("ref1.dm") +
                         " --episodes 20 --seed 3");
  EXPECT_EQ(nlohmann::json::parse(again.out.substr(again.out.find('{')))["satisfied"], printed["satisfied"]);
}

TEST_F(Cli, EstimateDelayModelFromTraces) {
  std::ofstream csv(p("trace.csv"));
  csv << "timestamp_ms,delay_ms\n0,37\n50,137\n100,37\n150,37\n200,137\n250,237\n300,37\n";
  csv.close();
  const auto r = cli("estimate-delay-model --trace " + p("trace.csv") + " --out " + p("est.dm"));
  ASSERT_EQ(r.code, 0);
  std::ifstream in(p("est.dm"));
  const auto d = dcshield::read_delay_model(in);
  EXPECT_EQ(d.tau_max(), 2);
  EXPECT_DOUBLE_EQ(d(0, 1), 2.0 / 3.0);
  std::ofstream bad(p("bad.csv"));
  bad << "nope\n";
  bad.close();
  EXPECT_EQ(cli("estimate-delay-model --trace " + p("bad.csv") + " --out " + p("x.dm")).code, 1);
}
