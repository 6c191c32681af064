#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

using nlohmann::json;

namespace {

std::string lab_binary() {
  const char* env = std::getenv("MAMBA3_LAB_BIN");
  if (env == nullptr) throw std::runtime_error("MAMBA3_LAB_BIN is not set");
  return env;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

RunResult run_lab(const std::string& args) {
  const std::string out_path =
      (std::filesystem::temp_directory_path() / "m3_cli_stdout.txt").string();
  const std::string err_path =
      (std::filesystem::temp_directory_path() / "m3_cli_stderr.txt").string();
  const std::string cmd =
      lab_binary() + " " + args + " > " + out_path + " 2> " + err_path;
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  std::remove(out_path.c_str());
  std::remove(err_path.c_str());
  return r;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(CliVerify, AllSuitesPassWithReport) {
  const RunResult r = run_lab("verify --suite all --tol 1e-10 --seed 42 --trials 10");
  EXPECT_EQ(r.exit_code, 0) << r.err;
  const json rep = json::parse(r.out);
  EXPECT_EQ(rep.at("config").at("subcommand"), "verify");
  EXPECT_EQ(rep.at("config").at("seed"), 42);
  EXPECT_TRUE(rep.contains("wall_time_s"));
  ASSERT_FALSE(rep.at("checks").empty());
  for (const auto& c : rep.at("checks")) {
    EXPECT_TRUE(c.at("pass").get<bool>()) << c.dump();
    EXPECT_TRUE(c.contains("max_err"));
    EXPECT_TRUE(c.contains("name"));
  }
}

TEST(CliVerify, DeterministicChecksAcrossRuns) {
  const RunResult a = run_lab("verify --suite equivalence --seed 7 --trials 6");
  const RunResult b = run_lab("verify --suite equivalence --seed 7 --trials 6");
  ASSERT_EQ(a.exit_code, 0);
  ASSERT_EQ(b.exit_code, 0);
  EXPECT_EQ(json::parse(a.out).at("checks"), json::parse(b.out).at("checks"));
}

TEST(CliVerify, AddingTrialsPreservesEarlierStreams) {
  // substreamed trials: errors can only grow when more instances are added
  const RunResult a = run_lab("verify --suite rope --seed 11 --trials 4");
  const RunResult b = run_lab("verify --suite rope --seed 11 --trials 8");
  ASSERT_EQ(a.exit_code, 0);
  ASSERT_EQ(b.exit_code, 0);
  const json ca = json::parse(a.out).at("checks");
  const json cb = json::parse(b.out).at("checks");
  for (std::size_t i = 0; i < ca.size(); ++i)
    EXPECT_LE(ca[i].at("max_err").get<double>(), cb[i].at("max_err").get<double>());
}

TEST(CliVerify, CorruptedMaskFailsNamingSuite) {
  const RunResult r = run_lab("verify --suite mask --corrupt-mask 1e-6 --trials 5");
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.err.find("mask"), std::string::npos);
  const json rep = json::parse(r.out);
  bool saw_fail = false;
  for (const auto& c : rep.at("checks"))
    if (!c.at("pass").get<bool>()) {
      saw_fail = true;
      EXPECT_NE(c.at("name").get<std::string>().find("mask"), std::string::npos);
    }
  EXPECT_TRUE(saw_fail);
}

TEST(CliVerify, UsageErrors) {
  EXPECT_EQ(run_lab("").exit_code, 2);
  EXPECT_EQ(run_lab("bogus-subcommand").exit_code, 2);
  EXPECT_EQ(run_lab("verify --suite no-such-suite").exit_code, 2);
  EXPECT_EQ(run_lab("sweep --kind no-such-kind").exit_code, 2);
}

TEST(CliConverge, SecondOrderSlopeInCsv) {
  const RunResult r = run_lab("converge --rule exp-trapezoidal --lambda 0.5");
  ASSERT_EQ(r.exit_code, 0);
  const auto rows = parse_csv(r.out);
  ASSERT_GE(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"rule", "delta", "error", "fitted_slope"}));
  const double slope = std::stod(rows[1][3]);
  EXPECT_GT(slope, 1.8);
  EXPECT_LT(slope, 2.2);
  EXPECT_NE(r.err.find("fitted slope"), std::string::npos);
}

TEST(CliConverge, FirstOrderRulesAgree) {
  const RunResult a = run_lab("converge --rule exp-euler");
  const RunResult b = run_lab("converge --rule forward-euler");
  ASSERT_EQ(a.exit_code, 0);
  ASSERT_EQ(b.exit_code, 0);
  const double sa = std::stod(parse_csv(a.out)[1][3]);
  const double sb = std::stod(parse_csv(b.out)[1][3]);
  EXPECT_GT(sa, 0.8);
  EXPECT_LT(sa, 1.2);
  EXPECT_NEAR(sa, sb, 0.2);
}

TEST(CliSweep, FlopsTotalsExactAtMatchedSizes) {
  const RunResult r = run_lab("sweep --kind flops --t-list 64,256 --n-list 16,32 --r-max 4");
  ASSERT_EQ(r.exit_code, 0);
  const auto rows = parse_csv(r.out);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"T", "C", "N", "P", "R", "intra", "inter",
                                               "total", "leading"}));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const unsigned long long T = std::stoull(rows[i][0]);
    const unsigned long long N = std::stoull(rows[i][2]);
    const unsigned long long R = std::stoull(rows[i][4]);
    const unsigned long long leading = std::stoull(rows[i][8]);
    EXPECT_EQ(leading, 8ull * T * R * N * N) << "row " << i;
  }
}

TEST(CliSweep, IntensityMonotoneInRank) {
  const RunResult r = run_lab("sweep --kind intensity --n-list 128 --p 64 --r-max 8");
  ASSERT_EQ(r.exit_code, 0);
  const auto rows = parse_csv(r.out);
  ASSERT_EQ(rows.size(), 9u);
  double prev = 0.0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double intensity = std::stod(rows[i][6]);
    EXPECT_GT(intensity, prev) << "R=" << rows[i][2];
    prev = intensity;
  }
}

TEST(CliTrain, TinyRunEmitsHistoryAndReport) {
  const std::string hist =
      (std::filesystem::temp_directory_path() / "m3_cli_hist.csv").string();
  const std::string rep_path =
      (std::filesystem::temp_directory_path() / "m3_cli_report.json").string();
  const RunResult r = run_lab(
      "train --task parity --d-model 16 --state 16 --stages 8,12 --eval-len 16 "
      "--steps-per-stage 15 --batch 8 --eval-every 10 --eval-instances 32 --lr 3e-3 "
      "--history-out " + hist + " --report-out " + rep_path);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  const auto rows = parse_csv(slurp(hist));
  ASSERT_EQ(rows.size(), 31u);  // header + 2 stages x 15 steps
  EXPECT_EQ(rows[0],
            (std::vector<std::string>{"step", "stage", "max_len", "train_loss",
                                      "eval_scaled_acc"}));
  const json rep = json::parse(slurp(rep_path));
  EXPECT_EQ(rep.at("config").at("task"), "parity");
  EXPECT_FALSE(rep.at("diverged").get<bool>());
  EXPECT_GE(rep.at("final_scaled_acc").get<double>(), 0.0);
  std::remove(hist.c_str());
  std::remove(rep_path.c_str());
}

TEST(CliConfigFile, KeysMirrorFlags) {
  const std::string cfg_path =
      (std::filesystem::temp_directory_path() / "m3_cli_cfg.ini").string();
  {
    std::ofstream f(cfg_path);
    f << "verify.suite=rope\nverify.trials=5\nverify.seed=13\n";
  }
  const RunResult r = run_lab("--config " + cfg_path + " verify");
  EXPECT_EQ(r.exit_code, 0) << r.err;
  const json rep = json::parse(r.out);
  EXPECT_EQ(rep.at("config").at("suite"), "rope");
  EXPECT_EQ(rep.at("config").at("trials"), 5);
  EXPECT_EQ(rep.at("config").at("seed"), 13);
  std::remove(cfg_path.c_str());
}
