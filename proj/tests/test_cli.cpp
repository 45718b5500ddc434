#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <sstream>

#include "karina/cli/app.hpp"
#include "test_util.hpp"

using namespace karina;
using karina::test::read_file;
using karina::test::scratch_dir;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(KARINA_SOURCE_DIR) / "configs";

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "karina");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

Result smoke(const std::string& command, const fs::path& out, std::vector<std::string> extra = {}) {
  std::vector<std::string> args{command, "--config", (kConfigs / "smoke.cfg").string(), "--out", out.string(), "--quiet"};
  for (const auto& e : extra) {
    args.push_back("--set");
    args.push_back(e);
  }
  return invoke(args);
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string l;
  while (std::getline(is, l))
    if (!l.empty()) out.push_back(l);
  return out;
}

/// Trained smoke checkpoint shared by the tests below.
const fs::path& smoke_model() {
  static const fs::path dir = [] {
    const auto d = scratch_dir("cli_model");
    const auto r = smoke("train", d);
    EXPECT_EQ(r.code, 0) << r.err;
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(invoke({}).code, 1);
  EXPECT_EQ(invoke({"train"}).code, 1);
  EXPECT_EQ(invoke({"bogus", "--out", "x"}).code, 1);
  const auto d = scratch_dir("cli_usage");
  const auto r = invoke({"train", "--out", d.string(), "--set", "no.such_key=1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("no.such_key"), std::string::npos) << r.err;
}

TEST(Cli, MissingDataPathNamesKey) {
  const auto d = scratch_dir("cli_missing");
  const auto r = smoke("train", d, {"data.source=file"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("data.train"), std::string::npos) << r.err;
  EXPECT_TRUE(fs::exists(d / "FAILED"));
  EXPECT_TRUE(fs::exists(d / "resolved_config.txt"));
}

TEST(Cli, SmokeTrainIsFastAndComplete) {
  const auto d = scratch_dir("cli_smoke");
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = smoke("train", d);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_LT(seconds, 60.0);
  for (auto f : {"checkpoint.bin", "norm_stats.txt", "train_report.csv", "resolved_config.txt"})
    EXPECT_TRUE(fs::exists(d / f)) << f;
  EXPECT_EQ(lines(read_file(d / "train_report.csv")).size(), 3u);
  EXPECT_FALSE(fs::exists(d / "FAILED"));
}

TEST(Cli, RerunsAreByteIdentical) {
  const auto a = scratch_dir("cli_det_a"), b = scratch_dir("cli_det_b"), c = scratch_dir("cli_det_c");
  ASSERT_EQ(smoke("train", a).code, 0);
  ASSERT_EQ(smoke("train", b).code, 0);
  EXPECT_EQ(read_file(a / "checkpoint.bin"), read_file(b / "checkpoint.bin"));
  EXPECT_EQ(read_file(a / "train_report.csv"), read_file(b / "train_report.csv"));
  // The resolved copy alone reproduces the run.
  ASSERT_EQ(invoke({"train", "--config", (a / "resolved_config.txt").string(), "--out", c.string(), "--quiet"}).code, 0);
  EXPECT_EQ(read_file(a / "checkpoint.bin"), read_file(c / "checkpoint.bin"));
  EXPECT_EQ(read_file(a / "resolved_config.txt"), read_file(c / "resolved_config.txt"));
}

TEST(Cli, SeedFlagChangesTheRun) {
  const auto a = scratch_dir("cli_seed");
  ASSERT_EQ(invoke({"train", "--config", (kConfigs / "smoke.cfg").string(), "--out", a.string(), "--quiet", "--seed", "3"})
                .code,
            0);
  EXPECT_NE(read_file(a / "checkpoint.bin"), read_file(smoke_model() / "checkpoint.bin"));
  EXPECT_NE(read_file(a / "resolved_config.txt").find("seed=3"), std::string::npos);
}

TEST(Cli, TruthAgainstItselfScoresPerfectly) {
  const auto d = scratch_dir("cli_truth");
  const auto r = smoke("evaluate", d, {"eval.forecast=truth", "eval.max_lead=3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(read_file(d / "metrics.csv"));
  ASSERT_EQ(rows.front(), "channel,lead_days,metric,value");
  std::size_t rmse = 0, acc = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto value = rows[i].substr(rows[i].rfind(',') + 1);
    if (rows[i].find(",rmse,") != std::string::npos) {
      EXPECT_EQ(value, "0") << rows[i];
      ++rmse;
    } else {
      EXPECT_EQ(value, "1") << rows[i];
      ++acc;
    }
  }
  // Three scored channels (Z500, T850, TISR) by three leads.
  EXPECT_EQ(rmse, 9u);
  EXPECT_EQ(acc, 9u);
}

TEST(Cli, EvaluateWritesTablesAndBaseline) {
  const auto d = scratch_dir("cli_eval");
  const auto r = smoke("evaluate", d, {"eval.checkpoint=" + (smoke_model() / "checkpoint.bin").string(),
                                       "eval.max_lead=4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines(read_file(d / "metrics.csv")).size(), 1u + 3u * 4u * 2u);
  EXPECT_EQ(lines(read_file(d / "persistence_metrics.csv")).size(), 1u + 3u * 4u * 2u);
  const auto wide = lines(read_file(d / "rmse_vs_lead.csv"));
  ASSERT_EQ(wide.size(), 5u);
  EXPECT_EQ(wide.front(), "lead_days,Z500,T850,TISR");
}

TEST(Cli, EvaluateRejectsGridMismatch) {
  const auto d = scratch_dir("cli_grid");
  const auto r = smoke("evaluate", d, {"eval.checkpoint=" + (smoke_model() / "checkpoint.bin").string(),
                                       "synthetic.n_lat=8", "synthetic.n_lon=16"});
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(fs::exists(d / "FAILED"));
}

TEST(Cli, RolloutFileCountAndDrift) {
  const auto d = scratch_dir("cli_rollout");
  const auto ckpt = (smoke_model() / "checkpoint.bin").string();
  ASSERT_EQ(smoke("rollout", d, {"rollout.checkpoint=" + ckpt, "rollout.horizon=4", "rollout.single_file=false"}).code, 0);
  for (int l = 1; l <= 4; ++l) {
    char name[64];
    std::snprintf(name, sizeof name, "forecast_lead_%03d.grd", l);
    EXPECT_TRUE(fs::exists(d / name)) << name;
  }
  EXPECT_FALSE(fs::exists(d / "forecast_lead_005.grd"));
  const auto drift = lines(read_file(d / "drift.csv"));
  ASSERT_EQ(drift.size(), 1u + 4u * 4u);  // four channels including OROG

  // Recompute the std column from the emitted (denormalized) fields.
  const auto stats = NormStats::load(smoke_model() / "norm_stats.txt");
  const auto lead2 = read_grid(d / "forecast_lead_002.grd");
  auto frame = lead2.frame_copy(0);
  for (std::size_t c = 0; c < stats.size(); ++c)
    for (std::size_t p = 0; p < lead2.plane(); ++p)
      frame[c * lead2.plane() + p] = static_cast<float>((frame[c * lead2.plane() + p] - stats.mean[c]) / stats.stdev[c]);
  const auto st = channel_stats(frame.data(), lead2.grid());
  const auto row = drift[1 + 4 + 0];  // step 2, first channel
  ASSERT_EQ(row.substr(0, 7), "2,Z500,");
  std::vector<std::string> cols;
  std::stringstream ss(row);
  for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
  EXPECT_NEAR(std::stod(cols[3]), st.stdev, 1e-5 * (1.0 + st.stdev));
}

TEST(Cli, RolloutHorizonOneMatchesEvaluateField) {
  const auto ckpt = (smoke_model() / "checkpoint.bin").string();
  const auto r = scratch_dir("cli_r1"), e = scratch_dir("cli_e1");
  ASSERT_EQ(smoke("rollout", r, {"rollout.checkpoint=" + ckpt, "rollout.horizon=1"}).code, 0);
  ASSERT_EQ(smoke("evaluate", e, {"eval.checkpoint=" + ckpt, "eval.max_lead=1", "eval.save_fields=true"}).code, 0);
  const auto a = read_grid(r / "forecast.grd"), b = read_grid(e / "forecast_init0.grd");
  ASSERT_EQ(a.n_time(), 1u);
  EXPECT_EQ(a.data, b.data);
  EXPECT_EQ(a.dates, b.dates);
}

TEST(Cli, FinetuneContinuesFromCheckpoint) {
  const auto d = scratch_dir("cli_finetune");
  const auto r = smoke("finetune", d, {"finetune.checkpoint=" + (smoke_model() / "checkpoint.bin").string(),
                                       "finetune.phases=0,12@0.001;0,6,12,18@0.0005", "finetune.epochs=1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines(read_file(d / "finetune_report.csv")).size(), 3u);
  EXPECT_NE(read_file(d / "checkpoint.bin"), read_file(smoke_model() / "checkpoint.bin"));
  const auto bad = scratch_dir("cli_finetune_bad");
  EXPECT_EQ(smoke("finetune", bad, {"finetune.phases=0,12@0.001"}).code, 1);
}

TEST(Cli, AblateEmitsThreeVariantRows) {
  const auto a = scratch_dir("cli_ablate_a"), b = scratch_dir("cli_ablate_b");
  const std::vector<std::string> sets{"train.epochs=1", "ablate.circular=false", "ablate.leads=1,2",
                                      "ablate.kernel_sweep=true"};
  ASSERT_EQ(smoke("ablate", a, sets).code, 0);
  ASSERT_EQ(smoke("ablate", b, sets).code, 0);
  const auto rows = lines(read_file(a / "ablation.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "variant,Z500_d1,Z500_d2,T850_d1,T850_d2,TISR_d1,TISR_d2");
  EXPECT_EQ(rows[1].substr(0, 6), "plain,");
  EXPECT_EQ(rows[2].substr(0, 7), "padded,");
  EXPECT_EQ(rows[3].substr(0, 13), "padded_senet,");
  EXPECT_EQ(lines(read_file(a / "kernel_sweep.csv")).size(), 4u);
  EXPECT_EQ(read_file(a / "ablation.csv"), read_file(b / "ablation.csv"));
  EXPECT_FALSE(fs::exists(a / "pole_comparison.csv"));
}

TEST(Cli, GenerateWritesAllSplits) {
  const auto d = scratch_dir("cli_generate");
  ASSERT_EQ(smoke("generate", d).code, 0);
  const auto g = read_grid(d / "synthetic.grd");
  EXPECT_EQ(g.n_time(), 42u);
  EXPECT_EQ(g.channels.size(), 4u);
}
