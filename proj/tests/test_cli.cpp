#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sfnet/cli.hpp"

using namespace sfnet;
using namespace sfnet::cli;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() / ("sfnet_cli_" + std::string(info->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string path(const std::string& rel) const { return (root_ / rel).string(); }

  std::string make_dataset(std::size_t count = 4, const std::string& name = "data", std::uint64_t seed = 3) {
    const CliRun r = invoke({"gen", "--procedural", "3", "--count", std::to_string(count), "--seed", std::to_string(seed),
                       "--keypoints", "10", "--out", path(name)});
    EXPECT_EQ(r.code, kOk) << r.err;
    return path(name);
  }

  std::string write_config(const nlohmann::json& j) {
    const std::string p = path("config.json");
    std::ofstream(p) << j.dump();
    return p;
  }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(invoke({"bogus"}).code, kUsage);
  EXPECT_EQ(invoke({}).code, kUsage);
  const CliRun missing = invoke({"train", "--data", path("nowhere"), "--out", path("run")});
  EXPECT_EQ(missing.code, kData);
  EXPECT_NE(missing.err.find("manifest"), std::string::npos);
  const std::string data = make_dataset();
  EXPECT_EQ(invoke({"train", "--data", data, "--out", path("run"), "--config", write_config({{"lr_typo", 1}})}).code, kUsage);
  EXPECT_EQ(invoke({"eval", "--pairs", data, "--flow", "gt_flow.sfg", "--metric", "bogus"}).code, kUsage);
  EXPECT_EQ(invoke({"eval", "--pairs", data}).code, kUsage);
  EXPECT_EQ(invoke({"gradcheck", "--fixture", "1"}).code, kUsage);
}

TEST_F(Cli, GenWritesPairsReproducibly) {
  const std::string a = make_dataset(5, "a", 9), b = make_dataset(5, "b", 9);
  std::size_t dirs = 0;
  for (const auto& e : fs::directory_iterator(a)) dirs += e.is_directory();
  EXPECT_EQ(dirs, 5u);
  const auto ma = read_json(fs::path(a) / "manifest.json"), mb = read_json(fs::path(b) / "manifest.json");
  EXPECT_EQ(ma, mb);
  EXPECT_EQ(load_flow(fs::path(a) / "pair_0002" / "gt_flow.sfg").tensor(),
            load_flow(fs::path(b) / "pair_0002" / "gt_flow.sfg").tensor());
  EXPECT_TRUE(fs::exists(fs::path(a) / "config.json"));
}

TEST_F(Cli, EvalGroundTruthAndMeans) {
  const std::string data = make_dataset(4);
  const CliRun r = invoke({"eval", "--pairs", data, "--flow", "gt_flow.sfg", "--metric", "all"});
  ASSERT_EQ(r.code, kOk) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["mean"]["pck"].get<double>(), 1.0);
  double iou = 0.0;
  for (const auto& p : j["pairs"]) iou += p["iou"].get<double>() / j["pairs"].size();
  EXPECT_NEAR(j["mean"]["iou"].get<double>(), iou, 1e-15);

  // Identity flows stand in for a poor matcher.
  for (const auto& e : fs::directory_iterator(data))
    if (e.is_directory()) save_sfg(e.path() / "zero.sfg", FlowField(16, 16));
  double prev = -1.0;
  for (const char* alpha : {"0.05", "0.1", "0.15"}) {
    const CliRun z = invoke({"eval", "--pairs", data, "--flow", "zero.sfg", "--alpha", alpha, "--out", path("rep.json")});
    ASSERT_EQ(z.code, kOk) << z.err;
    const double v = read_json(path("rep.json"))["mean"]["pck"].get<double>();
    EXPECT_GE(v, prev);
    prev = v;
  }
  EXPECT_EQ(invoke({"eval", "--pairs", data, "--flow", "absent.sfg"}).code, kData);
}

TEST_F(Cli, TrainWritesArtifactsAndResumes) {
  const std::string data = make_dataset(4);
  const std::string cfg = write_config({{"batch_size", 2}, {"iterations", 4}});
  const CliRun r = invoke({"train", "--data", data, "--config", cfg, "--out", path("run"), "--iterations", "2", "--quiet"});
  ASSERT_EQ(r.code, kOk) << r.err;
  for (const char* f : {"loss.csv", "config.json", "checkpoint/manifest.json", "checkpoint/state.f64"})
    EXPECT_TRUE(fs::exists(fs::path(path("run")) / f)) << f;
  EXPECT_EQ(read_json(path("run/config.json"))["iterations"], 2);

  const CliRun more = invoke({"train", "--data", data, "--config", cfg, "--out", path("run"), "--resume", path("run/checkpoint"),
                        "--quiet"});
  ASSERT_EQ(more.code, kOk) << more.err;
  std::ifstream csv(path("run/loss.csv"));
  std::string line;
  std::vector<std::string> iters;
  std::getline(csv, line);
  while (std::getline(csv, line)) iters.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(iters, (std::vector<std::string>{"1", "2", "3", "4"}));
  EXPECT_EQ(load_checkpoint(path("run/checkpoint")).optimizer.step, 4u);

  // Already finished: nothing left to run.
  EXPECT_EQ(invoke({"train", "--data", data, "--config", cfg, "--out", path("run"), "--resume", path("run/checkpoint")}).code,
            kUsage);
}

TEST_F(Cli, ZeroLearningRateKeepsInitialParameters) {
  const std::string data = make_dataset(4);
  const CliRun r = invoke({"train", "--data", data, "--out", path("run"), "--iterations", "2", "--lr", "0", "--quiet",
                     "--config", write_config({{"batch_size", 2}})});
  ASSERT_EQ(r.code, kOk) << r.err;
  EXPECT_EQ(load_checkpoint(path("run/checkpoint")).model.flat_parameters(), Model().flat_parameters());
}

TEST_F(Cli, MatchSelfIsIdentity) {
  const std::string data = make_dataset(1);
  ASSERT_EQ(invoke({"train", "--data", data, "--out", path("run"), "--iterations", "1", "--lr", "0", "--quiet",
                 "--config", write_config({{"batch_size", 1}})})
                .code,
            kOk);
  const std::string img = (fs::path(data) / "pair_0000" / "source.ppm").string();
  const CliRun r = invoke({"match", "--checkpoint", path("run/checkpoint"), "--source", img, "--target", img, "--out",
                     path("match"), "--argmax", "hard"});
  ASSERT_EQ(r.code, kOk) << r.err;
  const FlowField flow = load_flow(path("match/flow.sfg"));
  EXPECT_EQ(flow.height(), 16u);
  for (double v : flow.tensor().data()) EXPECT_EQ(v, 0.0);
  for (std::uint8_t p : load_pnm(path("match/flow_color.ppm")).pixels) EXPECT_EQ(p, 255);
  EXPECT_EQ(load_pnm(path("match/warped_target.ppm")), load_pnm(img));
  EXPECT_EQ(read_json(path("match/match_summary.json"))["argmax"], "hard");

  const CliRun k = invoke({"match", "--checkpoint", path("run/checkpoint"), "--source", img, "--target",
                     (fs::path(data) / "pair_0000" / "target.ppm").string(), "--out", path("k")});
  ASSERT_EQ(k.code, kOk) << k.err;
  const CliRun s = invoke({"match", "--checkpoint", path("run/checkpoint"), "--source", img, "--target",
                     (fs::path(data) / "pair_0000" / "target.ppm").string(), "--out", path("s"), "--argmax", "S"});
  ASSERT_EQ(s.code, kOk) << s.err;
  EXPECT_NE(load_flow(path("k/flow.sfg")).tensor(), load_flow(path("s/flow.sfg")).tensor());
  EXPECT_EQ(invoke({"match", "--checkpoint", path("run/checkpoint"), "--source", img, "--target", img, "--out",
                 path("x"), "--argmax", "median"})
                .code,
            kUsage);
}

TEST_F(Cli, GradcheckExitCodesAndReport) {
  const CliRun ok = invoke({"gradcheck", "--fixture", "4", "--seed", "1", "--out", path("gc.json")});
  EXPECT_EQ(ok.code, kOk) << ok.out;
  const auto j = read_json(path("gc.json"));
  EXPECT_TRUE(j["passed"].get<bool>());
  const CliRun bad = invoke({"gradcheck", "--fixture", "4", "--tolerance", "1e-14"});
  EXPECT_EQ(bad.code, kCheck);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
  EXPECT_NE(bad.out.find("worst"), std::string::npos);
}

TEST_F(Cli, AblateStructure) {
  const std::string data = make_dataset(8);
  const CliRun r = invoke({"ablate", "--data", data, "--out", path("abl"), "--iterations", "2", "--config",
                     write_config({{"batch_size", 2}})});
  ASSERT_EQ(r.code, kOk) << r.err;
  const auto j = read_json(path("abl/ablation.json"));
  EXPECT_EQ(j["loss_terms"]["rows"].size(), 4u);
  EXPECT_EQ(j["components"]["rows"].size(), 9u);
  EXPECT_EQ(j["eval_pairs"], 2);
  EXPECT_TRUE(fs::exists(path("abl/ablation.txt")));
  EXPECT_EQ(invoke({"ablate", "--data", make_dataset(2, "tiny"), "--out", path("abl2")}).code, kUsage);
}
