#include <gtest/gtest.h>

#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "densecount/pipeline.hpp"
#include "densecount/synthgen.hpp"

namespace densecount {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("densecount_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliRun run(const std::string& args, const std::string& env = "") {
    const auto out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = "cd '" + dir_.string() + "' && env -u DENSECOUNT_CONFIG -u DENSECOUNT_SEED " +
                            env + " '" + DENSECOUNT_CLI_PATH + "' " + args + " >'" + out.string() +
                            "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  void write(const std::string& name, const std::string& text) { std::ofstream(dir_ / name) << text; }

  fs::path dir_;
};

const std::string kSmall =
    " --scene-width 32 --scene-height 32 --n-max 3 --radius-min 2 --radius-max 3 --min-separation 5"
    " --sigma 2 --depth 2 --base-channels 4 --patch-size 16 --batch-size 2 --scale 100";

TEST_F(Cli, MakeDensityCheckReportsMass) {
  write("a.csv", "image_path,width,height,x,y\nimg.png,32,32,10.5,12\nimg.png,32,32,20,20.25\n");
  auto r = run("make-density a.csv -o maps --check --heatmaps --sigma 3");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("mass 2.0000 / dots 2"), std::string::npos) << r.err;
  auto dm = read_density_map_file((dir_ / "maps/img.dmap").string());
  EXPECT_NEAR(integrate_count(dm), 2.0, 1e-4);
  EXPECT_TRUE(fs::exists(dir_ / "maps/img_heatmap.png"));
  auto manifest = nlohmann::json::parse(slurp(dir_ / "maps/manifest.json"));
  EXPECT_EQ(manifest["config_fingerprint"].get<std::string>().size(), 16u);
}

TEST_F(Cli, MakeDensityAdaptiveFallbackWarns) {
  write("a.csv", "image_path,width,height,x,y\none.png,16,16,8,8\n");
  auto r = run("make-density a.csv -o maps --adaptive --check");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("warning: one.png"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("falls back"), std::string::npos);
}

TEST_F(Cli, MakeDensityAcceptsBoxes) {
  write("b.jsonl", R"({"image_path":"p.png","width":20,"height":20,"boxes":[[2,2,6,6]]})" "\n");
  auto r = run("make-density b.jsonl -o maps --check");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("mass 1.0000 / dots 1"), std::string::npos) << r.err;
}

TEST_F(Cli, InputErrorsExitTwo) {
  auto missing = run("make-density nope.csv -o maps");
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("nope.csv"), std::string::npos) << missing.err;
  write("bad.csv", "image_path,width,height,x,y\nimg.png,10,10,12,3\n");
  auto invalid = run("make-density bad.csv -o maps");
  EXPECT_EQ(invalid.code, 2);
  EXPECT_NE(invalid.err.find("img.png"), std::string::npos);
  EXPECT_EQ(run("synth -o d --size abc").code, 2);
  EXPECT_EQ(run("synth -o d --no-such-flag").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("synth -o d --n-min 5 --n-max 2").code, 2);
}

TEST_F(Cli, SynthIsIdempotentAndLayered) {
  auto a = run("synth -o d1 --size 3" + kSmall);
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(run("synth -o d2 --size 3" + kSmall).code, 0);
  EXPECT_EQ(slurp(dir_ / "d1/annotations.csv"), slurp(dir_ / "d2/annotations.csv"));
  EXPECT_EQ(slurp(dir_ / "d1/images/scene_00002.png"), slurp(dir_ / "d2/images/scene_00002.png"));
  EXPECT_EQ(slurp(dir_ / "d1/resolved_config.ini"), slurp(dir_ / "d2/resolved_config.ini"));

  write("c.ini", "seed = 5\nsize = 2\n");
  ASSERT_EQ(run("synth -o d3 --config c.ini").code, 0);
  EXPECT_NE(slurp(dir_ / "d3/resolved_config.ini").find("seed=5\n"), std::string::npos);
  ASSERT_EQ(run("synth -o d4", "DENSECOUNT_CONFIG=c.ini DENSECOUNT_SEED=9").code, 0);
  const auto d4 = slurp(dir_ / "d4/resolved_config.ini");
  EXPECT_NE(d4.find("seed=9\n"), std::string::npos);
  EXPECT_NE(d4.find("size=2\n"), std::string::npos);
  ASSERT_EQ(run("synth -o d5 --seed 11", "DENSECOUNT_CONFIG=c.ini DENSECOUNT_SEED=9").code, 0);
  EXPECT_NE(slurp(dir_ / "d5/resolved_config.ini").find("seed=11\n"), std::string::npos);

  ASSERT_EQ(run("synth -o empty --size 0").code, 0);
  EXPECT_EQ(slurp(dir_ / "empty/annotations.csv"), "image_path,width,height,x,y\n");
}

TEST_F(Cli, TrainZeroEpochsAndDeterminism) {
  ASSERT_EQ(run("synth -o data --size 10" + kSmall).code, 0);
  auto zero = run("train data -o m0 --epochs 0" + kSmall);
  ASSERT_EQ(zero.code, 0) << zero.err;
  EXPECT_EQ(slurp(dir_ / "m0/train_log.csv"), "epoch,train_loss,val_rmse,val_mae\n");
  EXPECT_TRUE(fs::exists(dir_ / "m0/model.unck"));

  ASSERT_EQ(run("train data -o m1 --epochs 2" + kSmall).code, 0);
  ASSERT_EQ(run("train data -o m2 --epochs 2" + kSmall).code, 0);
  const auto log = slurp(dir_ / "m1/train_log.csv");
  EXPECT_EQ(log, slurp(dir_ / "m2/train_log.csv"));
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
  EXPECT_EQ(slurp(dir_ / "m1/model.unck"), slurp(dir_ / "m2/model.unck"));

  auto e1 = run("eval m1/model.unck m1/test.csv -o r1.json --heatmaps hm");
  auto e2 = run("eval m2/model.unck m2/test.csv -o r2.json");
  ASSERT_EQ(e1.code, 0) << e1.err;
  ASSERT_EQ(e2.code, 0) << e2.err;
  const auto r1 = slurp(dir_ / "r1.json");
  EXPECT_EQ(r1, slurp(dir_ / "r2.json"));
  auto report = report_from_json(nlohmann::json::parse(r1));
  EXPECT_EQ(report.records.size(), 1u);
  EXPECT_EQ(report.config_fingerprint, slurp(dir_ / "m1/resolved_config.ini").substr(14, 16));
  // "../data/images/x.png" lands at hm/data/images/x_heatmap.png
  auto stem = fs::path(report.records[0].image).replace_extension().relative_path().lexically_normal();
  EXPECT_TRUE(fs::exists(dir_ / "hm/data/images" / (stem.filename().string() + "_heatmap.png")));
}

TEST_F(Cli, EvalOracleAndReferenceRows) {
  ASSERT_EQ(run("synth -o data --size 4" + kSmall).code, 0);
  auto r = run("eval --oracle data/annotations.csv --reference aed=0.890,0.490 -o oracle.json" + kSmall);
  ASSERT_EQ(r.code, 0) << r.err;
  auto report = report_from_json(nlohmann::json::parse(slurp(dir_ / "oracle.json")));
  EXPECT_LT(report.rmse, 1e-4);
  EXPECT_LT(report.mae, 1e-4);
  EXPECT_NE(r.out.find("aed"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("dMAE"), std::string::npos);
  EXPECT_NE(r.out.find("0.890"), std::string::npos);
  EXPECT_EQ(run("eval --oracle data/annotations.csv --reference aed=x").code, 2);
}

TEST_F(Cli, EvalConfigMismatchExitsThree) {
  ASSERT_EQ(run("synth -o data --size 4" + kSmall).code, 0);
  ASSERT_EQ(run("train data -o m --epochs 0" + kSmall).code, 0);
  auto r = run("eval m/model.unck data/annotations.csv --depth 3 --base-channels 4");
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("shape audit"), std::string::npos) << r.err;
  auto ok = run("eval m/model.unck data/annotations.csv --depth 2 --base-channels 4");
  EXPECT_EQ(ok.code, 0) << ok.err;
  write("junk.unck", "not a checkpoint");
  EXPECT_EQ(run("eval junk.unck data/annotations.csv").code, 2);
}

TEST_F(Cli, PredictZeroHeadPrintsZero) {
  auto model = make_unet(UNetConfig{2, 4, 1, 3}, 1);
  for (auto& p : model.params)
    if (p.name.rfind("head", 0) == 0) p.value.fill(0.0f);
  save_checkpoint_file(model, (dir_ / "zero.unck").string());
  write_png_file(png_from_tensor(generate_scene(SceneSpec{}, 0).image), (dir_ / "img.png").string());
  auto r = run("predict zero.unck img.png");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "0.00\n");
  EXPECT_TRUE(fs::exists(dir_ / "img_heatmap.png"));
  EXPECT_EQ(run("predict zero.unck missing.png").code, 2);
}

TEST_F(Cli, PredictOverfitModelAndJsonConsistency) {
  // one 32x32 image, trained on as a single full-image patch
  ASSERT_EQ(run("synth -o data --size 1 --n-min 3 --n-max 3" + kSmall).code, 0);
  // later flags win, so these override kSmall's patch and batch sizes
  auto t = run("train data -o m" + kSmall + " --epochs 300 --patch-size 32 --batch-size 1 --lr 0.003"
               " --train-frac 1 --val-frac 0 --test-frac 0");
  ASSERT_EQ(t.code, 0) << t.err;
  auto plain = run("predict m/model.unck data/images/scene_00000.png --heatmap h.png");
  auto json = run("predict m/model.unck data/images/scene_00000.png --heatmap h.png --json");
  ASSERT_EQ(plain.code, 0) << plain.err;
  ASSERT_EQ(json.code, 0) << json.err;
  const double printed = std::stod(plain.out);
  EXPECT_NEAR(printed, 3.0, 0.5);
  auto j = nlohmann::json::parse(json.out);
  EXPECT_EQ(j["count"].get<double>(), printed);
  EXPECT_NEAR(j["raw_count"].get<double>(), printed, 0.005);
  EXPECT_TRUE(fs::exists(dir_ / "h.png"));
}

TEST_F(Cli, PredictChannelMismatchExitsThree) {
  save_checkpoint_file(make_unet(UNetConfig{2, 4, 1, 3}, 1), (dir_ / "gray.unck").string());
  SceneSpec color;
  color.channels = 3;
  write_png_file(png_from_tensor(generate_scene(color, 0).image), (dir_ / "rgb.png").string());
  auto r = run("predict gray.unck rgb.png");
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST_F(Cli, DefaultDatasetTwentyEpochs) {
  ASSERT_EQ(run("synth -o data").code, 0);
  auto r = run("train data -o m --epochs 20 --scale 100");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto log = slurp(dir_ / "m/train_log.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 21);
  EXPECT_TRUE(fs::exists(dir_ / "m/model.unck"));
}

}  // namespace
}  // namespace densecount
