#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "json.hpp"
#include "rmvps/image_io.hpp"
#include "rmvps/training.hpp"

namespace rmvps {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
  json summary() const { return json::parse(out); }
};

CliRun rmvps(const std::vector<std::string>& args) {
  std::ostringstream out;
  std::ostringstream err;
  CliRun r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<std::string> small_train(const fs::path& data, const fs::path& out, int iterations) {
  return {"train",      "--data",       data.string(), "--out",          out.string(),
          "--iterations", std::to_string(iterations), "--batch-rays", "64",  "--samples",
          "16",         "--width",      "16",          "--layers",       "3",
          "--latent-layer", "2",        "--head-width", "16",         "--frequencies",
          "2",          "--lr",         "5e-3",        "--eikonal-points", "64",
          "--progress-every", "0",      "--init-radius", "0.4"};
}

// Sets an option's value, replacing an earlier occurrence.
std::vector<std::string> with(std::vector<std::string> args, const std::string& flag,
                              const std::string& value) {
  const auto it = std::find(args.begin(), args.end(), flag);
  if (it != args.end()) {
    *(it + 1) = value;
  } else {
    args.insert(args.end(), {flag, value});
  }
  return args;
}

std::string read(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fs::temp_directory_path() / "rmvps_cli_test");
    fs::remove_all(*root_);
    const CliRun r = rmvps({"synth", "--scene", "sphere_lambert", "--schedule", "2x4", "--size", "32",
                         "--samples", "64", "--out", (*root_ / "data").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const CliRun t = rmvps(small_train(*root_ / "data", *root_ / "run", 500));
    ASSERT_EQ(t.code, 0) << t.err;
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }
  static fs::path* root_;
};

fs::path* Cli::root_ = nullptr;

TEST(CliParse, MissingSceneIsValidationErrorWithUsage) {
  const CliRun r = rmvps({"synth", "--out", "unused"});
  EXPECT_EQ(r.code, cli::kExitValidation);
  EXPECT_NE(r.err.find("--scene"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_TRUE(r.out.empty());
}

TEST(CliParse, UnknownCommandAndBadValues) {
  EXPECT_EQ(rmvps({"fly"}).code, cli::kExitValidation);
  EXPECT_EQ(rmvps({}).code, cli::kExitValidation);
  const fs::path out = fs::temp_directory_path() / "rmvps_cli_bad";
  EXPECT_EQ(rmvps({"synth", "--scene", "teapot", "--out", out.string()}).code, cli::kExitValidation);
  EXPECT_EQ(rmvps({"synth", "--scene", "sphere_lambert", "--schedule", "4by25", "--out", out.string()})
                .code,
            cli::kExitValidation);
  EXPECT_EQ(rmvps({"train", "--data", (out / "missing").string(), "--out", out.string()}).code,
            cli::kExitValidation);
  fs::remove_all(out);
}

TEST(CliSynth, ScheduleSetsFrameCount) {
  const fs::path out = fs::temp_directory_path() / "rmvps_cli_synth";
  fs::remove_all(out);
  const CliRun one = rmvps({"synth", "--scene", "sphere_lambert", "--schedule", "1x1", "--size", "16",
                         "--out", (out / "one").string()});
  ASSERT_EQ(one.code, 0) << one.err;
  EXPECT_EQ(one.summary().at("frames"), 1);
  const CliRun full = rmvps({"synth", "--scene", "sphere_lambert", "--schedule", "4x25", "--size",
                           "16", "--samples", "16", "--out", (out / "full").string()});
  ASSERT_EQ(full.code, 0) << full.err;
  EXPECT_EQ(full.summary().at("frames"), 100);
  EXPECT_EQ(json::parse(read(out / "full" / "config.json")).at("turntable_step_deg"), 14.4);
  EXPECT_TRUE(fs::exists(out / "full" / "environment.json"));
  fs::remove_all(out);
}

TEST_F(Cli, TrainWritesCheckpointCsvAndConfig) {
  const fs::path run = *root_ / "run";
  EXPECT_TRUE(fs::exists(run / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(run / "loss.csv"));
  const json config = json::parse(read(run / "config.json"));
  EXPECT_EQ(config.at("iterations"), 500);
  EXPECT_FALSE(config.contains("out"));
  std::ifstream csv(run / "loss.csv");
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) {
    ++rows;
  }
  EXPECT_EQ(rows, 500);
}

TEST_F(Cli, GeoPriorFlagIsAliasOfZeroWeight) {
  std::vector<std::string> a = small_train(*root_ / "data", *root_ / "geo0", 2);
  a.insert(a.end(), {"--lambda-geo", "0"});
  std::vector<std::string> b = small_train(*root_ / "data", *root_ / "nogeo", 2);
  b.push_back("--no-geo-prior");
  ASSERT_EQ(rmvps(a).code, 0);
  ASSERT_EQ(rmvps(b).code, 0);
  const std::string ca = read(*root_ / "geo0" / "config.json");
  EXPECT_EQ(ca, read(*root_ / "nogeo" / "config.json"));
  EXPECT_EQ(json::parse(ca).at("geo_prior"), false);
  EXPECT_EQ(read(*root_ / "geo0" / "checkpoint.bin"), read(*root_ / "nogeo" / "checkpoint.bin"));

  std::vector<std::string> both = b;
  both.insert(both.end(), {"--lambda-geo", "1"});
  EXPECT_EQ(rmvps(both).code, cli::kExitValidation);
}

TEST_F(Cli, NonFiniteLossExitsThreeAndKeepsCheckpoint) {
  // A band of NaN pixels in one image makes the loss non-finite once a batch samples it.
  const fs::path data = *root_ / "nan_data";
  fs::copy(*root_ / "data", data, fs::copy_options::recursive);
  const fs::path pfm = data / "linear" / "m1_n001.pfm";
  Image img = read_pfm(pfm);
  for (int y = 12; y < 20; ++y) {
    for (int x = 0; x < img.width; ++x) {
      img.set_rgb(x, y, Vec3::Constant(std::numeric_limits<double>::quiet_NaN()));
    }
  }
  write_pfm(pfm, img);
  const CliRun r = rmvps(small_train(data, *root_ / "diverge", 200));
  EXPECT_EQ(r.code, cli::kExitRuntime);
  EXPECT_NE(r.err.find("non-finite"), std::string::npos) << r.err;
  EXPECT_TRUE(r.out.empty());
  const LoadedCheckpoint ckpt = read_checkpoint(*root_ / "diverge" / "checkpoint.bin");
  EXPECT_TRUE(ckpt.scene.pack().allFinite());
  EXPECT_LT(ckpt.iteration, 200);
  EXPECT_NE(r.err.find("checkpoint holds iteration " + std::to_string(ckpt.iteration)),
            std::string::npos);
}

TEST_F(Cli, NoRotationTrainsOnFirstRigStep) {
  std::vector<std::string> a = small_train(*root_ / "data", *root_ / "norot", 2);
  a.push_back("--no-rotation");
  ASSERT_EQ(rmvps(a).code, 0);
  const json config = json::parse(read(*root_ / "norot" / "config.json"));
  EXPECT_EQ(config.at("frames"), 4);
  EXPECT_EQ(config.at("no_rotation"), true);
}

TEST_F(Cli, GroundTruthAsItsOwnReconstruction) {
  const fs::path data = *root_ / "data";
  const CliRun first = rmvps({"eval", "--data", data.string(), "--checkpoint",
                           (*root_ / "run" / "checkpoint.bin").string(), "--out",
                           (*root_ / "eval").string(), "--resolution", "64", "--points", "5000"});
  ASSERT_EQ(first.code, 0) << first.err;
  EXPECT_TRUE(fs::exists(*root_ / "eval" / "mesh.ply"));
  EXPECT_TRUE(fs::exists(*root_ / "eval" / "mesh.obj"));
  EXPECT_EQ(read(*root_ / "eval" / "metrics.csv").rfind("object,chamfer_mm,psnr_db,ssim\n", 0), 0u);
  const json s = first.summary();
  EXPECT_EQ(s.at("views"), 8);
  EXPECT_GT(s.at("psnr_db").get<double>(), 10.0);

  const CliRun self = rmvps({"eval", "--data", data.string(), "--mesh",
                          (*root_ / "eval" / "reference.ply").string(), "--out",
                          (*root_ / "eval_self").string(), "--resolution", "64"});
  ASSERT_EQ(self.code, 0) << self.err;
  EXPECT_LT(self.summary().at("chamfer_mm").get<double>(), 0.05);

  EXPECT_EQ(rmvps({"eval", "--data", data.string(), "--out", (*root_ / "e").string()}).code,
            cli::kExitValidation);
}

TEST_F(Cli, RelightHeldOutViewsWithinThreeDecibels) {
  const fs::path held = *root_ / "held_out";
  const CliRun s = rmvps({"synth", "--scene", "sphere_lambert", "--schedule", "2x3", "--size", "32",
                       "--samples", "64", "--turntable-step", "120", "--out", held.string()});
  ASSERT_EQ(s.code, 0) << s.err;
  const fs::path ckpt = *root_ / "run" / "checkpoint.bin";
  const CliRun train_views = rmvps({"relight", "--checkpoint", ckpt.string(), "--data",
                                 (*root_ / "data").string(), "--out", (*root_ / "rl_train").string()});
  ASSERT_EQ(train_views.code, 0) << train_views.err;
  const CliRun other = rmvps({"relight", "--checkpoint", ckpt.string(), "--data", held.string(),
                           "--out", (*root_ / "rl_held").string()});
  ASSERT_EQ(other.code, 0) << other.err;

  // Mean over the held-out poses that do not repeat a training pose (turntable step n > 1).
  std::ifstream csv(*root_ / "rl_held" / "relight.csv");
  std::string line;
  std::getline(csv, line);
  double sum = 0.0;
  int count = 0;
  while (std::getline(csv, line)) {
    std::stringstream ls(line);
    std::string view, m, n, p;
    std::getline(ls, view, ',');
    std::getline(ls, m, ',');
    std::getline(ls, n, ',');
    std::getline(ls, p, ',');
    if (std::stoi(n) > 1) {
      sum += std::stod(p);
      ++count;
    }
  }
  ASSERT_EQ(count, 4);
  const double held_psnr = sum / count;
  const double train_psnr = train_views.summary().at("psnr_db").get<double>();
  EXPECT_GE(held_psnr, train_psnr - 3.0) << "train " << train_psnr;

  const CliRun custom = rmvps({"relight", "--checkpoint", ckpt.string(), "--data", held.string(),
                            "--env", (held / "environment.json").string(), "--out",
                            (*root_ / "rl_env").string(), "--view-step", "3"});
  ASSERT_EQ(custom.code, 0) << custom.err;
  EXPECT_EQ(custom.summary().at("views"), 2);
  EXPECT_TRUE(fs::exists(*root_ / "rl_env" / "relight_m01_n001.png"));
}

TEST_F(Cli, PlotWritesOnePngPerLossColumn) {
  const fs::path out = *root_ / "plots";
  const CliRun r = rmvps({"plot", "--csv", (*root_ / "run" / "loss.csv").string(), "--checkpoint",
                       (*root_ / "run" / "checkpoint.bin").string(), "--data",
                       (*root_ / "data").string(), "--out", out.string(), "--view-step", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* col : {"rendering", "eikonal", "occ", "geo", "total"}) {
    EXPECT_TRUE(fs::exists(out / (std::string("loss_") + col + ".png"))) << col;
  }
  EXPECT_FALSE(fs::exists(out / "loss_wall_ms.png"));
  EXPECT_TRUE(fs::exists(out / "loss_summary.csv"));
  EXPECT_TRUE(fs::exists(out / "errors.csv"));
  EXPECT_EQ(r.summary().at("error_maps"), 2);
}

TEST_F(Cli, ThreadOverrideIsValidated) {
  ::setenv("RMVPS_THREADS", "zero", 1);
  const CliRun bad = rmvps({"plot", "--csv", (*root_ / "run" / "loss.csv").string(), "--out",
                         (*root_ / "p2").string()});
  ::setenv("RMVPS_THREADS", "1", 1);
  const CliRun good = rmvps({"plot", "--csv", (*root_ / "run" / "loss.csv").string(), "--out",
                          (*root_ / "p3").string()});
  ::unsetenv("RMVPS_THREADS");
  EXPECT_EQ(bad.code, cli::kExitValidation);
  EXPECT_EQ(good.code, 0);
}

}  // namespace
}  // namespace rmvps
