#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "rmvps/dataset_io.hpp"
#include "rmvps/image_io.hpp"

namespace rmvps {
namespace {

namespace fs = std::filesystem;

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("rmvps_dataset_") +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string slurp(const fs::path& p) const {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  }

  fs::path dir_;
};

SynthOptions small_options(int m, int n, int size) {
  SynthOptions o;
  o.schedule.rig_steps = m;
  o.schedule.turntable_steps = n;
  o.image_size = size;
  o.samples = 32;
  o.sharpness = 200.0;
  return o;
}

TEST(ImageIo, SrgbRoundTrip) {
  for (double v : {0.0, 0.001, 0.02, 0.2, 0.5, 0.9, 1.0}) {
    EXPECT_NEAR(srgb_to_linear(linear_to_srgb(v)), v, 1e-12);
  }
  EXPECT_NEAR(linear_to_srgb(0.5), 0.735356983, 1e-8);
}

using ImageFiles = TempDir;

TEST_F(ImageFiles, PfmRoundTripsAtFloatPrecision) {
  Image img(5, 3, 3);
  std::mt19937_64 rng(1);
  for (double& v : img.data) {
    v = to_unit_double(rng()) * 3.0 - 1.0;
  }
  write_pfm(dir_ / "a.pfm", img);
  const Image back = read_pfm(dir_ / "a.pfm");
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    EXPECT_EQ(back.data[i], static_cast<double>(static_cast<float>(img.data[i])));
  }
  const std::string text = slurp(dir_ / "a.pfm");
  EXPECT_EQ(text.substr(0, 12), "PF\n5 3\n-1.0\n");
  // First stored row is the bottom image row.
  float first = 0.0f;
  std::memcpy(&first, text.data() + 12, 4);
  EXPECT_EQ(first, static_cast<float>(img.at(0, 2, 0)));
}

TEST_F(ImageFiles, PngRoundTripsWithinQuantization) {
  Image rgb(4, 4, 3);
  Image gray(4, 4, 1);
  for (std::size_t i = 0; i < rgb.data.size(); ++i) {
    rgb.data[i] = static_cast<double>(i) / static_cast<double>(rgb.data.size());
  }
  gray.at(1, 2) = 1.0;
  write_png(dir_ / "c.png", rgb);
  write_png(dir_ / "g.png", gray);
  const Image rb = read_png(dir_ / "c.png");
  const Image gb = read_png(dir_ / "g.png");
  ASSERT_TRUE(rb.same_shape(rgb));
  ASSERT_TRUE(gb.same_shape(gray));
  for (std::size_t i = 0; i < rgb.data.size(); ++i) {
    EXPECT_NEAR(linear_to_srgb(rb.data[i]), linear_to_srgb(rgb.data[i]), 0.5 / 255.0 + 1e-9);
  }
  EXPECT_EQ(gb.at(1, 2), 1.0);
  EXPECT_EQ(gb.at(0, 0), 0.0);
}

TEST(Scenes, PrimitiveMaterialPicksNearestPrimitive) {
  const SceneSpec s = builtin_scene("two_sphere");
  const PrimitiveMaterial mat(s);
  Matrix p(3, 2);
  p.col(0) = s.primitives[0].center;
  p.col(1) = s.primitives[1].center;
  const auto params = mat.evaluate(p);
  EXPECT_EQ(params[0].albedo, s.primitives[0].brdf.albedo);
  EXPECT_EQ(params[1].albedo, s.primitives[1].brdf.albedo);
  EXPECT_THROW(builtin_scene("teapot"), ValidationError);
}

TEST(Scenes, LinearEnvironmentHasRequestedRadiance) {
  const SceneSpec s = builtin_scene("sphere_lambert");
  const Vec3 d = Vec3(0.3, 0.5, 0.8).normalized();
  EXPECT_NEAR(eval_sh(s.env, d).x(), 0.75 + 0.55, 1e-12);
  EXPECT_NEAR(eval_sh(s.env, -d).z(), 0.65 - 0.45, 1e-12);
}

using Synth = TempDir;

TEST_F(Synth, FullScheduleWritesOneHundredFrames) {
  SynthOptions o = small_options(4, 25, 8);
  o.schedule.rig_step_deg = 90.0;
  o.schedule.turntable_step_deg = 14.4;
  o.samples = 8;
  const DatasetManifest m = synth_dataset(builtin_scene("sphere_lambert"), o, dir_);
  EXPECT_EQ(m.frames.size(), 100u);
  std::size_t pngs = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "images")) {
    pngs += e.path().extension() == ".png" ? 1 : 0;
  }
  EXPECT_EQ(pngs, 100u);
  EXPECT_TRUE(fs::exists(dir_ / "manifest.json"));
}

TEST_F(Synth, SingleFrameSchedule) {
  const DatasetManifest m = synth_dataset(builtin_scene("sphere_lambert"), small_options(1, 1, 8), dir_);
  EXPECT_EQ(m.frames.size(), 1u);
  EXPECT_EQ(load_dataset(dir_ / "manifest.json").size(), 1u);
}

TEST_F(Synth, RerunIsByteIdentical) {
  const SceneSpec s = builtin_scene("two_sphere");
  synth_dataset(s, small_options(2, 2, 12), dir_ / "a");
  synth_dataset(s, small_options(2, 2, 12), dir_ / "b");
  for (const auto& e : fs::recursive_directory_iterator(dir_ / "a")) {
    if (e.is_regular_file()) {
      const fs::path rel = fs::relative(e.path(), dir_ / "a");
      EXPECT_EQ(slurp(e.path()), slurp(dir_ / "b" / rel)) << rel;
    }
  }
}

TEST_F(Synth, LoadRoundTripsRotationsAndImages) {
  const SceneSpec s = builtin_scene("sphere_lambert");
  const SynthOptions o = small_options(2, 3, 16);
  const DatasetManifest m = synth_dataset(s, o, dir_);
  const Dataset d = load_dataset(dir_ / "manifest.json");
  ASSERT_EQ(d.size(), 6u);
  const CaptureSchedule sched = o.schedule.build();

  const auto field = s.field();
  const PrimitiveMaterial mat(s);
  RenderScene rs;
  rs.field = field.get();
  rs.material = &mat;
  rs.env = s.env;
  RenderConfig rc;
  rc.samples = o.samples;
  rc.sharpness = o.sharpness;
  rc.near = m.near;
  rc.far = m.far;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Frame& f = d.frame(i);
    EXPECT_LT((f.pose.rig.matrix() - sched.poses[i].rig.matrix()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((f.pose.turntable.matrix() - sched.poses[i].turntable.matrix()).cwiseAbs().maxCoeff(),
              1e-12);
    const RenderedImage ref = render_image(sched.poses[i], d.camera(), rs, rc);
    for (std::size_t k = 0; k < ref.rgb.data.size(); ++k) {
      ASSERT_EQ(f.rgb.data[k], static_cast<double>(static_cast<float>(ref.rgb.data[k])));
    }
  }
  EXPECT_TRUE(d.manifest().ground_truth.has_value());
  EXPECT_EQ(d.manifest().ground_truth->primitives.size(), 1u);
}

TEST_F(Synth, NormalMapPointsTowardCameraAtCenter) {
  synth_dataset(builtin_scene("sphere_lambert"), small_options(1, 2, 17), dir_);
  const Dataset d = load_dataset(dir_ / "manifest.json");
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Frame& f = d.frame(i);
    EXPECT_EQ(f.mask.at(8, 8), 1.0);
    EXPECT_EQ(f.mask.at(0, 0), 0.0);
    EXPECT_EQ(f.normal.rgb(0, 0), Vec3::Zero());
    // Center pixel of a sphere at the origin: normal = -view direction in the object frame.
    const Vec3 n = f.normal.rgb(8, 8);
    EXPECT_GT(n.dot(-d.object_view_direction(i)), 0.999);
  }
}

using Manifest = TempDir;

TEST_F(Manifest, MissingImageIsNamed) {
  synth_dataset(builtin_scene("sphere_lambert"), small_options(1, 2, 8), dir_);
  fs::remove(dir_ / "linear" / "m1_n002.pfm");
  try {
    load_dataset(dir_ / "manifest.json");
    FAIL() << "missing file accepted";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("m1_n002.pfm"), std::string::npos) << e.what();
  }
}

std::string tamper(const std::string& text, const std::string& from, const std::string& to) {
  const std::size_t pos = text.find(from);
  EXPECT_NE(pos, std::string::npos);
  std::string out = text;
  out.replace(pos, from.size(), to);
  return out;
}

TEST_F(Manifest, RejectsReflectedRotation) {
  const DatasetManifest m =
      synth_dataset(builtin_scene("sphere_lambert"), small_options(1, 1, 8), dir_);
  std::string text = m.to_json();
  // Identity R_b is written as 1.0, 0.0, ...; flip the first entry.
  const std::size_t pos = text.find("\"R_b\"");
  ASSERT_NE(pos, std::string::npos);
  const std::size_t one = text.find("1.0", pos);
  text.replace(one, 3, "-1.0");
  EXPECT_THROW(DatasetManifest::from_json(text), ValidationError);
}

TEST_F(Manifest, RejectsScheduleMismatchAndBadSchema) {
  const DatasetManifest m =
      synth_dataset(builtin_scene("sphere_lambert"), small_options(1, 2, 8), dir_);
  const std::string text = m.to_json();
  EXPECT_NO_THROW(DatasetManifest::from_json(text));
  EXPECT_THROW(DatasetManifest::from_json(tamper(text, "\"turntable_steps\": 2", "\"turntable_steps\": 3")),
               ValidationError);
  EXPECT_THROW(DatasetManifest::from_json(tamper(text, "\"turntable_step_deg\": 14.4",
                                                 "\"turntable_step_deg\": 15.0")),
               ValidationError);
  EXPECT_THROW(DatasetManifest::from_json(tamper(text, "\"schema_version\": 1", "\"schema_version\": 7")),
               ValidationError);
  EXPECT_THROW(DatasetManifest::from_json("{\"frames\": []}"), ValidationError);
  EXPECT_THROW(DatasetManifest::from_json("not json"), ValidationError);
}

using Rays = TempDir;

TEST_F(Rays, SamplingIsDeterministicAndBalanced) {
  synth_dataset(builtin_scene("sphere_lambert"), small_options(1, 3, 16), dir_);
  const Dataset d = load_dataset(dir_ / "manifest.json");
  const RayBatch a = sample_rays(d, 64, MaskPolicy::balanced, 9);
  const RayBatch b = sample_rays(d, 64, MaskPolicy::balanced, 9);
  const RayBatch c = sample_rays(d, 64, MaskPolicy::balanced, 10);
  ASSERT_EQ(a.size(), 64u);
  EXPECT_EQ(a.px, b.px);
  EXPECT_EQ(a.frame, b.frame);
  EXPECT_NE(a.px, c.px);
  int inside = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inside += a.mask[i] > 0.5 ? 1 : 0;
    const Frame& f = d.frame(static_cast<std::size_t>(a.frame[i]));
    EXPECT_EQ(a.target[i], f.rgb.rgb(a.px[i], a.py[i]));
    const Ray r = d.camera().ray(a.px[i], a.py[i]);
    EXPECT_EQ(a.rays[i].direction, r.direction);
  }
  EXPECT_GE(inside, 32);
}

TEST_F(Rays, FrameRaysCoverTheImage) {
  synth_dataset(builtin_scene("sphere_lambert"), small_options(1, 2, 8), dir_);
  const Dataset d = load_dataset(dir_ / "manifest.json");
  const RayBatch r = frame_rays(d, 1);
  ASSERT_EQ(r.size(), 64u);
  EXPECT_EQ(r.px[9], 1);
  EXPECT_EQ(r.py[9], 1);
  EXPECT_EQ(r.frame[63], 1);
}

}  // namespace
}  // namespace rmvps
