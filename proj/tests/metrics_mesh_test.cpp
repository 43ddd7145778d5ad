#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "rmvps/metrics_mesh.hpp"

namespace rmvps {
namespace {

namespace fs = std::filesystem;

class ConstantField : public SdfSource {
 public:
  explicit ConstantField(double v) : v_(v) {}
  double sdf(const Vec3&) const override { return v_; }
  FieldSample evaluate(const Vec3&) const override {
    FieldSample s;
    s.sdf = v_;
    return s;
  }

 private:
  double v_;
};

TEST(MarchingCubes, SphereAreaAndTopology) {
  const AnalyticSphere sphere(0.5);
  const TriangleMesh mesh = marching_cubes(sphere, 64);
  ASSERT_FALSE(mesh.empty());
  EXPECT_NO_THROW(mesh.validate());
  const double area = 4.0 * kPi * 0.25;
  EXPECT_NEAR(mesh.area(), area, 0.03 * area);
  EXPECT_EQ(mesh.euler_characteristic(), 2);
  EXPECT_GT(mesh.volume(), 0.0);
  EXPECT_NEAR(mesh.volume(), 4.0 / 3.0 * kPi * 0.125, 0.03 * 4.0 / 3.0 * kPi * 0.125);
}

TEST(MarchingCubes, VerticesLieNearTheLevelSet) {
  const AnalyticSphere sphere(0.4, Vec3(0.1, -0.05, 0.02));
  const int res = 40;
  const TriangleMesh mesh = marching_cubes(sphere, res);
  const double voxel = 2.0 / res;
  for (const Vec3& v : mesh.vertices) {
    ASSERT_LT(std::abs(sphere.sdf(v)), 1.5 * voxel);
  }
}

TEST(MarchingCubes, EulerCharacteristicAcrossResolutions) {
  const AnalyticBox box(Vec3(0.3, 0.4, 0.25));
  for (int res : {32, 48}) {
    EXPECT_EQ(marching_cubes(AnalyticSphere(0.6), res).euler_characteristic(), 2);
    EXPECT_EQ(marching_cubes(box, res).euler_characteristic(), 2);
  }
}

TEST(MarchingCubes, NoSignChangeGivesEmptyMesh) {
  EXPECT_TRUE(marching_cubes(ConstantField(1.0), 16).empty());
  EXPECT_TRUE(marching_cubes(ConstantField(-1.0), 16).empty());
  EXPECT_THROW(marching_cubes(ConstantField(1.0), 4), ValidationError);
}

TEST(Chamfer, Examples) {
  const std::vector<Vec3> origin{Vec3::Zero()};
  const std::vector<Vec3> x1{Vec3::UnitX()};
  EXPECT_DOUBLE_EQ(chamfer(origin, x1), 1.0);
  const std::vector<Vec3> pair{Vec3::Zero(), Vec3(2.0, 0.0, 0.0)};
  EXPECT_DOUBLE_EQ(chamfer(pair, x1), 1.0);
  EXPECT_EQ(chamfer(pair, pair), 0.0);
  EXPECT_THROW(chamfer({}, x1), ValidationError);
}

TEST(Chamfer, GridSearchMatchesBruteForce) {
  std::mt19937_64 rng(5);
  auto cloud = [&](int n, double spread, const Vec3& shift) {
    std::vector<Vec3> pts;
    for (int i = 0; i < n; ++i) {
      Vec3 p;
      for (int a = 0; a < 3; ++a) {
        p[a] = spread * (to_unit_double(rng()) - 0.5);
      }
      pts.push_back(p + shift);
    }
    return pts;
  };
  const auto a = cloud(700, 1.0, Vec3::Zero());
  const auto b = cloud(500, 0.4, Vec3(0.8, 0.0, -0.3));
  EXPECT_NEAR(chamfer(a, b), chamfer_brute_force(a, b), 1e-12);
  EXPECT_NEAR(chamfer(a, b), chamfer(b, a), 1e-12);

  // Planar set: degenerate extent along z.
  std::vector<Vec3> plane = cloud(300, 1.0, Vec3::Zero());
  for (Vec3& p : plane) {
    p.z() = 0.0;
  }
  EXPECT_NEAR(chamfer(plane, a), chamfer_brute_force(plane, a), 1e-12);
}

TEST(Chamfer, MeshDistanceInMillimetres) {
  const TriangleMesh small = marching_cubes(AnalyticSphere(0.5), 48);
  const TriangleMesh big = marching_cubes(AnalyticSphere(0.55), 48);
  ChamferOptions opt;
  opt.points = 5000;
  EXPECT_EQ(mesh_chamfer_mm(small, small, opt), 0.0);
  // Independent samples of one surface sit about 0.5 sqrt(area / N) apart: 1.25 mm here.
  const double floor_mm = 0.5 * std::sqrt(kPi / opt.points) * opt.mm_per_unit;
  const TriangleMesh fine = marching_cubes(AnalyticSphere(0.5), 64);
  EXPECT_LT(mesh_chamfer_mm(small, fine, opt), 1.2 * floor_mm);
  // Concentric spheres 0.05 units apart: at least the 5 mm gap, at most gap plus the floor.
  const double cd = mesh_chamfer_mm(small, big, opt);
  EXPECT_GT(cd, 4.8);
  EXPECT_LT(cd, 5.0 + floor_mm);
}

TEST(ImageMetrics, PsnrExamples) {
  Image a(16, 16, 3, 0.4);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  Image b = a;
  for (double& v : b.data) {
    v += 0.1;
  }
  EXPECT_NEAR(psnr(b, a), 20.0, 1e-9);
  Image c = a;
  for (double& v : c.data) {
    v += 0.5;
  }
  EXPECT_NEAR(psnr(c, a), 6.0206, 1e-4);
  EXPECT_THROW(psnr(a, Image(16, 15, 3)), ValidationError);

  double last = kPsnrCap + 1.0;
  for (double amp : {0.01, 0.05, 0.1, 0.2}) {
    Image n = a;
    for (double& v : n.data) {
      v += amp;
    }
    const double p = psnr(n, a);
    EXPECT_LT(p, last);
    last = p;
  }
}

TEST(ImageMetrics, SsimExamples) {
  std::mt19937_64 rng(8);
  Image x(32, 24, 3);
  for (double& v : x.data) {
    v = to_unit_double(rng());
  }
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);

  Image neg = x;
  for (double& v : neg.data) {
    v = 1.0 - v;
  }
  EXPECT_LT(ssim(x, neg), 0.0);

  const Image k1(20, 20, 1, 0.3);
  EXPECT_NEAR(ssim(k1, k1), 1.0, 1e-12);
  EXPECT_THROW(ssim(Image(10, 20, 1), Image(10, 20, 1)), ValidationError);

  Image noisy = x;
  for (double& v : noisy.data) {
    v = std::clamp(v + 0.2 * (to_unit_double(rng()) - 0.5), 0.0, 1.0);
  }
  const double s = ssim(noisy, x);
  EXPECT_GT(s, 0.0);
  EXPECT_LT(s, 1.0);
}

TEST(MeshIo, PlyRoundTripAndObj) {
  const TriangleMesh mesh = marching_cubes(AnalyticSphere(0.5), 16);
  const fs::path dir = fs::temp_directory_path() / "rmvps_mesh_io";
  fs::create_directories(dir);
  write_ply(dir / "m.ply", mesh);
  const TriangleMesh back = read_ply(dir / "m.ply");
  ASSERT_EQ(back.vertices.size(), mesh.vertices.size());
  ASSERT_EQ(back.triangles, mesh.triangles);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    EXPECT_LT((back.vertices[i] - mesh.vertices[i]).norm(), 1e-6);
  }
  write_obj(dir / "m.obj", mesh);
  std::ifstream is(dir / "m.obj");
  std::string first;
  std::getline(is, first);
  EXPECT_EQ(first.rfind("v ", 0), 0u);
  write_metric_csv(dir / "metrics.csv", {{"sphere", 1.5, 30.0, 0.9}});
  std::ifstream csv(dir / "metrics.csv");
  std::getline(csv, first);
  EXPECT_EQ(first, "object,chamfer_mm,psnr_db,ssim");
  fs::remove_all(dir);
}

}  // namespace
}  // namespace rmvps
