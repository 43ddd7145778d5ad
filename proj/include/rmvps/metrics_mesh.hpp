#pragma once

// Mesh extraction and the evaluation metrics: Chamfer distance, PSNR and SSIM.

#include <filesystem>
#include <string>
#include <vector>

#include "rmvps/image.hpp"
#include "rmvps/sdf_field.hpp"

namespace rmvps {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;

  bool empty() const { return triangles.empty(); }
  void validate() const;
  double area() const;
  /// Signed enclosed volume; positive when triangles wind counter-clockwise seen from outside.
  double volume() const;
  /// V - E + F.
  long euler_characteristic() const;
};

struct MeshBounds {
  Vec3 lower = Vec3::Constant(-1.0);
  Vec3 upper = Vec3::Constant(1.0);
};

/// Zero level set of the field sampled on a (resolution + 1)^3 lattice. Vertices on shared cell
/// edges are merged, so closed surfaces come out watertight. Outward normals point toward
/// positive sdf.
TriangleMesh marching_cubes(const SdfSource& field, int resolution, const MeshBounds& bounds = {});

/// `count` points uniformly distributed over the surface area.
std::vector<Vec3> sample_surface(const TriangleMesh& mesh, int count, std::uint64_t seed);

/// Symmetric mean nearest-neighbour distance, 0.5 (mean_a min_b |a-b| + mean_b min_a |a-b|).
double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b);
/// Same quantity by exhaustive search.
double chamfer_brute_force(const std::vector<Vec3>& a, const std::vector<Vec3>& b);

struct ChamferOptions {
  int points = 30000;
  double mm_per_unit = 100.0;
  std::uint64_t seed = 0;
};
/// Chamfer distance in millimetres between area samples of two meshes, both drawn with the
/// same seed.
double mesh_chamfer_mm(const TriangleMesh& a, const TriangleMesh& b, const ChamferOptions& options);

inline constexpr double kPsnrCap = 100.0;
double psnr(const Image& image, const Image& reference, double peak = 1.0);
/// Gaussian-window SSIM (11x11, sigma 1.5), averaged over channels.
double ssim(const Image& image, const Image& reference, double peak = 1.0);

void write_obj(const std::filesystem::path& path, const TriangleMesh& mesh);
void write_ply(const std::filesystem::path& path, const TriangleMesh& mesh);
TriangleMesh read_ply(const std::filesystem::path& path);

struct MetricRow {
  std::string object;
  double chamfer_mm = 0.0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

void write_metric_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);

}  // namespace rmvps
