#include "rmvps/metrics_mesh.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <random>
#include <unordered_map>
#include <unordered_set>

#include "mc_tables.hpp"

namespace rmvps {

void TriangleMesh::validate() const {
  for (const Vec3& v : vertices) {
    if (!v.allFinite()) {
      throw ValidationError("mesh has a non-finite vertex");
    }
  }
  const auto n = static_cast<int>(vertices.size());
  for (const auto& t : triangles) {
    for (int i : t) {
      if (i < 0 || i >= n) {
        throw ValidationError("mesh triangle index " + std::to_string(i) + " out of range");
      }
    }
  }
}

double TriangleMesh::area() const {
  double a = 0.0;
  for (const auto& t : triangles) {
    a += 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
  }
  return a;
}

double TriangleMesh::volume() const {
  double v = 0.0;
  for (const auto& t : triangles) {
    v += vertices[t[0]].dot(vertices[t[1]].cross(vertices[t[2]])) / 6.0;
  }
  return v;
}

long TriangleMesh::euler_characteristic() const {
  std::unordered_set<std::uint64_t> edges;
  for (const auto& t : triangles) {
    for (int e = 0; e < 3; ++e) {
      const auto a = static_cast<std::uint64_t>(std::min(t[e], t[(e + 1) % 3]));
      const auto b = static_cast<std::uint64_t>(std::max(t[e], t[(e + 1) % 3]));
      edges.insert((a << 32) | b);
    }
  }
  return static_cast<long>(vertices.size()) - static_cast<long>(edges.size()) +
         static_cast<long>(triangles.size());
}

namespace {

constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdgeCorners[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                     {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

}  // namespace

TriangleMesh marching_cubes(const SdfSource& field, int resolution, const MeshBounds& bounds) {
  if (resolution < 8) {
    throw ValidationError("marching cubes needs resolution >= 8");
  }
  if (!((bounds.upper - bounds.lower).array() > 0.0).all()) {
    throw ValidationError("marching cubes bounds must have positive extent");
  }
  const int n = resolution + 1;
  const Vec3 step = (bounds.upper - bounds.lower) / resolution;
  auto lattice = [&](int i, int j, int k) {
    return Vec3(bounds.lower.x() + i * step.x(), bounds.lower.y() + j * step.y(),
                bounds.lower.z() + k * step.z());
  };
  auto id = [n](int i, int j, int k) {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(n) *
                                             (static_cast<std::size_t>(j) + static_cast<std::size_t>(n) * k);
  };

  std::vector<double> values(static_cast<std::size_t>(n) * n * n);
  Matrix slab(3, static_cast<Eigen::Index>(n) * n);
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        slab.col(i + n * j) = lattice(i, j, k);
      }
    }
    const Vector s = field.sdf_batch(slab);
    std::copy(s.data(), s.data() + s.size(), values.begin() + static_cast<std::ptrdiff_t>(id(0, 0, k)));
  }

  TriangleMesh mesh;
  std::unordered_map<std::size_t, int> edge_vertex;
  for (int k = 0; k < resolution; ++k) {
    for (int j = 0; j < resolution; ++j) {
      for (int i = 0; i < resolution; ++i) {
        double v[8];
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          v[c] = values[id(i + kCorner[c][0], j + kCorner[c][1], k + kCorner[c][2])];
          if (v[c] < 0.0) {
            cube |= 1 << c;
          }
        }
        const int edges = mc::kEdgeTable[cube];
        if (edges == 0) {
          continue;
        }
        int vid[12];
        for (int e = 0; e < 12; ++e) {
          if ((edges & (1 << e)) == 0) {
            continue;
          }
          const int* c0 = kCorner[kEdgeCorners[e][0]];
          const int* c1 = kCorner[kEdgeCorners[e][1]];
          const int axis = c0[0] != c1[0] ? 0 : (c0[1] != c1[1] ? 1 : 2);
          const int lo[3] = {i + std::min(c0[0], c1[0]), j + std::min(c0[1], c1[1]),
                             k + std::min(c0[2], c1[2])};
          const std::size_t key = id(lo[0], lo[1], lo[2]) * 3 + static_cast<std::size_t>(axis);
          auto it = edge_vertex.find(key);
          if (it == edge_vertex.end()) {
            const double f0 = v[kEdgeCorners[e][0]];
            const double f1 = v[kEdgeCorners[e][1]];
            const double t = f0 == f1 ? 0.5 : f0 / (f0 - f1);
            const Vec3 p0 = lattice(i + c0[0], j + c0[1], k + c0[2]);
            const Vec3 p1 = lattice(i + c1[0], j + c1[1], k + c1[2]);
            mesh.vertices.push_back(p0 + t * (p1 - p0));
            it = edge_vertex.emplace(key, static_cast<int>(mesh.vertices.size()) - 1).first;
          }
          vid[e] = it->second;
        }
        const int* tri = mc::kTriangleTable[cube];
        for (int t = 0; tri[t] != -1; t += 3) {
          mesh.triangles.push_back({vid[tri[t]], vid[tri[t + 2]], vid[tri[t + 1]]});
        }
      }
    }
  }
  return mesh;
}

std::vector<Vec3> sample_surface(const TriangleMesh& mesh, int count, std::uint64_t seed) {
  if (mesh.empty()) {
    throw ValidationError("cannot sample an empty mesh");
  }
  std::vector<double> cumulative(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tri = mesh.triangles[t];
    total += 0.5 * (mesh.vertices[tri[1]] - mesh.vertices[tri[0]])
                       .cross(mesh.vertices[tri[2]] - mesh.vertices[tri[0]])
                       .norm();
    cumulative[t] = total;
  }
  if (!(total > 0.0)) {
    throw ValidationError("cannot sample a mesh with zero area");
  }
  std::mt19937_64 rng(mix_seed(seed, 0x5AF));
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    const double u = to_unit_double(rng()) * total;
    const auto t = static_cast<std::size_t>(
        std::min<std::ptrdiff_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin(),
                                 static_cast<std::ptrdiff_t>(cumulative.size()) - 1));
    const auto& tri = mesh.triangles[t];
    const double r1 = std::sqrt(to_unit_double(rng()));
    const double r2 = to_unit_double(rng());
    out.push_back((1.0 - r1) * mesh.vertices[tri[0]] + r1 * (1.0 - r2) * mesh.vertices[tri[1]] +
                  r1 * r2 * mesh.vertices[tri[2]]);
  }
  return out;
}

namespace {

// Uniform bucket grid for nearest-neighbour queries.
class PointGrid {
 public:
  explicit PointGrid(const std::vector<Vec3>& points) : points_(points) {
    lower_ = points[0];
    Vec3 upper = points[0];
    for (const Vec3& p : points) {
      lower_ = lower_.cwiseMin(p);
      upper = upper.cwiseMax(p);
    }
    const Vec3 ext = (upper - lower_).cwiseMax(1e-9);
    const double target = std::max(1.0, static_cast<double>(points.size()) / 2.0);
    cell_ = std::cbrt(ext.prod() / target);
    // At most 64 cells per axis.
    cell_ = std::max(cell_, ext.maxCoeff() / 64.0);
    for (int a = 0; a < 3; ++a) {
      dims_[a] = std::min(64, static_cast<int>(ext[a] / cell_) + 1);
    }
    upper_ = lower_ + cell_ * Vec3(dims_[0], dims_[1], dims_[2]);
    start_.assign(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2] + 1, 0);
    std::vector<std::size_t> cell_of(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      cell_of[i] = flat(cell(points[i]));
      ++start_[cell_of[i] + 1];
    }
    for (std::size_t c = 1; c < start_.size(); ++c) {
      start_[c] += start_[c - 1];
    }
    order_.resize(points.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < points.size(); ++i) {
      order_[fill[cell_of[i]]++] = static_cast<int>(i);
    }
  }

  double nearest(const Vec3& p) const {
    const Vec3 q = p.cwiseMax(lower_).cwiseMin(upper_);
    const std::array<int, 3> c = cell(q);
    double best = std::numeric_limits<double>::infinity();
    const int max_ring = std::max({dims_[0], dims_[1], dims_[2]});
    for (int r = 0; r <= max_ring; ++r) {
      const int i0 = std::max(0, c[0] - r);
      const int i1 = std::min(dims_[0] - 1, c[0] + r);
      const int j0 = std::max(0, c[1] - r);
      const int j1 = std::min(dims_[1] - 1, c[1] + r);
      for (int i = i0; i <= i1; ++i) {
        for (int j = j0; j <= j1; ++j) {
          const bool side = std::abs(i - c[0]) == r || std::abs(j - c[1]) == r;
          auto visit = [&](int k) {
            if (k < 0 || k >= dims_[2]) {
              return;
            }
            const std::size_t f = flat({i, j, k});
            for (std::size_t s = start_[f]; s < start_[f + 1]; ++s) {
              best = std::min(best, (points_[static_cast<std::size_t>(order_[s])] - p).squaredNorm());
            }
          };
          if (side) {
            for (int k = std::max(0, c[2] - r); k <= std::min(dims_[2] - 1, c[2] + r); ++k) {
              visit(k);
            }
          } else {
            visit(c[2] - r);
            if (r > 0) {
              visit(c[2] + r);
            }
          }
        }
      }
      // Cells beyond ring r are at least r cells away from the projection of p.
      const double reach = r * cell_;
      if (best <= reach * reach) {
        break;
      }
    }
    return std::sqrt(best);
  }

 private:
  std::array<int, 3> cell(const Vec3& p) const {
    std::array<int, 3> c{};
    for (int a = 0; a < 3; ++a) {
      c[a] = std::clamp(static_cast<int>((p[a] - lower_[a]) / cell_), 0, dims_[a] - 1);
    }
    return c;
  }
  std::size_t flat(const std::array<int, 3>& c) const {
    return static_cast<std::size_t>(c[0]) +
           static_cast<std::size_t>(dims_[0]) *
               (static_cast<std::size_t>(c[1]) + static_cast<std::size_t>(dims_[1]) * c[2]);
  }

  const std::vector<Vec3>& points_;
  Vec3 lower_;
  Vec3 upper_;
  double cell_ = 1.0;
  int dims_[3] = {1, 1, 1};
  std::vector<std::size_t> start_;
  std::vector<int> order_;
};

double mean_nearest(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  const PointGrid grid(to);
  std::vector<double> d(from.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(from.size()); ++i) {
    d[static_cast<std::size_t>(i)] = grid.nearest(from[static_cast<std::size_t>(i)]);
  }
  double sum = 0.0;
  for (double x : d) {
    sum += x;
  }
  return sum / static_cast<double>(from.size());
}

void require_points(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.empty() || b.empty()) {
    throw ValidationError("chamfer distance needs two non-empty point sets");
  }
}

}  // namespace

double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  require_points(a, b);
  return 0.5 * (mean_nearest(a, b) + mean_nearest(b, a));
}

double chamfer_brute_force(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  require_points(a, b);
  auto one_way = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    double sum = 0.0;
    for (const Vec3& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const Vec3& q : to) {
        best = std::min(best, (p - q).norm());
      }
      sum += best;
    }
    return sum / static_cast<double>(from.size());
  };
  return 0.5 * (one_way(a, b) + one_way(b, a));
}

double mesh_chamfer_mm(const TriangleMesh& a, const TriangleMesh& b, const ChamferOptions& options) {
  if (a.empty() || b.empty()) {
    throw ValidationError("chamfer distance needs two non-empty meshes");
  }
  // One seed for both, so a mesh compared with itself gives exactly zero.
  const std::vector<Vec3> pa = sample_surface(a, options.points, options.seed);
  const std::vector<Vec3> pb = sample_surface(b, options.points, options.seed);
  return chamfer(pa, pb) * options.mm_per_unit;
}

namespace {

void require_same_shape(const Image& a, const Image& b) {
  if (!a.same_shape(b)) {
    throw ValidationError("image shapes differ: " + std::to_string(a.width) + "x" +
                          std::to_string(a.height) + "x" + std::to_string(a.channels) + " vs " +
                          std::to_string(b.width) + "x" + std::to_string(b.height) + "x" +
                          std::to_string(b.channels));
  }
}

}  // namespace

double psnr(const Image& image, const Image& reference, double peak) {
  require_same_shape(image, reference);
  if (image.data.empty()) {
    throw ValidationError("psnr of an empty image");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    const double d = image.data[i] - reference.data[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(image.data.size());
  if (mse < 1e-10) {
    return kPsnrCap;
  }
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const Image& image, const Image& reference, double peak) {
  require_same_shape(image, reference);
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  if (image.width < kWin || image.height < kWin) {
    throw ValidationError("ssim needs images of at least 11x11 pixels");
  }
  if (image.channels != 1 && image.channels != 3) {
    throw ValidationError("ssim supports one or three channels");
  }
  double g[kWin];
  double gsum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double x = i - kWin / 2;
    g[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
    gsum += g[i];
  }
  for (double& v : g) {
    v /= gsum;
  }
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const int w = image.width;
  const int h = image.height;
  const int ow = w - kWin + 1;
  const int oh = h - kWin + 1;

  // Valid-region separable filter.
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> tmp(static_cast<std::size_t>(ow) * h);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int i = 0; i < kWin; ++i) {
          s += g[i] * src[static_cast<std::size_t>(y) * w + x + i];
        }
        tmp[static_cast<std::size_t>(y) * ow + x] = s;
      }
    }
    std::vector<double> out(static_cast<std::size_t>(ow) * oh);
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int i = 0; i < kWin; ++i) {
          s += g[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
        }
        out[static_cast<std::size_t>(y) * ow + x] = s;
      }
    }
    return out;
  };

  double total = 0.0;
  const std::size_t npix = static_cast<std::size_t>(w) * h;
  for (int c = 0; c < image.channels; ++c) {
    std::vector<double> x(npix), y(npix), xx(npix), yy(npix), xy(npix);
    for (std::size_t p = 0; p < npix; ++p) {
      x[p] = image.data[p * image.channels + c];
      y[p] = reference.data[p * image.channels + c];
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    const auto mx = filter(x);
    const auto my = filter(y);
    const auto sxx = filter(xx);
    const auto syy = filter(yy);
    const auto sxy = filter(xy);
    double sum = 0.0;
    for (std::size_t p = 0; p < mx.size(); ++p) {
      const double vx = sxx[p] - mx[p] * mx[p];
      const double vy = syy[p] - my[p] * my[p];
      const double cxy = sxy[p] - mx[p] * my[p];
      sum += ((2.0 * mx[p] * my[p] + c1) * (2.0 * cxy + c2)) /
             ((mx[p] * mx[p] + my[p] * my[p] + c1) * (vx + vy + c2));
    }
    total += sum / static_cast<double>(mx.size());
  }
  return std::clamp(total / image.channels, -1.0, 1.0);
}

void write_obj(const std::filesystem::path& path, const TriangleMesh& mesh) {
  mesh.validate();
  std::ofstream os(path);
  if (!os) {
    throw RuntimeError("cannot write " + path.string());
  }
  os.precision(9);
  for (const Vec3& v : mesh.vertices) {
    os << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  }
  for (const auto& t : mesh.triangles) {
    os << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
  }
}

void write_ply(const std::filesystem::path& path, const TriangleMesh& mesh) {
  mesh.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw RuntimeError("cannot write " + path.string());
  }
  os << "ply\nformat binary_little_endian 1.0\n"
     << "element vertex " << mesh.vertices.size() << '\n'
     << "property float x\nproperty float y\nproperty float z\n"
     << "element face " << mesh.triangles.size() << '\n'
     << "property list uchar int vertex_indices\nend_header\n";
  for (const Vec3& v : mesh.vertices) {
    const float f[3] = {static_cast<float>(v.x()), static_cast<float>(v.y()),
                        static_cast<float>(v.z())};
    os.write(reinterpret_cast<const char*>(f), sizeof(f));
  }
  for (const auto& t : mesh.triangles) {
    const unsigned char three = 3;
    os.write(reinterpret_cast<const char*>(&three), 1);
    const std::int32_t idx[3] = {t[0], t[1], t[2]};
    os.write(reinterpret_cast<const char*>(idx), sizeof(idx));
  }
}

TriangleMesh read_ply(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw ValidationError("cannot open " + path.string());
  }
  std::string line;
  std::size_t nv = 0;
  std::size_t nf = 0;
  bool binary = false;
  while (std::getline(is, line)) {
    if (line.rfind("format binary_little_endian", 0) == 0) {
      binary = true;
    } else if (line.rfind("element vertex ", 0) == 0) {
      nv = std::stoul(line.substr(15));
    } else if (line.rfind("element face ", 0) == 0) {
      nf = std::stoul(line.substr(13));
    } else if (line == "end_header") {
      break;
    }
  }
  if (!binary) {
    throw ValidationError("only binary little-endian PLY is supported: " + path.string());
  }
  TriangleMesh mesh;
  mesh.vertices.resize(nv);
  for (Vec3& v : mesh.vertices) {
    float f[3];
    is.read(reinterpret_cast<char*>(f), sizeof(f));
    v = Vec3(f[0], f[1], f[2]);
  }
  mesh.triangles.resize(nf);
  for (auto& t : mesh.triangles) {
    unsigned char count = 0;
    is.read(reinterpret_cast<char*>(&count), 1);
    if (count != 3) {
      throw ValidationError("PLY face is not a triangle: " + path.string());
    }
    std::int32_t idx[3];
    is.read(reinterpret_cast<char*>(idx), sizeof(idx));
    t = {idx[0], idx[1], idx[2]};
  }
  if (!is) {
    throw ValidationError("truncated PLY " + path.string());
  }
  mesh.validate();
  return mesh;
}

void write_metric_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream os(path);
  if (!os) {
    throw RuntimeError("cannot write " + path.string());
  }
  os << "object,chamfer_mm,psnr_db,ssim\n";
  os.precision(8);
  for (const MetricRow& r : rows) {
    os << r.object << ',' << r.chamfer_mm << ',' << r.psnr_db << ',' << r.ssim << '\n';
  }
}

}  // namespace rmvps
