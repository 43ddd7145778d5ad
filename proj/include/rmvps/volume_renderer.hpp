#pragma once

#include <span>
#include <vector>

#include "rmvps/brdf.hpp"
#include "rmvps/image.hpp"
#include "rmvps/rig.hpp"
#include "rmvps/sdf_field.hpp"

namespace rmvps {

struct RenderConfig {
  int samples = 64;
  double near = 2.0;
  double far = 4.0;
  double sharpness = 64.0;  // s in the logistic CDF sigmoid(s * sdf)
  bool jitter = false;      // stratified jitter inside each bin; bin centers otherwise
  std::uint64_t seed = 0;
  double shade_threshold = 1e-6;  // samples with smaller weight are not shaded

  void validate() const;
};

/// Distances along the ray, one per stratum of [near, far]; increasing.
std::vector<double> sample_ray(const RenderConfig& config, std::uint64_t ray_seed = 0);

struct SdfWeights {
  std::vector<double> alpha;    // K, last entry 0
  std::vector<double> weights;  // K
  double transmittance = 1.0;   // left after the last sample
};

/// Unbiased weights from the logistic CDF of s * sdf:
/// alpha_i = max(0, (Phi_i - Phi_{i+1}) / Phi_i), w_i = alpha_i prod_{j<i}(1 - alpha_j).
SdfWeights sdf_weights(std::span<const double> sdf, double sharpness);

/// Gradients of sum_i grad_w_i w_i + grad_transmittance * transmittance with respect to each
/// sdf value (written to grad_sdf) and to the sharpness (returned).
double sdf_weights_backward(std::span<const double> sdf, double sharpness, const SdfWeights& fwd,
                            std::span<const double> grad_weights, double grad_transmittance,
                            std::span<double> grad_sdf);

class MaterialSource {
 public:
  virtual ~MaterialSource() = default;
  /// BRDF parameters at the columns of points (3xN).
  virtual std::vector<BrdfParams> evaluate(const Matrix& points) const = 0;
};

class ConstantMaterial : public MaterialSource {
 public:
  explicit ConstantMaterial(const BrdfParams& params) : params_(params) {}
  std::vector<BrdfParams> evaluate(const Matrix& points) const override {
    return std::vector<BrdfParams>(static_cast<std::size_t>(points.cols()), params_);
  }

 private:
  BrdfParams params_;
};

/// Occlusion probability s(p, t) and indirect gain g(p) of the specular light.
class ReflectionSource {
 public:
  virtual ~ReflectionSource() = default;
  virtual void evaluate(const Matrix& points, const Matrix& reflections, Vector& occlusion,
                        Matrix& indirect_gain) const = 0;
};

struct RenderScene {
  const SdfSource* field = nullptr;
  const MaterialSource* material = nullptr;
  ShEnvironment env = ShEnvironment::zero(3);
  DirectLightMap direct_map;
  const ShEnvironment* indirect_env = nullptr;  // object frame; null for none
  const ReflectionSource* reflection = nullptr;  // null: no occlusion, unit gain
  Vec3 background = Vec3::Zero();

  void validate() const;
};

struct PixelSampleRecord {
  std::vector<Vec3> positions;  // object frame
  std::vector<double> sdf;
  std::vector<double> weights;
  std::vector<Vec3> radiance;
  Vec3 color = Vec3::Zero();
  double opacity = 0.0;
};

/// Pinhole camera with explicit axes. Pixel (x, y) looks along
/// forward + ((x + 0.5 - cx) / fx) right + ((y + 0.5 - cy) / fy) down.
struct Camera {
  int width = 64;
  int height = 64;
  double fx = 64.0;
  double fy = 64.0;
  double cx = 32.0;
  double cy = 32.0;
  Vec3 position = Vec3(3.0, 0.0, 0.0);
  Vec3 right = Vec3::UnitY();
  Vec3 down = -Vec3::UnitZ();
  Vec3 forward = -Vec3::UnitX();

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, int width,
                        int height, double focal);
  Ray ray(double px, double py) const;
  /// Same camera with the up direction reversed; images come out mirrored top to bottom.
  Camera flipped_vertically() const;
  void validate() const;
};

/// Renders rays given in the world frame at a rig pose. The ray is mapped into the object frame
/// with the turntable rotation, and light queries go through the pose's light frame.
std::vector<PixelSampleRecord> render_rays(std::span<const Ray> rays, const RigPose& pose,
                                           const RenderScene& scene, const ShadingContext& ctx,
                                           const RenderConfig& config);

PixelSampleRecord render_pixel(const Ray& ray, const RigPose& pose, const RenderScene& scene,
                               const RenderConfig& config);

struct RenderedImage {
  Image rgb;      // linear radiance, 3 channels
  Image opacity;  // 1 channel
};

RenderedImage render_image(const RigPose& pose, const Camera& camera, const RenderScene& scene,
                           const RenderConfig& config);

struct OcclusionConfig {
  double offset = 1e-3;   // start distance from the surface along the normal
  double hit_eps = 1e-4;  // |sdf| below this counts as a hit
  double far = 4.0;
  int max_steps = 256;
  double softness = 100.0;  // soft result is sigmoid(softness * (hit_eps - min sdf))
};

struct OcclusionResult {
  double hit = 0.0;   // 0 or 1
  double soft = 0.0;  // in [0, 1]
  bool exhausted = false;
};

/// Sphere-traces from p + offset * n(p) along direction t.
OcclusionResult march_occlusion(const Vec3& p, const Vec3& t, const SdfSource& field,
                                const OcclusionConfig& config = {});
/// Lockstep marching of many rays (columns) with batched field queries.
std::vector<OcclusionResult> march_occlusion_batch(const Matrix& points, const Matrix& normals,
                                                   const Matrix& directions,
                                                   const SdfSource& field,
                                                   const OcclusionConfig& config = {});

}  // namespace rmvps
