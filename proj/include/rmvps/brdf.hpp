#pragma once

// Micro-facet reflectance: Lambertian diffuse scaled by (1 - metallic) plus a split-sum
// specular term (prefiltered light times the integrated BRDF).

#include <span>

#include "rmvps/common.hpp"
#include "rmvps/env_light.hpp"
#include "rmvps/microfacet.hpp"

namespace rmvps {

struct BrdfParams {
  Vec3 albedo = Vec3::Constant(0.5);
  double roughness = 0.5;
  double metallic = 0.0;

  /// Throws ValidationError when a component leaves its range.
  void validate() const;
  /// F0 = 0.04 (1 - m) + a m.
  Vec3 f0() const { return Vec3::Constant(0.04 * (1.0 - metallic)) + albedo * metallic; }
};

/// Logistic squashing from unconstrained values: albedo and metallic into [0,1], roughness into
/// [kRoughnessFloor, 1].
BrdfParams squash_brdf(const Vec3& raw_albedo, double raw_roughness, double raw_metallic);

struct ShadingPoint {
  Vec3 position = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  Vec3 view = Vec3::UnitZ();        // toward the camera
  Vec3 reflection = Vec3::UnitZ();  // 2 (view . n) n - view

  static ShadingPoint make(const Vec3& position, const Vec3& normal, const Vec3& view);
  double cos_view() const { return view.dot(normal); }
};

/// Point BRDF f(wi, wo) with both directions pointing away from the surface.
Vec3 brdf_eval(const BrdfParams& params, const Vec3& normal, const Vec3& wi, const Vec3& wo);

/// Integrated specular BRDF split as F0 * scale + bias, where
/// integral of D F G / (4 (wo . n)) over the hemisphere equals F0 * scale + bias for Schlick F.
struct BrdfIntegral {
  double scale = 0.0;
  double bias = 0.0;
  Vec3 apply(const Vec3& f0) const { return f0 * scale + Vec3::Constant(bias); }
};

/// Importance-sampled quadrature (GGX half vectors on a Hammersley set).
BrdfIntegral brdf_integral(double cos_view, double roughness, int samples = 1024);

/// Direct quadrature of the same integral over a hemisphere rule about the normal.
Vec3 brdf_integral_quadrature(double cos_view, double roughness, const Vec3& f0,
                              const QuadratureRule& hemisphere);

/// Bilinear table of brdf_integral over (cos_view, roughness), built once.
class BrdfIntegralTable {
 public:
  struct Sample {
    BrdfIntegral value;
    BrdfIntegral d_cos;
    BrdfIntegral d_roughness;
  };

  BrdfIntegralTable(int resolution, int samples_per_cell);
  static const BrdfIntegralTable& shared();

  Sample lookup(double cos_view, double roughness) const;

 private:
  int resolution_;
  std::vector<BrdfIntegral> cells_;  // [roughness][cos]
};

/// (a / pi)(1 - m) * irradiance about n of the pose-rotated environment.
Vec3 shade_diffuse(const BrdfParams& params, const ShadingPoint& sp, const RadianceTable& table);
Vec3 shade_diffuse(const BrdfParams& params, const ShadingPoint& sp, const ShEnvironment& env,
                   const RigPose& pose, const QuadratureRule& quad);

struct SpecularShade {
  Vec3 rgb = Vec3::Zero();
  bool back_facing = false;
};

/// light_term * (F0 scale + bias). Back-facing points (view . n <= 0) contribute zero.
SpecularShade shade_specular(const BrdfParams& params, const ShadingPoint& sp,
                             const Vec3& light_term);
/// Uses the prefiltered rotated environment as light term.
SpecularShade shade_specular(const BrdfParams& params, const ShadingPoint& sp,
                             const ShEnvironment& env, const RigPose& pose,
                             const QuadratureRule& quad);

/// g_direct: per-channel affine map, clamped at zero.
struct DirectLightMap {
  Vec3 gain = Vec3::Ones();
  Vec3 offset = Vec3::Zero();
  Vec3 apply(const Vec3& v) const { return (gain.cwiseProduct(v) + offset).cwiseMax(0.0); }
};

/// Light bounced off the object itself: an object-frame SH field (not rotated with the rig)
/// scaled by a per-point gain, g_indirect(v, p) = gain(p) * v.
struct IndirectLight {
  const RadianceTable* table = nullptr;  // null means no indirect light
  Vec3 gain = Vec3::Ones();
};

/// (1 - s) g_direct(direct lobe) + s g_indirect(indirect lobe, p).
Vec3 specular_light(const BrdfParams& params, const ShadingPoint& sp,
                    const RadianceTable& direct, double occlusion, const IndirectLight& indirect,
                    const DirectLightMap& direct_map = {});
Vec3 specular_light(const BrdfParams& params, const ShadingPoint& sp, const ShEnvironment& env,
                    const RigPose& pose, double occlusion, const ShEnvironment* indirect_env,
                    const QuadratureRule& quad, const DirectLightMap& direct_map = {},
                    const Vec3& indirect_gain = Vec3::Ones());

/// Everything a shading point needs from one pose: the rotated direct light table, the
/// object-frame indirect table and the learned direct map.
struct ShadingContext {
  RadianceTable direct;
  RadianceTable indirect;
  bool has_indirect = false;
  DirectLightMap direct_map;

  static ShadingContext build(const ShEnvironment& env, const RigPose& pose,
                              const ShEnvironment* indirect_env, const DirectLightMap& direct_map,
                              const QuadratureRule& quad = default_quadrature());
};

struct PointShadeInput {
  BrdfParams params;
  Vec3 normal = Vec3::UnitZ();  // unit
  Vec3 view = Vec3::UnitZ();    // unit, toward the camera
  double occlusion = 0.0;
  Vec3 indirect_gain = Vec3::Ones();
};

/// diffuse + specular_light * (F0 scale + bias), zero specular when back-facing.
Vec3 shade_point(const PointShadeInput& in, const ShadingContext& ctx);

struct PointShadeGrad {
  Vec3 albedo = Vec3::Zero();
  double roughness = 0.0;
  double metallic = 0.0;
  Vec3 normal = Vec3::Zero();
  double occlusion = 0.0;
  Vec3 indirect_gain = Vec3::Zero();
  Vec3 map_gain = Vec3::Zero();
  Vec3 map_offset = Vec3::Zero();
};

/// Accumulates gradients of grad_rgb . shade_point(in). The radiance spans are indexed like the
/// tables' quadrature rule; grad_indirect may be empty when the context has no indirect light.
void shade_point_backward(const PointShadeInput& in, const ShadingContext& ctx,
                          const Vec3& grad_rgb, PointShadeGrad& grad,
                          std::span<Vec3> grad_direct, std::span<Vec3> grad_indirect);

}  // namespace rmvps
