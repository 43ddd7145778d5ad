#include "rmvps/brdf.hpp"

#include <cmath>
#include <sstream>

namespace rmvps {

namespace {

double radical_inverse(std::uint32_t bits) {
  bits = (bits << 16u) | (bits >> 16u);
  bits = ((bits & 0x55555555u) << 1u) | ((bits & 0xAAAAAAAAu) >> 1u);
  bits = ((bits & 0x33333333u) << 2u) | ((bits & 0xCCCCCCCCu) >> 2u);
  bits = ((bits & 0x0F0F0F0Fu) << 4u) | ((bits & 0xF0F0F0F0u) >> 4u);
  bits = ((bits & 0x00FF00FFu) << 8u) | ((bits & 0xFF00FF00u) >> 8u);
  return static_cast<double>(bits) * 0x1.0p-32;
}

constexpr double kMinCosView = 1e-3;

}  // namespace

void BrdfParams::validate() const {
  const auto in_unit = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
  if (!in_unit(albedo.x()) || !in_unit(albedo.y()) || !in_unit(albedo.z())) {
    throw ValidationError("albedo components must lie in [0, 1]");
  }
  if (!std::isfinite(roughness) || roughness < kRoughnessFloor || roughness > 1.0) {
    std::ostringstream msg;
    msg << "roughness " << roughness << " outside [" << kRoughnessFloor << ", 1]";
    throw ValidationError(msg.str());
  }
  if (!in_unit(metallic)) {
    throw ValidationError("metallic must lie in [0, 1]");
  }
}

BrdfParams squash_brdf(const Vec3& raw_albedo, double raw_roughness, double raw_metallic) {
  BrdfParams p;
  p.albedo = Vec3(sigmoid(raw_albedo.x()), sigmoid(raw_albedo.y()), sigmoid(raw_albedo.z()));
  p.roughness = kRoughnessFloor + (1.0 - kRoughnessFloor) * sigmoid(raw_roughness);
  p.metallic = sigmoid(raw_metallic);
  return p;
}

ShadingPoint ShadingPoint::make(const Vec3& position, const Vec3& normal, const Vec3& view) {
  ShadingPoint sp;
  sp.position = position;
  sp.normal = normal.normalized();
  sp.view = view.normalized();
  sp.reflection = 2.0 * sp.view.dot(sp.normal) * sp.normal - sp.view;
  return sp;
}

Vec3 brdf_eval(const BrdfParams& params, const Vec3& normal, const Vec3& wi, const Vec3& wo) {
  const double cos_i = normal.dot(wi);
  const double cos_o = normal.dot(wo);
  if (cos_i <= 0.0 || cos_o <= 0.0) {
    return Vec3::Zero();
  }
  const Vec3 diffuse = params.albedo * ((1.0 - params.metallic) * kInvPi);
  const Vec3 h = (wi + wo).normalized();
  const double d = ggx_d(normal.dot(h), params.roughness);
  const double g = smith_g(cos_i, cos_o, params.roughness);
  const Vec3 f = fresnel_schlick(wi.dot(h), params.f0());
  return diffuse + f * (d * g / (4.0 * cos_i * cos_o));
}

BrdfIntegral brdf_integral(double cos_view, double roughness, int samples) {
  const double mu = std::clamp(cos_view, kMinCosView, 1.0);
  const double rho = clamp_roughness(roughness);
  const double alpha = rho * rho;
  const double a2 = alpha * alpha;
  const Vec3 wo(std::sqrt(1.0 - mu * mu), 0.0, mu);
  BrdfIntegral acc;
  for (int i = 0; i < samples; ++i) {
    const double u1 = (i + 0.5) / samples;
    const double u2 = radical_inverse(static_cast<std::uint32_t>(i));
    const double cos_h = std::sqrt((1.0 - u1) / (1.0 + (a2 - 1.0) * u1));
    const double sin_h = std::sqrt(std::max(0.0, 1.0 - cos_h * cos_h));
    const double phi = 2.0 * kPi * u2;
    const Vec3 h(sin_h * std::cos(phi), sin_h * std::sin(phi), cos_h);
    const double o_dot_h = wo.dot(h);
    const Vec3 wi = 2.0 * o_dot_h * h - wo;
    if (wi.z() <= 0.0 || o_dot_h <= 0.0) {
      continue;
    }
    const double g = smith_g(wi.z(), mu, rho);
    const double vis = g * o_dot_h / (cos_h * mu);
    const double fc = std::pow(1.0 - o_dot_h, 5.0);
    acc.scale += (1.0 - fc) * vis;
    acc.bias += fc * vis;
  }
  acc.scale /= samples;
  acc.bias /= samples;
  return acc;
}

Vec3 brdf_integral_quadrature(double cos_view, double roughness, const Vec3& f0,
                              const QuadratureRule& hemisphere) {
  const double mu = std::clamp(cos_view, kMinCosView, 1.0);
  const double rho = clamp_roughness(roughness);
  const Vec3 wo(std::sqrt(1.0 - mu * mu), 0.0, mu);
  Vec3 sum = Vec3::Zero();
  for (std::size_t j = 0; j < hemisphere.size(); ++j) {
    const Vec3& wi = hemisphere.directions[j];
    if (wi.z() <= 0.0) {
      continue;
    }
    const Vec3 h = (wi + wo).normalized();
    const double d = ggx_d(h.z(), rho);
    const double g = smith_g(wi.z(), mu, rho);
    sum += fresnel_schlick(wo.dot(h), f0) * (d * g / (4.0 * mu) * hemisphere.weights[j]);
  }
  return sum;
}

BrdfIntegralTable::BrdfIntegralTable(int resolution, int samples_per_cell)
    : resolution_(resolution) {
  if (resolution < 2) {
    throw ValidationError("BRDF table resolution must be at least 2");
  }
  cells_.resize(static_cast<std::size_t>(resolution * resolution));
  for (int r = 0; r < resolution; ++r) {
    const double rho = kRoughnessFloor + (1.0 - kRoughnessFloor) * r / (resolution - 1);
    for (int c = 0; c < resolution; ++c) {
      const double mu = static_cast<double>(c) / (resolution - 1);
      cells_[static_cast<std::size_t>(r * resolution + c)] =
          brdf_integral(mu, rho, samples_per_cell);
    }
  }
}

const BrdfIntegralTable& BrdfIntegralTable::shared() {
  static const BrdfIntegralTable table(64, 1024);
  return table;
}

BrdfIntegralTable::Sample BrdfIntegralTable::lookup(double cos_view, double roughness) const {
  const int n = resolution_;
  const double fc = std::clamp(cos_view, 0.0, 1.0) * (n - 1);
  const double fr =
      (std::clamp(roughness, kRoughnessFloor, 1.0) - kRoughnessFloor) / (1.0 - kRoughnessFloor) *
      (n - 1);
  const int c0 = std::min(static_cast<int>(fc), n - 2);
  const int r0 = std::min(static_cast<int>(fr), n - 2);
  const double tc = fc - c0;
  const double tr = fr - r0;
  const auto at = [&](int r, int c) -> const BrdfIntegral& {
    return cells_[static_cast<std::size_t>(r * n + c)];
  };
  const BrdfIntegral& v00 = at(r0, c0);
  const BrdfIntegral& v01 = at(r0, c0 + 1);
  const BrdfIntegral& v10 = at(r0 + 1, c0);
  const BrdfIntegral& v11 = at(r0 + 1, c0 + 1);
  const double cos_step = 1.0 / (n - 1);
  const double rough_step = (1.0 - kRoughnessFloor) / (n - 1);
  const bool cos_inside = cos_view >= 0.0 && cos_view <= 1.0;
  const bool rough_inside = roughness >= kRoughnessFloor && roughness <= 1.0;

  Sample s;
  const auto blend = [&](double BrdfIntegral::*field) {
    const double a = v00.*field * (1.0 - tc) + v01.*field * tc;
    const double b = v10.*field * (1.0 - tc) + v11.*field * tc;
    (s.value.*field) = a * (1.0 - tr) + b * tr;
    (s.d_cos.*field) =
        cos_inside ? ((v01.*field - v00.*field) * (1.0 - tr) + (v11.*field - v10.*field) * tr) /
                         cos_step
                   : 0.0;
    (s.d_roughness.*field) = rough_inside ? (b - a) / rough_step : 0.0;
  };
  blend(&BrdfIntegral::scale);
  blend(&BrdfIntegral::bias);
  return s;
}

Vec3 shade_diffuse(const BrdfParams& params, const ShadingPoint& sp, const RadianceTable& table) {
  const Vec3 irradiance = diffuse_irradiance(table, sp.normal);
  return params.albedo.cwiseProduct(irradiance) * ((1.0 - params.metallic) * kInvPi);
}

Vec3 shade_diffuse(const BrdfParams& params, const ShadingPoint& sp, const ShEnvironment& env,
                   const RigPose& pose, const QuadratureRule& quad) {
  const RadianceTable table = RadianceTable::build(env, pose.light_frame(), quad);
  return shade_diffuse(params, sp, table);
}

SpecularShade shade_specular(const BrdfParams& params, const ShadingPoint& sp,
                             const Vec3& light_term) {
  SpecularShade out;
  const double mu = sp.cos_view();
  if (mu <= 0.0) {
    out.back_facing = true;
    return out;
  }
  const auto lut = BrdfIntegralTable::shared().lookup(mu, params.roughness);
  out.rgb = light_term.cwiseProduct(lut.value.apply(params.f0()));
  return out;
}

SpecularShade shade_specular(const BrdfParams& params, const ShadingPoint& sp,
                             const ShEnvironment& env, const RigPose& pose,
                             const QuadratureRule& quad) {
  const RadianceTable table = RadianceTable::build(env, pose.light_frame(), quad);
  const Vec3 light = prefiltered_specular_light(table, sp.reflection, params.roughness);
  return shade_specular(params, sp, light);
}

Vec3 specular_light(const BrdfParams& params, const ShadingPoint& sp,
                    const RadianceTable& direct, double occlusion, const IndirectLight& indirect,
                    const DirectLightMap& direct_map) {
  const double s = std::clamp(occlusion, 0.0, 1.0);
  Vec3 out = Vec3::Zero();
  if (s < 1.0) {
    out += (1.0 - s) *
           direct_map.apply(prefiltered_specular_light(direct, sp.reflection, params.roughness));
  }
  if (s > 0.0 && indirect.table != nullptr) {
    out += s * indirect.gain.cwiseProduct(
                   prefiltered_specular_light(*indirect.table, sp.reflection, params.roughness));
  }
  return out;
}

Vec3 specular_light(const BrdfParams& params, const ShadingPoint& sp, const ShEnvironment& env,
                    const RigPose& pose, double occlusion, const ShEnvironment* indirect_env,
                    const QuadratureRule& quad, const DirectLightMap& direct_map,
                    const Vec3& indirect_gain) {
  const RadianceTable direct = RadianceTable::build(env, pose.light_frame(), quad);
  IndirectLight indirect;
  RadianceTable indirect_table;
  if (indirect_env != nullptr) {
    indirect_table = RadianceTable::build(*indirect_env, Rotation(), quad);
    indirect.table = &indirect_table;
    indirect.gain = indirect_gain;
  }
  return specular_light(params, sp, direct, occlusion, indirect, direct_map);
}

ShadingContext ShadingContext::build(const ShEnvironment& env, const RigPose& pose,
                                     const ShEnvironment* indirect_env,
                                     const DirectLightMap& direct_map,
                                     const QuadratureRule& quad) {
  ShadingContext ctx;
  ctx.direct = RadianceTable::build(env, pose.light_frame(), quad);
  if (indirect_env != nullptr) {
    ctx.indirect = RadianceTable::build(*indirect_env, Rotation(), quad);
    ctx.has_indirect = true;
  }
  ctx.direct_map = direct_map;
  return ctx;
}

namespace {

struct SpecularParts {
  Vec3 reflection;
  Vec3 direct;    // prefiltered direct light
  Vec3 mapped;    // g_direct(direct)
  Vec3 indirect;  // prefiltered indirect light
  Vec3 light;     // blended light term
  BrdfIntegralTable::Sample lut;
  Vec3 f0;
  Vec3 factor;  // F0 scale + bias
};

SpecularParts specular_parts(const PointShadeInput& in, const ShadingContext& ctx, double mu) {
  SpecularParts sp;
  const double rho = in.params.roughness;
  sp.reflection = 2.0 * mu * in.normal - in.view;
  sp.direct = prefiltered_specular_light(ctx.direct, sp.reflection, rho);
  sp.mapped = ctx.direct_map.apply(sp.direct);
  sp.indirect = ctx.has_indirect ? prefiltered_specular_light(ctx.indirect, sp.reflection, rho)
                                 : Vec3::Zero();
  sp.light = (1.0 - in.occlusion) * sp.mapped +
             in.occlusion * in.indirect_gain.cwiseProduct(sp.indirect);
  sp.lut = BrdfIntegralTable::shared().lookup(mu, rho);
  sp.f0 = in.params.f0();
  sp.factor = sp.lut.value.apply(sp.f0);
  return sp;
}

}  // namespace

Vec3 shade_point(const PointShadeInput& in, const ShadingContext& ctx) {
  const BrdfParams& p = in.params;
  const Vec3 irradiance = diffuse_irradiance(ctx.direct, in.normal);
  Vec3 rgb = p.albedo.cwiseProduct(irradiance) * ((1.0 - p.metallic) * kInvPi);
  const double mu = in.view.dot(in.normal);
  if (mu > 0.0) {
    const SpecularParts sp = specular_parts(in, ctx, mu);
    rgb += sp.light.cwiseProduct(sp.factor);
  }
  return rgb;
}

void shade_point_backward(const PointShadeInput& in, const ShadingContext& ctx,
                          const Vec3& grad_rgb, PointShadeGrad& grad,
                          std::span<Vec3> grad_direct, std::span<Vec3> grad_indirect) {
  const BrdfParams& p = in.params;
  const double kd = (1.0 - p.metallic) * kInvPi;
  const Vec3 irradiance = diffuse_irradiance(ctx.direct, in.normal);
  grad.albedo += grad_rgb.cwiseProduct(irradiance) * kd;
  grad.metallic -= grad_rgb.cwiseProduct(p.albedo).dot(irradiance) * kInvPi;
  diffuse_irradiance_backward(ctx.direct, in.normal, grad_rgb.cwiseProduct(p.albedo) * kd,
                              grad.normal, grad_direct);

  const double mu = in.view.dot(in.normal);
  if (mu <= 0.0) {
    return;
  }
  const SpecularParts sp = specular_parts(in, ctx, mu);
  const Vec3 g_light = grad_rgb.cwiseProduct(sp.factor);
  const Vec3 g_factor = grad_rgb.cwiseProduct(sp.light);

  const double g_scale = g_factor.dot(sp.f0);
  const double g_bias = g_factor.sum();
  const Vec3 g_f0 = g_factor * sp.lut.value.scale;
  double g_mu = g_scale * sp.lut.d_cos.scale + g_bias * sp.lut.d_cos.bias;
  double g_rho = g_scale * sp.lut.d_roughness.scale + g_bias * sp.lut.d_roughness.bias;
  grad.albedo += g_f0 * p.metallic;
  grad.metallic += g_f0.dot(p.albedo - Vec3::Constant(0.04));

  const double s = in.occlusion;
  grad.occlusion += g_light.dot(in.indirect_gain.cwiseProduct(sp.indirect) - sp.mapped);
  const DirectLightMap& map = ctx.direct_map;
  const Vec3 pre = map.gain.cwiseProduct(sp.direct) + map.offset;
  Vec3 g_pre = g_light * (1.0 - s);
  for (int c = 0; c < 3; ++c) {
    if (pre[c] <= 0.0) {
      g_pre[c] = 0.0;
    }
  }
  grad.map_gain += g_pre.cwiseProduct(sp.direct);
  grad.map_offset += g_pre;
  Vec3 g_reflection = Vec3::Zero();
  prefiltered_specular_light_backward(ctx.direct, sp.reflection, p.roughness,
                                      g_pre.cwiseProduct(map.gain), g_reflection, g_rho,
                                      grad_direct);
  if (ctx.has_indirect) {
    grad.indirect_gain += (g_light * s).cwiseProduct(sp.indirect);
    prefiltered_specular_light_backward(ctx.indirect, sp.reflection, p.roughness,
                                        (g_light * s).cwiseProduct(in.indirect_gain),
                                        g_reflection, g_rho, grad_indirect);
  }
  // reflection = 2 mu n - v with mu = v . n.
  g_mu += 2.0 * g_reflection.dot(in.normal);
  grad.normal += 2.0 * mu * g_reflection + g_mu * in.view;
  grad.roughness += g_rho;
}

}  // namespace rmvps
