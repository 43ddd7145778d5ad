#pragma once

// GGX / Trowbridge-Reitz micro-facet terms. Roughness rho maps to alpha = rho^2.

#include <algorithm>

#include "rmvps/common.hpp"

namespace rmvps {

inline constexpr double kRoughnessFloor = 0.01;

inline double clamp_roughness(double rho) {
  return std::min(1.0, std::max(kRoughnessFloor, rho));
}

/// Normal distribution D(n.h); zero for cos_nh <= 0. Normalized so that D(n.h)(n.h) integrates
/// to one over the hemisphere.
inline double ggx_d(double cos_nh, double roughness) {
  if (cos_nh <= 0.0) {
    return 0.0;
  }
  const double c = std::min(cos_nh, 1.0);
  const double alpha = roughness * roughness;
  const double a2 = alpha * alpha;
  const double q = 1.0 + (a2 - 1.0) * c * c;
  return a2 / (kPi * q * q);
}

/// d D / d cos_nh and d D / d roughness.
inline void ggx_d_grad(double cos_nh, double roughness, double& d_cos, double& d_rough) {
  if (cos_nh <= 0.0) {
    d_cos = 0.0;
    d_rough = 0.0;
    return;
  }
  const double c = std::min(cos_nh, 1.0);
  const double alpha = roughness * roughness;
  const double a2 = alpha * alpha;
  const double k = a2 - 1.0;
  const double q = 1.0 + k * c * c;
  const double q3 = q * q * q;
  d_cos = cos_nh < 1.0 ? -4.0 * a2 * k * c / (kPi * q3) : 0.0;
  // D = a2 / (pi q^2), q = 1 + (a2 - 1) c^2  =>  dD/da2 = (q - 2 a2 c^2) / (pi q^3).
  const double d_a2 = (q - 2.0 * a2 * c * c) / (kPi * q3);
  d_rough = d_a2 * 4.0 * roughness * roughness * roughness;
}

inline Vec3 fresnel_schlick(double cosine, const Vec3& f0) {
  const double c = std::clamp(cosine, 0.0, 1.0);
  const double t = std::pow(1.0 - c, 5.0);
  return f0 + (Vec3::Ones() - f0) * t;
}

/// Smith masking-shadowing, height-correlated form for GGX: 1 / (1 + Lambda(i) + Lambda(o)).
inline double smith_g(double cos_i, double cos_o, double roughness) {
  if (cos_i <= 0.0 || cos_o <= 0.0) {
    return 0.0;
  }
  const double alpha = roughness * roughness;
  const double a2 = alpha * alpha;
  const auto lambda = [a2](double c) {
    const double c2 = std::min(c * c, 1.0);
    const double tan2 = (1.0 - c2) / c2;
    return 0.5 * (-1.0 + std::sqrt(1.0 + a2 * tan2));
  };
  return 1.0 / (1.0 + lambda(cos_i) + lambda(cos_o));
}

/// d smith_g / d roughness.
inline double smith_g_roughness_grad(double cos_i, double cos_o, double roughness) {
  if (cos_i <= 0.0 || cos_o <= 0.0) {
    return 0.0;
  }
  const double alpha = roughness * roughness;
  const double a2 = alpha * alpha;
  double lam = 0.0;
  double dlam = 0.0;
  for (double c : {cos_i, cos_o}) {
    const double c2 = std::min(c * c, 1.0);
    const double tan2 = (1.0 - c2) / c2;
    const double root = std::sqrt(1.0 + a2 * tan2);
    lam += 0.5 * (root - 1.0);
    dlam += 0.25 * tan2 / root;
  }
  const double g = 1.0 / (1.0 + lam);
  return -g * g * dlam * 4.0 * roughness * roughness * roughness;
}

}  // namespace rmvps
