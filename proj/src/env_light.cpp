#include "rmvps/env_light.hpp"

#include <cmath>

#include "rmvps/microfacet.hpp"

namespace rmvps {

namespace {

// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  nodes.assign(static_cast<std::size_t>(n), 0.0);
  weights.assign(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(kPi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0;
      double p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) {
        break;
      }
    }
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    nodes[static_cast<std::size_t>(i)] = -x;
    nodes[static_cast<std::size_t>(n - 1 - i)] = x;
    weights[static_cast<std::size_t>(i)] = w;
    weights[static_cast<std::size_t>(n - 1 - i)] = w;
  }
}

// Orthonormal tangent frame with `axis` as third column.
Mat3 frame_from_axis(const Vec3& axis) {
  const Vec3 z = axis.normalized();
  const Vec3 helper = std::abs(z.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 x = helper.cross(z).normalized();
  const Vec3 y = z.cross(x);
  Mat3 frame;
  frame.col(0) = x;
  frame.col(1) = y;
  frame.col(2) = z;
  return frame;
}

}  // namespace

void sh_basis(int order, const Vec3& dir, std::span<double> out) {
  const double x = dir.x();
  const double y = dir.y();
  const double z = dir.z();
  // cos(m phi) sin^m(theta) and sin(m phi) sin^m(theta) as the real/imaginary parts of (x+iy)^m.
  double cm = 1.0;
  double sm = 0.0;
  for (int m = 0; m <= order; ++m) {
    // P~_l^m(z) = P_l^m(z) / sin^m(theta) by upward recurrence in l.
    double double_factorial = 1.0;
    for (int k = 1; k <= 2 * m - 1; k += 2) {
      double_factorial *= k;
    }
    double p_prev = 0.0;
    double p = double_factorial;
    for (int l = m; l <= order; ++l) {
      if (l == m + 1) {
        const double next = z * (2.0 * m + 1.0) * p;
        p_prev = p;
        p = next;
      } else if (l > m + 1) {
        const double next = ((2.0 * l - 1.0) * z * p - (l + m - 1.0) * p_prev) / (l - m);
        p_prev = p;
        p = next;
      }
      // K_lm = sqrt((2l+1)/(4pi) (l-m)!/(l+m)!)
      double ratio = 1.0;
      for (int k = l - m + 1; k <= l + m; ++k) {
        ratio /= k;
      }
      const double norm = std::sqrt((2.0 * l + 1.0) / (4.0 * kPi) * ratio);
      const int base = l * (l + 1);
      if (m == 0) {
        out[static_cast<std::size_t>(base)] = norm * p;
      } else {
        out[static_cast<std::size_t>(base + m)] = std::sqrt(2.0) * norm * p * cm;
        out[static_cast<std::size_t>(base - m)] = std::sqrt(2.0) * norm * p * sm;
      }
    }
    const double cn = cm * x - sm * y;
    const double sn = cm * y + sm * x;
    cm = cn;
    sm = sn;
  }
}

ShEnvironment::ShEnvironment(int order)
    : order_(order), coefficients_(static_cast<std::size_t>(3 * sh_count(order)), 0.0) {
  if (order < 0) {
    throw ValidationError("SH order must be non-negative");
  }
}

ShEnvironment::ShEnvironment(int order, std::vector<double> coefficients)
    : order_(order), coefficients_(std::move(coefficients)) {
  if (order < 0) {
    throw ValidationError("SH order must be non-negative");
  }
  if (coefficients_.size() != static_cast<std::size_t>(3 * sh_count(order))) {
    throw ValidationError("SH environment of order " + std::to_string(order) + " needs " +
                          std::to_string(3 * sh_count(order)) + " coefficients, got " +
                          std::to_string(coefficients_.size()));
  }
}

ShEnvironment ShEnvironment::constant(int order, const Vec3& rgb) {
  ShEnvironment env(order);
  const double y00 = 0.5 / std::sqrt(kPi);
  for (int c = 0; c < 3; ++c) {
    env.coefficient(c, 0) = rgb[c] / y00;
  }
  return env;
}

ShEnvironment ShEnvironment::scaled(double k) const {
  ShEnvironment out = *this;
  for (double& c : out.coefficients_) {
    c *= k;
  }
  return out;
}

Vec3 eval_sh(const ShEnvironment& env, const Vec3& dir) {
  const int count = env.basis_count();
  std::vector<double> basis(static_cast<std::size_t>(count));
  sh_basis(env.order(), dir, basis);
  Vec3 out = Vec3::Zero();
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < count; ++i) {
      out[c] += env.coefficient(c, i) * basis[static_cast<std::size_t>(i)];
    }
  }
  return out;
}

Vec3 eval_rotated(const ShEnvironment& env, const Vec3& dir, const Rotation& light_frame) {
  return eval_sh(env, light_frame * dir);
}

Vec3 eval_rotated(const ShEnvironment& env, const Vec3& dir, const RigPose& pose) {
  return eval_sh(env, world_light_direction(dir, pose));
}

double QuadratureRule::total_weight() const {
  double sum = 0.0;
  for (double w : weights) {
    sum += w;
  }
  return sum;
}

QuadratureRule QuadratureRule::fibonacci_sphere(int count) {
  if (count <= 0) {
    throw ValidationError("quadrature needs at least one direction");
  }
  QuadratureRule rule;
  rule.directions.reserve(static_cast<std::size_t>(count));
  const double golden_angle = kPi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < count; ++i) {
    const double z = 1.0 - (2.0 * i + 1.0) / count;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden_angle * i;
    rule.directions.emplace_back(r * std::cos(phi), r * std::sin(phi), z);
  }
  rule.weights.assign(static_cast<std::size_t>(count), 4.0 * kPi / count);
  return rule;
}

QuadratureRule QuadratureRule::fibonacci_hemisphere(int count) {
  if (count <= 0) {
    throw ValidationError("quadrature needs at least one direction");
  }
  QuadratureRule rule;
  rule.directions.reserve(static_cast<std::size_t>(count));
  const double golden_angle = kPi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < count; ++i) {
    const double z = 1.0 - (i + 0.5) / count;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden_angle * i;
    rule.directions.emplace_back(r * std::cos(phi), r * std::sin(phi), z);
  }
  rule.weights.assign(static_cast<std::size_t>(count), 2.0 * kPi / count);
  return rule;
}

QuadratureRule QuadratureRule::lobe_aligned(const Vec3& axis, int radial, int azimuthal) {
  if (radial <= 0 || azimuthal <= 0) {
    throw ValidationError("quadrature needs at least one direction");
  }
  // s = log(tan^2 theta) on [s_lo, s_hi]; solid angle element is x / (2 (1+x)^1.5) ds dphi.
  constexpr double s_lo = -30.0;
  constexpr double s_hi = 18.0;
  std::vector<double> nodes;
  std::vector<double> gl_weights;
  gauss_legendre(radial, nodes, gl_weights);
  const Mat3 frame = frame_from_axis(axis);
  QuadratureRule rule;
  rule.directions.reserve(static_cast<std::size_t>(radial * azimuthal));
  rule.weights.reserve(static_cast<std::size_t>(radial * azimuthal));
  const double half_range = 0.5 * (s_hi - s_lo);
  const double dphi = 2.0 * kPi / azimuthal;
  for (int i = 0; i < radial; ++i) {
    const double s = s_lo + half_range * (nodes[static_cast<std::size_t>(i)] + 1.0);
    const double x = std::exp(s);
    const double cos_theta = 1.0 / std::sqrt(1.0 + x);
    const double sin_theta = std::sqrt(x) * cos_theta;
    const double w = gl_weights[static_cast<std::size_t>(i)] * half_range * x /
                     (2.0 * std::pow(1.0 + x, 1.5)) * dphi;
    for (int j = 0; j < azimuthal; ++j) {
      // Offset alternate rings by half a step so rings do not align.
      const double phi = dphi * (j + 0.5 * (i % 2));
      const Vec3 local(sin_theta * std::cos(phi), sin_theta * std::sin(phi), cos_theta);
      rule.directions.push_back(frame * local);
      rule.weights.push_back(w);
    }
  }
  return rule;
}

RadianceTable RadianceTable::build(const ShEnvironment& env, const Rotation& light_frame,
                                   const QuadratureRule& quad) {
  RadianceTable table;
  table.quad = &quad;
  table.light_frame = light_frame;
  table.basis_count = env.basis_count();
  const std::size_t count = quad.size();
  const auto bc = static_cast<std::size_t>(table.basis_count);
  table.basis.resize(count * bc);
  for (std::size_t j = 0; j < count; ++j) {
    const Vec3 world = (light_frame * quad.directions[j]).normalized();
    sh_basis(env.order(), world, std::span<double>(table.basis.data() + j * bc, bc));
  }
  table.update(env);
  return table;
}

void RadianceTable::update(const ShEnvironment& env) {
  if (env.basis_count() != basis_count) {
    throw ValidationError("radiance table was built for a different SH order");
  }
  const std::size_t count = quad->size();
  const auto bc = static_cast<std::size_t>(basis_count);
  radiance.assign(count, Vec3::Zero());
  positive.assign(count, Vec3::Zero());
  const auto coeffs = env.coefficients();
  for (std::size_t j = 0; j < count; ++j) {
    const double* row = basis.data() + j * bc;
    for (int c = 0; c < 3; ++c) {
      const double* cc = coeffs.data() + static_cast<std::size_t>(c) * bc;
      double v = 0.0;
      for (std::size_t i = 0; i < bc; ++i) {
        v += cc[i] * row[i];
      }
      if (v > 0.0) {
        radiance[j][c] = v;
        positive[j][c] = 1.0;
      }
    }
  }
}

void RadianceTable::backpropagate(std::span<const Vec3> radiance_grad,
                                  std::span<double> coefficient_grad) const {
  const std::size_t count = quad->size();
  const auto bc = static_cast<std::size_t>(basis_count);
  for (std::size_t j = 0; j < count; ++j) {
    const Vec3 g = radiance_grad[j].cwiseProduct(positive[j]);
    if (g.isZero(0.0)) {
      continue;
    }
    const double* row = basis.data() + j * bc;
    for (int c = 0; c < 3; ++c) {
      double* out = coefficient_grad.data() + static_cast<std::size_t>(c) * bc;
      for (std::size_t i = 0; i < bc; ++i) {
        out[i] += g[c] * row[i];
      }
    }
  }
}

Vec3 diffuse_irradiance(const RadianceTable& table, const Vec3& normal) {
  const QuadratureRule& quad = *table.quad;
  Vec3 sum = Vec3::Zero();
  for (std::size_t j = 0; j < quad.size(); ++j) {
    const double c = quad.directions[j].dot(normal);
    if (c > 0.0) {
      sum += (c * quad.weights[j]) * table.radiance[j];
    }
  }
  return sum;
}

void diffuse_irradiance_backward(const RadianceTable& table, const Vec3& normal,
                                 const Vec3& grad_out, Vec3& grad_normal,
                                 std::span<Vec3> grad_radiance) {
  const QuadratureRule& quad = *table.quad;
  for (std::size_t j = 0; j < quad.size(); ++j) {
    const double c = quad.directions[j].dot(normal);
    if (c > 0.0) {
      const double w = quad.weights[j];
      grad_normal += (w * grad_out.dot(table.radiance[j])) * quad.directions[j];
      grad_radiance[j] += (c * w) * grad_out;
    }
  }
}

Vec3 diffuse_irradiance(const ShEnvironment& env, const Vec3& normal, const QuadratureRule& quad,
                        const RigPose& pose) {
  if (quad.size() == 0) {
    throw ValidationError("diffuse irradiance needs a non-empty quadrature rule");
  }
  const RadianceTable table = RadianceTable::build(env, pose.light_frame(), quad);
  return diffuse_irradiance(table, normal);
}

Vec3 prefiltered_specular_light(const RadianceTable& table, const Vec3& reflection,
                                double roughness) {
  const double rho = clamp_roughness(roughness);
  const QuadratureRule& quad = *table.quad;
  Vec3 sum = Vec3::Zero();
  double weight_sum = 0.0;
  for (std::size_t j = 0; j < quad.size(); ++j) {
    const double c = quad.directions[j].dot(reflection);
    if (c > 0.0) {
      const double u = ggx_d(c, rho) * c * quad.weights[j];
      sum += u * table.radiance[j];
      weight_sum += u;
    }
  }
  return weight_sum > 0.0 ? Vec3(sum / weight_sum) : Vec3(Vec3::Zero());
}

void prefiltered_specular_light_backward(const RadianceTable& table, const Vec3& reflection,
                                         double roughness, const Vec3& grad_out,
                                         Vec3& grad_reflection, double& grad_roughness,
                                         std::span<Vec3> grad_radiance) {
  const bool clamped = roughness < kRoughnessFloor || roughness > 1.0;
  const double rho = clamp_roughness(roughness);
  const QuadratureRule& quad = *table.quad;
  Vec3 sum = Vec3::Zero();
  double weight_sum = 0.0;
  for (std::size_t j = 0; j < quad.size(); ++j) {
    const double c = quad.directions[j].dot(reflection);
    if (c > 0.0) {
      const double u = ggx_d(c, rho) * c * quad.weights[j];
      sum += u * table.radiance[j];
      weight_sum += u;
    }
  }
  if (weight_sum <= 0.0) {
    return;
  }
  const Vec3 value = sum / weight_sum;
  // dP/du_j = (L_j - P) / U,  dP/dL_j = u_j / U.
  for (std::size_t j = 0; j < quad.size(); ++j) {
    const double c = quad.directions[j].dot(reflection);
    if (c <= 0.0) {
      continue;
    }
    const double w = quad.weights[j];
    const double d = ggx_d(c, rho);
    double d_cos = 0.0;
    double d_rough = 0.0;
    ggx_d_grad(c, rho, d_cos, d_rough);
    const double u = d * c * w;
    const double g_u = grad_out.dot(table.radiance[j] - value) / weight_sum;
    grad_reflection += (g_u * w * (d + c * d_cos)) * quad.directions[j];
    if (!clamped) {
      grad_roughness += g_u * w * c * d_rough;
    }
    grad_radiance[j] += (u / weight_sum) * grad_out;
  }
}

Vec3 prefiltered_specular_light(const ShEnvironment& env, const Vec3& reflection, double roughness,
                                const RigPose& pose, const QuadratureRule& quad) {
  if (quad.size() == 0) {
    throw ValidationError("specular prefiltering needs a non-empty quadrature rule");
  }
  const RadianceTable table = RadianceTable::build(env, pose.light_frame(), quad);
  return prefiltered_specular_light(table, reflection, roughness);
}

const QuadratureRule& default_quadrature() {
  static const QuadratureRule rule = QuadratureRule::fibonacci_sphere(512);
  return rule;
}

}  // namespace rmvps
