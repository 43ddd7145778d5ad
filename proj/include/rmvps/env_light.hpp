#pragma once

// Distant environment light stored as real spherical harmonics, plus the fixed quadrature
// rules used for the hemisphere and lobe integrals in shading.

#include <span>
#include <vector>

#include "rmvps/common.hpp"
#include "rmvps/rig.hpp"

namespace rmvps {

/// Number of real SH basis functions up to and including band `order`.
constexpr int sh_count(int order) { return (order + 1) * (order + 1); }

/// Real orthonormal SH basis at unit direction `dir`, index l*(l+1)+m, no Condon-Shortley
/// phase (Y_1,-1 ~ y, Y_1,0 ~ z, Y_1,1 ~ x). `out` must hold sh_count(order) values.
void sh_basis(int order, const Vec3& dir, std::span<double> out);

/// Per-channel SH radiance. Coefficients are stored channel-major: [r_0..r_k, g_0..g_k, b_0..b_k].
class ShEnvironment {
 public:
  ShEnvironment() : ShEnvironment(3) {}
  explicit ShEnvironment(int order);
  ShEnvironment(int order, std::vector<double> coefficients);

  static ShEnvironment zero(int order) { return ShEnvironment(order); }
  /// Direction-independent radiance `rgb`.
  static ShEnvironment constant(int order, const Vec3& rgb);

  int order() const { return order_; }
  int basis_count() const { return sh_count(order_); }
  std::span<double> coefficients() { return coefficients_; }
  std::span<const double> coefficients() const { return coefficients_; }
  double& coefficient(int channel, int index) {
    return coefficients_[static_cast<std::size_t>(channel * basis_count() + index)];
  }
  double coefficient(int channel, int index) const {
    return coefficients_[static_cast<std::size_t>(channel * basis_count() + index)];
  }

  ShEnvironment scaled(double k) const;

 private:
  int order_;
  std::vector<double> coefficients_;
};

/// Raw (unclamped) radiance.
Vec3 eval_sh(const ShEnvironment& env, const Vec3& dir);

/// eval_sh(env, R_a R_b dir).
Vec3 eval_rotated(const ShEnvironment& env, const Vec3& dir, const RigPose& pose);
Vec3 eval_rotated(const ShEnvironment& env, const Vec3& dir, const Rotation& light_frame);

/// Directions with solid-angle weights.
struct QuadratureRule {
  std::vector<Vec3> directions;
  std::vector<double> weights;

  std::size_t size() const { return directions.size(); }
  double total_weight() const;

  /// Fibonacci spiral over the full sphere, equal weights 4*pi/count.
  static QuadratureRule fibonacci_sphere(int count = 512);
  /// Fibonacci spiral over the hemisphere z >= 0, equal weights 2*pi/count.
  static QuadratureRule fibonacci_hemisphere(int count = 512);
  /// Product rule aligned with `axis`: Gauss-Legendre in log(tan^2 theta) times uniform azimuth.
  /// Resolves sharp lobes around `axis` that a uniform spiral misses. Covers the hemisphere
  /// about `axis`.
  static QuadratureRule lobe_aligned(const Vec3& axis, int radial = 32, int azimuthal = 16);
};

/// Clamped radiance of an environment at every direction of a quadrature rule, queried in a
/// rotated light frame. Shading integrals reduce to weighted sums over this table, so one
/// table is built per (environment, pose) and reused by every shading point of that pose.
struct RadianceTable {
  const QuadratureRule* quad = nullptr;
  Rotation light_frame;
  std::vector<Vec3> radiance;   // max(0, L(R w_j))
  std::vector<Vec3> positive;   // 1 where raw radiance > 0 per channel, else 0
  std::vector<double> basis;    // size() x basis_count, row per direction (rotated query)
  int basis_count = 0;

  static RadianceTable build(const ShEnvironment& env, const Rotation& light_frame,
                             const QuadratureRule& quad);
  /// Refresh radiance values after the coefficients change; directions and basis are reused.
  void update(const ShEnvironment& env);

  /// Scatter per-direction radiance gradients (w.r.t. the clamped values) back to SH
  /// coefficients, accumulating into `coefficient_grad` (channel-major like ShEnvironment).
  void backpropagate(std::span<const Vec3> radiance_grad, std::span<double> coefficient_grad) const;
};

/// sum_j max(0,L(R w_j)) max(0, w_j . n) weight_j.
Vec3 diffuse_irradiance(const RadianceTable& table, const Vec3& normal);
/// Gradients of `diffuse_irradiance` w.r.t. the normal and, accumulated, the per-direction
/// clamped radiance.
void diffuse_irradiance_backward(const RadianceTable& table, const Vec3& normal,
                                 const Vec3& grad_out, Vec3& grad_normal,
                                 std::span<Vec3> grad_radiance);

Vec3 diffuse_irradiance(const ShEnvironment& env, const Vec3& normal, const QuadratureRule& quad,
                        const RigPose& pose = RigPose::identity());

/// Specular light lobe: sum_j u_j L_j / sum_j u_j with u_j = D(rho, w_j . t) max(0, w_j . t)
/// weight_j. D times the cosine integrates to one analytically; renormalizing by the discrete
/// sum keeps the lobe normalized for any roughness.
Vec3 prefiltered_specular_light(const RadianceTable& table, const Vec3& reflection,
                                double roughness);
void prefiltered_specular_light_backward(const RadianceTable& table, const Vec3& reflection,
                                         double roughness, const Vec3& grad_out,
                                         Vec3& grad_reflection, double& grad_roughness,
                                         std::span<Vec3> grad_radiance);

Vec3 prefiltered_specular_light(const ShEnvironment& env, const Vec3& reflection, double roughness,
                                const RigPose& pose, const QuadratureRule& quad);

/// Default rule shared by shading (512-direction Fibonacci sphere).
const QuadratureRule& default_quadrature();

}  // namespace rmvps
