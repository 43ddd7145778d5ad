#include <gtest/gtest.h>

#include <random>

#include "rmvps/env_light.hpp"
#include "rmvps/microfacet.hpp"

namespace rmvps {
namespace {

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Vec3(n(rng), n(rng), n(rng)).normalized();
}

ShEnvironment random_env(int order, std::uint64_t seed, double dc = 2.0, double spread = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-spread, spread);
  ShEnvironment env(order);
  for (int c = 0; c < 3; ++c) {
    env.coefficient(c, 0) = dc;
    for (int i = 1; i < env.basis_count(); ++i) {
      env.coefficient(c, i) = u(rng);
    }
  }
  return env;
}

// Closed-form real SH for bands 0..2 (same sign convention as sh_basis).
std::vector<double> closed_form_basis(const Vec3& d) {
  const double x = d.x(), y = d.y(), z = d.z();
  return {0.28209479177387814,
          0.4886025119029199 * y,
          0.4886025119029199 * z,
          0.4886025119029199 * x,
          1.0925484305920792 * x * y,
          1.0925484305920792 * y * z,
          0.31539156525252005 * (3.0 * z * z - 1.0),
          1.0925484305920792 * x * z,
          0.5462742152960396 * (x * x - y * y)};
}

TEST(ShBasis, MatchesClosedFormUpToBandTwo) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const Vec3 d = random_unit(rng);
    std::vector<double> basis(9);
    sh_basis(2, d, basis);
    const auto expected = closed_form_basis(d);
    for (int k = 0; k < 9; ++k) {
      EXPECT_NEAR(basis[static_cast<std::size_t>(k)], expected[static_cast<std::size_t>(k)], 1e-12)
          << "index " << k;
    }
  }
}

TEST(ShBasis, OrthonormalThroughBandFour) {
  const QuadratureRule dense = QuadratureRule::fibonacci_sphere(40000);
  const int count = sh_count(4);
  Matrix gram = Matrix::Zero(count, count);
  std::vector<double> b(static_cast<std::size_t>(count));
  for (std::size_t j = 0; j < dense.size(); ++j) {
    sh_basis(4, dense.directions[j], b);
    for (int p = 0; p < count; ++p) {
      for (int q = 0; q < count; ++q) {
        gram(p, q) += b[static_cast<std::size_t>(p)] * b[static_cast<std::size_t>(q)] *
                      dense.weights[j];
      }
    }
  }
  EXPECT_LT((gram - Matrix::Identity(count, count)).cwiseAbs().maxCoeff(), 2e-3);
}

TEST(EvalSh, ConstantBandZero) {
  ShEnvironment env(0, {1.7, 1.7, 1.7});
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10; ++i) {
    const Vec3 v = eval_sh(env, random_unit(rng));
    EXPECT_NEAR(v.x(), 1.7 * 0.2820948, 1e-7);
  }
}

TEST(EvalSh, ZeroCoefficients) {
  EXPECT_TRUE(eval_sh(ShEnvironment::zero(3), Vec3::UnitX()).isZero(0.0));
}

TEST(EvalSh, BandOneIsOdd) {
  ShEnvironment env(1);
  for (int c = 0; c < 3; ++c) {
    env.coefficient(c, 2) = 0.8;  // Y_1,0
  }
  const Vec3 up = eval_sh(env, Vec3::UnitZ());
  const Vec3 down = eval_sh(env, -Vec3::UnitZ());
  EXPECT_NEAR(up.x(), -down.x(), 1e-15);
  EXPECT_GT(up.x(), 0.0);
}

TEST(EvalSh, RejectsWrongCoefficientCount) {
  EXPECT_THROW(ShEnvironment(2, std::vector<double>(10, 0.0)), ValidationError);
}

TEST(EvalRotated, IdentityPose) {
  const ShEnvironment env = random_env(3, 4);
  const Vec3 d = Vec3(0.2, -0.5, 0.8).normalized();
  EXPECT_TRUE(eval_rotated(env, d, RigPose::identity()).isApprox(eval_sh(env, d), 1e-15));
}

TEST(EvalRotated, ConstantEnvironmentAnyPose) {
  const ShEnvironment env = ShEnvironment::constant(3, Vec3(0.4, 0.5, 0.6));
  const RigPose pose = RigPose::make(2, 3, 57.0, 121.0);
  const Vec3 d = Vec3(0.1, 0.9, -0.3).normalized();
  EXPECT_LT((eval_rotated(env, d, pose) - eval_sh(env, d)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EvalRotated, DoubleQuarterTurnFlipsX) {
  const ShEnvironment env = random_env(3, 9);
  RigPose pose;
  pose.rig = rotation_about_axis(Vec3::UnitZ(), 90.0);
  pose.turntable = rotation_about_axis(Vec3::UnitZ(), 90.0);
  EXPECT_LT((eval_rotated(env, Vec3::UnitX(), pose) - eval_sh(env, -Vec3::UnitX()))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST(EvalRotated, SameAsWorldLightDirection) {
  const ShEnvironment env = random_env(3, 10);
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> angle(0.0, 360.0);
  for (int i = 0; i < 20; ++i) {
    const RigPose pose = RigPose::make(1, 1, angle(rng), angle(rng));
    const Vec3 d = random_unit(rng);
    EXPECT_LT((eval_rotated(env, d, pose) - eval_sh(env, world_light_direction(d, pose)))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
  }
}

TEST(Quadrature, WeightSums) {
  EXPECT_NEAR(QuadratureRule::fibonacci_sphere(512).total_weight(), 4.0 * kPi, 1e-3);
  EXPECT_NEAR(QuadratureRule::fibonacci_hemisphere(512).total_weight(), 2.0 * kPi, 1e-3);
  EXPECT_NEAR(QuadratureRule::lobe_aligned(Vec3::UnitY()).total_weight(), 2.0 * kPi, 5e-3);
  EXPECT_THROW(QuadratureRule::fibonacci_sphere(0), ValidationError);
}

TEST(Quadrature, LobeAlignedDirectionsInHemisphere) {
  const Vec3 axis = Vec3(1.0, 2.0, -0.5).normalized();
  const QuadratureRule rule = QuadratureRule::lobe_aligned(axis);
  EXPECT_EQ(rule.size(), 512u);
  for (const Vec3& d : rule.directions) {
    EXPECT_NEAR(d.norm(), 1.0, 1e-12);
    EXPECT_GT(d.dot(axis), 0.0);
  }
}

TEST(DiffuseIrradiance, ConstantRadianceGivesPi) {
  const ShEnvironment env = ShEnvironment::constant(3, Vec3::Ones());
  std::mt19937_64 rng(12);
  for (int i = 0; i < 20; ++i) {
    const Vec3 e = diffuse_irradiance(env, random_unit(rng), default_quadrature());
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(e[c], kPi, 0.02 * kPi);
    }
  }
}

TEST(DiffuseIrradiance, ZeroEnvironment) {
  EXPECT_TRUE(
      diffuse_irradiance(ShEnvironment::zero(3), Vec3::UnitZ(), default_quadrature()).isZero(0.0));
}

TEST(DiffuseIrradiance, RejectsEmptyQuadrature) {
  EXPECT_THROW(diffuse_irradiance(ShEnvironment::zero(1), Vec3::UnitZ(), QuadratureRule{}),
               ValidationError);
}

TEST(DiffuseIrradiance, InvariantUnderJointRotation) {
  const ShEnvironment env = random_env(3, 13, 1.5, 0.3);
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> angle(0.0, 360.0);
  for (int i = 0; i < 10; ++i) {
    const Vec3 n = random_unit(rng);
    const RigPose pose = RigPose::make(1, 1, angle(rng), angle(rng));
    // Rotating the query frame by R and the normal by R^T sees the same radiance field.
    const Vec3 rotated_n = pose.light_frame().transposed() * n;
    const Vec3 a = diffuse_irradiance(env, n, default_quadrature());
    const Vec3 b = diffuse_irradiance(env, rotated_n, default_quadrature(), pose);
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(a[c], b[c], 0.02 * std::abs(a[c]));
    }
  }
}

TEST(DiffuseIrradiance, LinearInCoefficients) {
  const ShEnvironment env = random_env(3, 14);
  const Vec3 n = Vec3(0.3, 0.4, 0.5).normalized();
  const Vec3 a = diffuse_irradiance(env, n, default_quadrature());
  const Vec3 b = diffuse_irradiance(env.scaled(3.5), n, default_quadrature());
  EXPECT_LT((b - 3.5 * a).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(PrefilteredSpecular, ConstantRadianceIsPreserved) {
  const ShEnvironment env = ShEnvironment::constant(3, Vec3::Ones());
  for (double rho : {kRoughnessFloor, 0.1, 0.3, 0.6, 1.0}) {
    const Vec3 v = prefiltered_specular_light(env, Vec3(0.1, 0.7, 0.2).normalized(), rho,
                                              RigPose::identity(), default_quadrature());
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(v[c], 1.0, 0.02) << "rho " << rho;
    }
  }
}

TEST(PrefilteredSpecular, UnnormalizedLobeIntegratesToOneUnderDenseQuadrature) {
  // Independent check of the normalization claim: the raw lobe D(w.t)(w.t) integrated with a
  // dense uniform rule, no renormalization.
  const QuadratureRule dense = QuadratureRule::fibonacci_sphere(200000);
  const Vec3 t = Vec3(0.2, -0.3, 0.9).normalized();
  for (double rho : {0.5, 0.9}) {
    double sum = 0.0;
    for (std::size_t j = 0; j < dense.size(); ++j) {
      const double c = dense.directions[j].dot(t);
      sum += ggx_d(c, rho) * std::max(c, 0.0) * dense.weights[j];
    }
    EXPECT_NEAR(sum, 1.0, 0.01) << "rho " << rho;
  }
}

TEST(PrefilteredSpecular, SharpLobeApproachesPointEvaluation) {
  const ShEnvironment env = random_env(3, 15, 2.0, 0.15);
  const RigPose pose = RigPose::make(1, 1, 30.0, 75.0);
  std::mt19937_64 rng(15);
  for (int i = 0; i < 10; ++i) {
    const Vec3 t = random_unit(rng);
    const Vec3 expected = eval_rotated(env, t, pose);
    const Vec3 coarse =
        prefiltered_specular_light(env, t, kRoughnessFloor, pose, default_quadrature());
    const Vec3 dense = prefiltered_specular_light(env, t, kRoughnessFloor, pose,
                                                  QuadratureRule::lobe_aligned(t));
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(coarse[c], expected[c], 0.05 * std::abs(expected[c]));
      EXPECT_NEAR(dense[c], expected[c], 1e-3 * std::abs(expected[c]));
    }
  }
}

TEST(PrefilteredSpecular, ZeroAndScaling) {
  const Vec3 t = Vec3(0.0, 0.6, 0.8);
  EXPECT_TRUE(prefiltered_specular_light(ShEnvironment::zero(3), t, 0.4, RigPose::identity(),
                                         default_quadrature())
                  .isZero(0.0));
  const ShEnvironment env = random_env(3, 16);
  const Vec3 a = prefiltered_specular_light(env, t, 0.4, RigPose::identity(), default_quadrature());
  const Vec3 b = prefiltered_specular_light(env.scaled(2.0), t, 0.4, RigPose::identity(),
                                            default_quadrature());
  for (int c = 0; c < 3; ++c) {
    EXPECT_GE(b[c], a[c]);
    EXPECT_NEAR(b[c], 2.0 * a[c], 1e-9);
  }
}

// Finite-difference checks of the hand-written backward passes.
TEST(RadianceTableGradients, DiffuseAndSpecularMatchFiniteDifferences) {
  ShEnvironment env = random_env(2, 17, 1.0, 0.4);
  const QuadratureRule quad = QuadratureRule::fibonacci_sphere(128);
  const RigPose pose = RigPose::make(1, 1, 40.0, 10.0);
  const Vec3 n = Vec3(0.3, -0.5, 0.8).normalized();
  const Vec3 t = Vec3(-0.2, 0.4, 0.9).normalized();
  const double rho = 0.45;
  const Vec3 w(0.7, -0.4, 1.1);

  RadianceTable table = RadianceTable::build(env, pose.light_frame(), quad);
  const auto objective = [&](const RadianceTable& tb, const Vec3& nn, const Vec3& tt, double r) {
    return w.dot(diffuse_irradiance(tb, nn)) + w.dot(prefiltered_specular_light(tb, tt, r));
  };

  std::vector<Vec3> grad_radiance(quad.size(), Vec3::Zero());
  Vec3 grad_n = Vec3::Zero();
  Vec3 grad_t = Vec3::Zero();
  double grad_rho = 0.0;
  diffuse_irradiance_backward(table, n, w, grad_n, grad_radiance);
  prefiltered_specular_light_backward(table, t, rho, w, grad_t, grad_rho, grad_radiance);
  std::vector<double> grad_coeff(env.coefficients().size(), 0.0);
  table.backpropagate(grad_radiance, grad_coeff);

  const double h = 1e-6;
  for (int k = 0; k < 3; ++k) {
    Vec3 dn = Vec3::Zero();
    dn[k] = h;
    const double fd_n = (objective(table, n + dn, t, rho) - objective(table, n - dn, t, rho)) /
                        (2.0 * h);
    EXPECT_NEAR(grad_n[k], fd_n, 1e-5 * std::max(1.0, std::abs(fd_n)));
    const double fd_t = (objective(table, n, t + dn, rho) - objective(table, n, t - dn, rho)) /
                        (2.0 * h);
    EXPECT_NEAR(grad_t[k], fd_t, 1e-5 * std::max(1.0, std::abs(fd_t)));
  }
  const double fd_rho =
      (objective(table, n, t, rho + h) - objective(table, n, t, rho - h)) / (2.0 * h);
  EXPECT_NEAR(grad_rho, fd_rho, 1e-5 * std::max(1.0, std::abs(fd_rho)));

  for (std::size_t i = 0; i < grad_coeff.size(); ++i) {
    ShEnvironment plus = env;
    ShEnvironment minus = env;
    plus.coefficients()[i] += h;
    minus.coefficients()[i] -= h;
    RadianceTable tp = table;
    RadianceTable tm = table;
    tp.update(plus);
    tm.update(minus);
    const double fd = (objective(tp, n, t, rho) - objective(tm, n, t, rho)) / (2.0 * h);
    EXPECT_NEAR(grad_coeff[i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << "coefficient " << i;
  }
}

}  // namespace
}  // namespace rmvps
