#include <gtest/gtest.h>

#include "rmvps/nn.hpp"

namespace rmvps {
namespace {

TEST(PositionalEncoding, LayoutAndValues) {
  Matrix p(3, 1);
  p << 0.1, -0.2, 0.3;
  Matrix e;
  positional_encoding(p, 2, e);
  ASSERT_EQ(e.rows(), 15);
  EXPECT_DOUBLE_EQ(e(0, 0), 0.1);
  EXPECT_DOUBLE_EQ(e(4, 0), std::sin(-0.2));
  EXPECT_DOUBLE_EQ(e(8, 0), std::cos(0.3));
  EXPECT_DOUBLE_EQ(e(9, 0), std::sin(0.2));
  EXPECT_DOUBLE_EQ(e(14, 0), std::cos(0.6));
}

TEST(PositionalEncoding, TangentMatchesFiniteDifference) {
  Matrix p(3, 2);
  p << 0.1, 0.7, -0.2, 0.4, 0.3, -0.9;
  const double h = 1e-6;
  for (int axis = 0; axis < 3; ++axis) {
    Matrix t;
    positional_encoding_tangent(p, 6, axis, t);
    Matrix hi = p;
    Matrix lo = p;
    hi.row(axis).array() += h;
    lo.row(axis).array() -= h;
    Matrix ehi;
    Matrix elo;
    positional_encoding(hi, 6, ehi);
    positional_encoding(lo, 6, elo);
    const Matrix fd = (ehi - elo) / (2.0 * h);
    EXPECT_LT((fd - t).cwiseAbs().maxCoeff(), 1e-6);
  }
}

double weighted_output(const Mlp& net, const Matrix& x, const Matrix& probe) {
  return net.forward(x).cwiseProduct(probe).sum();
}

void check_mlp_gradients(Activation act) {
  std::mt19937_64 rng(17);
  Mlp net({4, 6, 5, 3}, act, 3.0);
  net.init(rng, false);
  std::normal_distribution<double> n(0.0, 0.5);
  for (Eigen::Index i = 0; i < net.params().size(); ++i) {
    net.params()[i] += 0.1 * n(rng);
  }
  Matrix x(4, 5);
  Matrix probe(3, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = n(rng);

  Mlp::Cache cache;
  net.forward(x, cache);
  Vector grad;
  Matrix grad_in;
  net.backward(cache, probe, grad, &grad_in);

  const double h = 1e-6;
  for (Eigen::Index i = 0; i < net.params().size(); ++i) {
    Mlp plus = net;
    Mlp minus = net;
    plus.params()[i] += h;
    minus.params()[i] -= h;
    const double fd = (weighted_output(plus, x, probe) - weighted_output(minus, x, probe)) / (2 * h);
    EXPECT_NEAR(grad[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "param " << i;
  }
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Matrix xp = x;
    Matrix xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    const double fd = (weighted_output(net, xp, probe) - weighted_output(net, xm, probe)) / (2 * h);
    EXPECT_NEAR(grad_in.data()[i], fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Mlp, ReluGradientsMatchFiniteDifference) { check_mlp_gradients(Activation::relu); }

TEST(Mlp, SoftplusGradientsMatchFiniteDifference) { check_mlp_gradients(Activation::softplus); }

TEST(Mlp, ZeroLastLayerGivesZeroOutput) {
  std::mt19937_64 rng(1);
  Mlp net({3, 8, 2}, Activation::relu);
  net.init(rng, true);
  EXPECT_TRUE(net.forward(Matrix::Random(3, 4)).isZero(0.0));
}

TEST(Mlp, RejectsWrongInputDimension) {
  Mlp net({3, 2}, Activation::relu);
  EXPECT_THROW(net.forward(Matrix::Zero(4, 1)), ValidationError);
}

}  // namespace
}  // namespace rmvps
