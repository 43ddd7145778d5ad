#pragma once

#include <array>
#include <memory>
#include <random>
#include <vector>

#include "rmvps/common.hpp"
#include "rmvps/nn.hpp"
#include "rmvps/rig.hpp"

namespace rmvps {

constexpr int kLatentDim = 32;

struct FieldSample {
  double sdf = 0.0;
  Vec3 gradient = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  bool degenerate = false;  // gradient norm <= 1e-8; normal set to +Z
  Vector latent = Vector::Zero(kLatentDim);
};

/// Normal from a gradient with the +Z fallback for degenerate gradients.
Vec3 safe_normal(const Vec3& gradient, bool* degenerate = nullptr);

class SdfSource {
 public:
  virtual ~SdfSource() = default;
  virtual double sdf(const Vec3& p) const = 0;
  virtual FieldSample evaluate(const Vec3& p) const = 0;
  /// Signed distances of the columns of points (3xN).
  virtual Vector sdf_batch(const Matrix& points) const;
  virtual std::vector<FieldSample> evaluate_batch(const Matrix& points) const;
};

class AnalyticSphere : public SdfSource {
 public:
  explicit AnalyticSphere(double radius, const Vec3& center = Vec3::Zero());
  double sdf(const Vec3& p) const override;
  FieldSample evaluate(const Vec3& p) const override;
  double radius() const { return radius_; }
  const Vec3& center() const { return center_; }

 private:
  double radius_;
  Vec3 center_;
};

class AnalyticBox : public SdfSource {
 public:
  explicit AnalyticBox(const Vec3& half_extents, const Vec3& center = Vec3::Zero());
  double sdf(const Vec3& p) const override;
  FieldSample evaluate(const Vec3& p) const override;

 private:
  Vec3 half_;
  Vec3 center_;
};

/// min over members; the gradient comes from the closest member.
class SdfUnion : public SdfSource {
 public:
  explicit SdfUnion(std::vector<std::shared_ptr<const SdfSource>> members);
  double sdf(const Vec3& p) const override;
  FieldSample evaluate(const Vec3& p) const override;

 private:
  std::vector<std::shared_ptr<const SdfSource>> members_;
};

/// The wrapped field rotated by R: f'(x) = f(R^T x).
class RotatedSdf : public SdfSource {
 public:
  RotatedSdf(const SdfSource& inner, const Rotation& rotation);
  double sdf(const Vec3& p) const override;
  FieldSample evaluate(const Vec3& p) const override;

 private:
  const SdfSource& inner_;
  Rotation rotation_;
};

struct SdfFieldSpec {
  int frequencies = 6;
  int hidden_layers = 8;
  int width = 64;
  int latent_layer = 6;  // 1-based hidden layer carrying the latent rows
  int latent_dim = kLatentDim;
  double init_radius = 0.5;
  double softplus_beta = 100.0;

  void validate() const;
};

/// Softplus MLP over a positional encoding. Hidden layer `latent_layer` produces width +
/// latent_dim rows; the extra rows are the latent output and do not feed later layers.
/// Spatial gradients are propagated as forward tangents, and backward handles losses on the
/// sdf, the spatial gradient and the latent together.
class SdfNetwork : public SdfSource {
 public:
  struct Cache {
    Matrix points;
    std::vector<Matrix> inputs;                   // input of each layer (encoding first)
    std::vector<Matrix> pre;                      // pre-activation of each hidden layer (width rows)
    std::vector<std::array<Matrix, 3>> tangents;  // tangent of each layer input
    std::vector<std::array<Matrix, 3>> tangent_pre;
    bool with_tangents = false;
    Vector sdf;       // N
    Matrix gradient;  // 3xN
    Matrix latent;    // latent_dim x N
  };

  SdfNetwork() : SdfNetwork(SdfFieldSpec{}, 0) {}
  SdfNetwork(const SdfFieldSpec& spec, std::uint64_t seed);

  const SdfFieldSpec& spec() const { return spec_; }
  Vector& params() { return params_; }
  const Vector& params() const { return params_; }
  std::size_t layer_count() const { return layers_.size(); }
  const LayerLayout& layer(std::size_t i) const { return layers_[i]; }

  void forward(const Matrix& points, Cache& cache, bool with_tangents) const;
  /// Accumulates parameter gradients. Any of the upstream gradients may be empty (0 columns).
  void backward(const Cache& cache, const Vector& grad_sdf, const Matrix& grad_gradient,
                const Matrix& grad_latent, Vector& grad) const;

  double sdf(const Vec3& p) const override;
  FieldSample evaluate(const Vec3& p) const override;
  Vector sdf_batch(const Matrix& points) const override;
  std::vector<FieldSample> evaluate_batch(const Matrix& points) const override;

 private:
  Eigen::Map<const Matrix> weight(std::size_t i) const;
  Eigen::Map<const Vector> bias(std::size_t i) const;
  void geometric_init(std::uint64_t seed);

  SdfFieldSpec spec_;
  std::vector<LayerLayout> layers_;  // hidden layers then the output layer
  Vector params_;
};

struct ProjectionResult {
  Vec3 point = Vec3::Zero();
  int iterations = 0;
  bool converged = false;
};

/// Iterates p <- p - sdf(p) n(p) until |sdf| < 1e-5 or max_iters.
ProjectionResult surface_project(const SdfSource& field, const Vec3& p, int max_iters = 50);

}  // namespace rmvps
