#include "rmvps/sdf_field.hpp"

#include <algorithm>

namespace rmvps {

Vec3 safe_normal(const Vec3& gradient, bool* degenerate) {
  const double norm = gradient.norm();
  const bool bad = !(norm > 1e-8) || !std::isfinite(norm);
  if (degenerate != nullptr) {
    *degenerate = bad;
  }
  return bad ? Vec3::UnitZ() : Vec3(gradient / norm);
}

Vector SdfSource::sdf_batch(const Matrix& points) const {
  Vector out(points.cols());
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    out[i] = sdf(points.col(i));
  }
  return out;
}

std::vector<FieldSample> SdfSource::evaluate_batch(const Matrix& points) const {
  std::vector<FieldSample> out;
  out.reserve(static_cast<std::size_t>(points.cols()));
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    out.push_back(evaluate(points.col(i)));
  }
  return out;
}

namespace {

FieldSample make_sample(double sdf, const Vec3& gradient) {
  FieldSample s;
  s.sdf = sdf;
  s.gradient = gradient;
  s.normal = safe_normal(gradient, &s.degenerate);
  return s;
}

}  // namespace

AnalyticSphere::AnalyticSphere(double radius, const Vec3& center)
    : radius_(radius), center_(center) {
  if (!(radius > 0.0)) {
    throw ValidationError("sphere radius must be positive");
  }
}

double AnalyticSphere::sdf(const Vec3& p) const { return (p - center_).norm() - radius_; }

FieldSample AnalyticSphere::evaluate(const Vec3& p) const {
  const Vec3 d = p - center_;
  const double r = d.norm();
  return make_sample(r - radius_, r > 0.0 ? Vec3(d / r) : Vec3::Zero());
}

AnalyticBox::AnalyticBox(const Vec3& half_extents, const Vec3& center)
    : half_(half_extents), center_(center) {
  if (!(half_extents.minCoeff() > 0.0)) {
    throw ValidationError("box half-extents must be positive");
  }
}

double AnalyticBox::sdf(const Vec3& p) const {
  const Vec3 q = (p - center_).cwiseAbs() - half_;
  return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

FieldSample AnalyticBox::evaluate(const Vec3& p) const {
  const Vec3 local = p - center_;
  const Vec3 q = local.cwiseAbs() - half_;
  Vec3 sign;
  for (int k = 0; k < 3; ++k) {
    sign[k] = local[k] < 0.0 ? -1.0 : 1.0;
  }
  const Vec3 outside = q.cwiseMax(0.0);
  const double out_norm = outside.norm();
  Vec3 grad;
  if (out_norm > 0.0) {
    grad = (outside / out_norm).cwiseProduct(sign);
  } else {
    Eigen::Index axis = 0;
    q.maxCoeff(&axis);
    grad = Vec3::Zero();
    grad[axis] = sign[axis];
  }
  return make_sample(sdf(p), grad);
}

SdfUnion::SdfUnion(std::vector<std::shared_ptr<const SdfSource>> members)
    : members_(std::move(members)) {
  if (members_.empty()) {
    throw ValidationError("union needs at least one member");
  }
}

double SdfUnion::sdf(const Vec3& p) const {
  double best = members_.front()->sdf(p);
  for (std::size_t i = 1; i < members_.size(); ++i) {
    best = std::min(best, members_[i]->sdf(p));
  }
  return best;
}

FieldSample SdfUnion::evaluate(const Vec3& p) const {
  std::size_t best = 0;
  double best_sdf = members_.front()->sdf(p);
  for (std::size_t i = 1; i < members_.size(); ++i) {
    const double d = members_[i]->sdf(p);
    if (d < best_sdf) {
      best_sdf = d;
      best = i;
    }
  }
  return members_[best]->evaluate(p);
}

RotatedSdf::RotatedSdf(const SdfSource& inner, const Rotation& rotation)
    : inner_(inner), rotation_(rotation) {}

double RotatedSdf::sdf(const Vec3& p) const { return inner_.sdf(rotation_.transposed() * p); }

FieldSample RotatedSdf::evaluate(const Vec3& p) const {
  FieldSample s = inner_.evaluate(rotation_.transposed() * p);
  s.gradient = rotation_ * s.gradient;
  if (!s.degenerate) {
    s.normal = rotation_ * s.normal;
  }
  return s;
}

void SdfFieldSpec::validate() const {
  if (frequencies < 0 || hidden_layers < 1 || width < 1) {
    throw ValidationError("invalid SDF network shape");
  }
  if (latent_layer < 1 || latent_layer >= hidden_layers) {
    throw ValidationError("latent layer index must be below the hidden layer count");
  }
  if (latent_dim != kLatentDim) {
    throw ValidationError("latent dimension must be 32");
  }
  if (!(init_radius > 0.0) || !(softplus_beta > 0.0)) {
    throw ValidationError("init radius and softplus beta must be positive");
  }
}

SdfNetwork::SdfNetwork(const SdfFieldSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  std::size_t offset = 0;
  int in = encoding_dim(spec_.frequencies);
  for (int l = 1; l <= spec_.hidden_layers; ++l) {
    const int out = spec_.width + (l == spec_.latent_layer ? spec_.latent_dim : 0);
    layers_.push_back(LayerLayout{in, out, offset});
    offset += layers_.back().size();
    in = spec_.width;
  }
  layers_.push_back(LayerLayout{in, 1, offset});
  offset += layers_.back().size();
  params_.setZero(static_cast<Eigen::Index>(offset));
  geometric_init(seed);
}

Eigen::Map<const Matrix> SdfNetwork::weight(std::size_t i) const {
  const LayerLayout& l = layers_[i];
  return Eigen::Map<const Matrix>(params_.data() + l.offset, l.out, l.in);
}

Eigen::Map<const Vector> SdfNetwork::bias(std::size_t i) const {
  const LayerLayout& l = layers_[i];
  return Eigen::Map<const Vector>(params_.data() + l.offset + static_cast<std::size_t>(l.out) * l.in,
                                  l.out);
}

void SdfNetwork::geometric_init(std::uint64_t seed) {
  // Start as |x| - r: the first layer holds evenly spread unit directions w_j (a Fibonacci set
  // under a random rotation), hidden layers pass activations through unchanged, and the output
  // averages them, since sum_j max(0, w_j . x) is close to (width / 4) |x|.
  std::mt19937_64 rng(mix_seed(seed, 0x5DF));
  params_.setZero();
  const int width = spec_.width;
  std::normal_distribution<double> normal(0.0, 1.0);
  const Vec3 axis = Vec3(normal(rng), normal(rng), normal(rng)).normalized();
  std::uniform_real_distribution<double> angle(0.0, 360.0);
  const Mat3 spin = rotation_about_axis(axis, angle(rng)).matrix();
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  auto first = weight_view(params_, layers_[0]);
  for (int j = 0; j < width; ++j) {
    const double z = 1.0 - (2.0 * j + 1.0) / width;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const Vec3 dir = spin * Vec3(r * std::cos(golden * j), r * std::sin(golden * j), z);
    first.block(j, 0, 1, 3) = dir.transpose();
  }
  const std::size_t hidden = layers_.size() - 1;
  for (std::size_t i = 1; i < hidden; ++i) {
    weight_view(params_, layers_[i]).topRows(width).setIdentity();
  }
  const LayerLayout& latent = layers_[static_cast<std::size_t>(spec_.latent_layer - 1)];
  std::normal_distribution<double> latent_dist(0.0, std::sqrt(2.0 / latent.in));
  auto lw = weight_view(params_, latent).bottomRows(spec_.latent_dim);
  for (Eigen::Index c = 0; c < lw.cols(); ++c) {
    for (Eigen::Index r = 0; r < lw.rows(); ++r) {
      lw(r, c) = latent_dist(rng);
    }
  }
  const LayerLayout& out = layers_.back();
  weight_view(params_, out).setConstant(4.0 / width);
  bias_view(params_, out)[0] = -spec_.init_radius;
  // The softplus offset ln(2) / beta builds up through the layers; shift it off the init sphere.
  Matrix shell(3, width);
  for (int j = 0; j < width; ++j) {
    shell.col(j) = spec_.init_radius * first.block(j, 0, 1, 3).transpose();
  }
  bias_view(params_, out)[0] -= sdf_batch(shell).mean();
}

void SdfNetwork::forward(const Matrix& points, Cache& cache, bool with_tangents) const {
  const std::size_t hidden = layers_.size() - 1;
  const double beta = spec_.softplus_beta;
  const int width = spec_.width;
  const auto latent_index = static_cast<std::size_t>(spec_.latent_layer - 1);
  cache.points = points;
  cache.with_tangents = with_tangents;
  cache.inputs.resize(layers_.size());
  cache.pre.resize(hidden);
  cache.tangents.resize(with_tangents ? layers_.size() : 0);
  cache.tangent_pre.resize(with_tangents ? hidden : 0);
  positional_encoding(points, spec_.frequencies, cache.inputs[0]);
  if (with_tangents) {
    for (int d = 0; d < 3; ++d) {
      positional_encoding_tangent(points, spec_.frequencies, d, cache.tangents[0][d]);
    }
  }
  for (std::size_t i = 0; i < hidden; ++i) {
    Matrix z = weight(i) * cache.inputs[i];
    z.colwise() += bias(i);
    if (i == latent_index) {
      cache.latent = z.bottomRows(spec_.latent_dim);
      Matrix head = z.topRows(width);
      z = std::move(head);
    }
    const Matrix slope = z.unaryExpr([beta](double v) { return sigmoid(beta * v); });
    cache.inputs[i + 1] = z.unaryExpr([beta](double v) { return softplus(v, beta); });
    if (with_tangents) {
      const auto w = weight(i).topRows(width);
      for (int d = 0; d < 3; ++d) {
        Matrix u = w * cache.tangents[i][d];
        cache.tangents[i + 1][d] = slope.cwiseProduct(u);
        cache.tangent_pre[i][d] = std::move(u);
      }
    }
    cache.pre[i] = std::move(z);
  }
  const auto w_out = weight(hidden);
  cache.sdf = (w_out * cache.inputs[hidden]).transpose();
  cache.sdf.array() += bias(hidden)[0];
  if (with_tangents) {
    cache.gradient.resize(3, points.cols());
    for (int d = 0; d < 3; ++d) {
      cache.gradient.row(d) = w_out * cache.tangents[hidden][d];
    }
  } else {
    cache.gradient.resize(0, 0);
  }
}

void SdfNetwork::backward(const Cache& cache, const Vector& grad_sdf, const Matrix& grad_gradient,
                          const Matrix& grad_latent, Vector& grad) const {
  if (grad.size() != params_.size()) {
    grad.setZero(params_.size());
  }
  const std::size_t hidden = layers_.size() - 1;
  const Eigen::Index n = cache.points.cols();
  const double beta = spec_.softplus_beta;
  const int width = spec_.width;
  const auto latent_index = static_cast<std::size_t>(spec_.latent_layer - 1);
  const bool use_sdf = grad_sdf.size() == n;
  const bool use_grad = grad_gradient.cols() == n;
  const bool use_latent = grad_latent.cols() == n;
  if (use_grad && !cache.with_tangents) {
    throw ValidationError("gradient loss needs a forward pass with tangents");
  }

  // Adjoints of the current layer's input and of its tangents.
  Matrix g_in;
  std::array<Matrix, 3> g_tan;
  {
    const LayerLayout& l = layers_[hidden];
    auto gw = weight_view(grad, l);
    auto gb = bias_view(grad, l);
    const auto w = weight(hidden);
    Eigen::RowVectorXd gs = use_sdf ? Eigen::RowVectorXd(grad_sdf.transpose())
                                    : Eigen::RowVectorXd::Zero(n);
    gw.noalias() += gs * cache.inputs[hidden].transpose();
    gb[0] += gs.sum();
    g_in = w.transpose() * gs;
    for (int d = 0; d < 3; ++d) {
      if (use_grad) {
        const Eigen::RowVectorXd gt = grad_gradient.row(d);
        gw.noalias() += gt * cache.tangents[hidden][d].transpose();
        g_tan[d] = w.transpose() * gt;
      }
    }
  }
  for (std::size_t k = hidden; k-- > 0;) {
    const LayerLayout& l = layers_[k];
    const Matrix& z = cache.pre[k];
    const Matrix slope = z.unaryExpr([beta](double v) { return sigmoid(beta * v); });
    Matrix gz = g_in.cwiseProduct(slope);
    std::array<Matrix, 3> gu;
    if (use_grad) {
      const Matrix curvature = slope.unaryExpr([beta](double s) { return beta * s * (1.0 - s); });
      for (int d = 0; d < 3; ++d) {
        gu[d] = g_tan[d].cwiseProduct(slope);
        gz += g_tan[d].cwiseProduct(cache.tangent_pre[k][d]).cwiseProduct(curvature);
      }
    }
    auto gw = weight_view(grad, l);
    auto gb = bias_view(grad, l);
    const auto w = weight(k);
    gw.topRows(width).noalias() += gz * cache.inputs[k].transpose();
    gb.head(width) += gz.rowwise().sum();
    if (use_grad) {
      for (int d = 0; d < 3; ++d) {
        gw.topRows(width).noalias() += gu[d] * cache.tangents[k][d].transpose();
      }
    }
    const bool has_latent = k == latent_index && use_latent;
    if (has_latent) {
      gw.bottomRows(spec_.latent_dim).noalias() += grad_latent * cache.inputs[k].transpose();
      gb.tail(spec_.latent_dim) += grad_latent.rowwise().sum();
    }
    if (k == 0) {
      break;
    }
    g_in = w.topRows(width).transpose() * gz;
    if (has_latent) {
      g_in.noalias() += w.bottomRows(spec_.latent_dim).transpose() * grad_latent;
    }
    if (use_grad) {
      for (int d = 0; d < 3; ++d) {
        g_tan[d] = w.topRows(width).transpose() * gu[d];
      }
    }
  }
}

double SdfNetwork::sdf(const Vec3& p) const {
  Matrix pts = p;
  return sdf_batch(pts)[0];
}

FieldSample SdfNetwork::evaluate(const Vec3& p) const {
  Matrix pts = p;
  return evaluate_batch(pts).front();
}

Vector SdfNetwork::sdf_batch(const Matrix& points) const {
  Cache cache;
  forward(points, cache, false);
  return cache.sdf;
}

std::vector<FieldSample> SdfNetwork::evaluate_batch(const Matrix& points) const {
  Cache cache;
  forward(points, cache, true);
  std::vector<FieldSample> out(static_cast<std::size_t>(points.cols()));
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    FieldSample& s = out[static_cast<std::size_t>(i)];
    s.sdf = cache.sdf[i];
    s.gradient = cache.gradient.col(i);
    s.normal = safe_normal(s.gradient, &s.degenerate);
    s.latent = cache.latent.col(i);
  }
  return out;
}

ProjectionResult surface_project(const SdfSource& field, const Vec3& p, int max_iters) {
  ProjectionResult r;
  r.point = p;
  for (int it = 0; it < max_iters; ++it) {
    const FieldSample s = field.evaluate(r.point);
    if (std::abs(s.sdf) < 1e-5) {
      r.converged = true;
      r.iterations = it;
      return r;
    }
    r.point -= s.sdf * s.normal;
    r.iterations = it + 1;
  }
  r.converged = std::abs(field.sdf(r.point)) < 1e-5;
  return r;
}

}  // namespace rmvps
