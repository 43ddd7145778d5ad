#include "rmvps/nn.hpp"

namespace rmvps {

void positional_encoding(const Matrix& points, int freqs, Matrix& out) {
  const Eigen::Index n = points.cols();
  out.resize(encoding_dim(freqs), n);
  out.topRows(3) = points;
  double scale = 1.0;
  for (int k = 0; k < freqs; ++k) {
    const auto arg = (points.array() * scale).eval();
    out.middleRows(3 + 6 * k, 3) = arg.sin().matrix();
    out.middleRows(6 + 6 * k, 3) = arg.cos().matrix();
    scale *= 2.0;
  }
}

void positional_encoding_tangent(const Matrix& points, int freqs, int axis, Matrix& out) {
  const Eigen::Index n = points.cols();
  out.setZero(encoding_dim(freqs), n);
  out.row(axis).setOnes();
  double scale = 1.0;
  for (int k = 0; k < freqs; ++k) {
    const auto arg = (points.row(axis).array() * scale).eval();
    out.row(3 + 6 * k + axis) = (scale * arg.cos()).matrix();
    out.row(6 + 6 * k + axis) = (-scale * arg.sin()).matrix();
    scale *= 2.0;
  }
}

double softplus(double x, double beta) {
  const double bx = beta * x;
  if (bx > 30.0) {
    return x;
  }
  return std::log1p(std::exp(bx)) / beta;
}

Eigen::Map<Matrix> weight_view(Vector& flat, const LayerLayout& l) {
  return Eigen::Map<Matrix>(flat.data() + l.offset, l.out, l.in);
}

Eigen::Map<Vector> bias_view(Vector& flat, const LayerLayout& l) {
  return Eigen::Map<Vector>(flat.data() + l.offset + static_cast<std::size_t>(l.out) * l.in,
                            l.out);
}

Mlp::Mlp(const std::vector<int>& sizes, Activation activation, double beta)
    : activation_(activation), beta_(beta) {
  if (sizes.size() < 2) {
    throw ValidationError("network needs at least an input and an output size");
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    if (sizes[i] <= 0 || sizes[i + 1] <= 0) {
      throw ValidationError("network layer sizes must be positive");
    }
    LayerLayout l{sizes[i], sizes[i + 1], offset};
    offset += l.size();
    layers_.push_back(l);
  }
  params_.setZero(static_cast<Eigen::Index>(offset));
}

void Mlp::init(std::mt19937_64& rng, bool zero_last) {
  params_.setZero();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (zero_last && i + 1 == layers_.size()) {
      continue;
    }
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / layers_[i].in));
    auto w = weight(i);
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        w(r, c) = dist(rng);
      }
    }
  }
}

Eigen::Map<Matrix> Mlp::weight(std::size_t i) { return weight_view(params_, layers_[i]); }

Eigen::Map<const Matrix> Mlp::weight(std::size_t i) const {
  const LayerLayout& l = layers_[i];
  return Eigen::Map<const Matrix>(params_.data() + l.offset, l.out, l.in);
}

Eigen::Map<Vector> Mlp::bias(std::size_t i) { return bias_view(params_, layers_[i]); }

Eigen::Map<const Vector> Mlp::bias(std::size_t i) const {
  const LayerLayout& l = layers_[i];
  return Eigen::Map<const Vector>(params_.data() + l.offset + static_cast<std::size_t>(l.out) * l.in,
                                  l.out);
}

void Mlp::forward(const Matrix& x, Cache& cache) const {
  if (x.rows() != input_dim()) {
    throw ValidationError("network input has the wrong dimension");
  }
  const std::size_t count = layers_.size();
  cache.inputs.resize(count);
  cache.pre.resize(count - 1);
  cache.inputs[0] = x;
  for (std::size_t i = 0; i < count; ++i) {
    Matrix z = weight(i) * cache.inputs[i];
    z.colwise() += bias(i);
    if (i + 1 == count) {
      cache.output = std::move(z);
      break;
    }
    Matrix h(z.rows(), z.cols());
    if (activation_ == Activation::relu) {
      h = z.cwiseMax(0.0);
    } else {
      h = z.unaryExpr([b = beta_](double v) { return softplus(v, b); });
    }
    cache.pre[i] = std::move(z);
    cache.inputs[i + 1] = std::move(h);
  }
}

Matrix Mlp::forward(const Matrix& x) const {
  Cache cache;
  forward(x, cache);
  return cache.output;
}

void Mlp::backward(const Cache& cache, const Matrix& grad_out, Vector& grad,
                   Matrix* grad_in) const {
  if (grad.size() != params_.size()) {
    grad.setZero(params_.size());
  }
  Matrix g = grad_out;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const LayerLayout& l = layers_[k];
    if (k + 1 < layers_.size()) {
      const Matrix& z = cache.pre[k];
      if (activation_ == Activation::relu) {
        g = g.cwiseProduct((z.array() > 0.0).cast<double>().matrix());
      } else {
        g = g.cwiseProduct(z.unaryExpr([b = beta_](double v) { return sigmoid(b * v); }));
      }
    }
    weight_view(grad, l).noalias() += g * cache.inputs[k].transpose();
    bias_view(grad, l) += g.rowwise().sum();
    if (k > 0 || grad_in != nullptr) {
      Matrix next = weight(k).transpose() * g;
      if (k == 0) {
        *grad_in = std::move(next);
      } else {
        g = std::move(next);
      }
    }
  }
}

}  // namespace rmvps
