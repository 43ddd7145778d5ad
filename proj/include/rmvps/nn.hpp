#pragma once

// Small dense networks over column batches (one sample per column). Parameters live in one flat
// vector so the optimizer and checkpoints can treat every network the same way.

#include <random>
#include <vector>

#include "rmvps/common.hpp"

namespace rmvps {

/// Rows produced by positional_encoding for a 3-vector: x, then sin/cos(2^k x) for k < freqs.
constexpr int encoding_dim(int freqs) { return 3 + 6 * freqs; }

/// points: 3xN. out: encoding_dim(freqs) x N.
void positional_encoding(const Matrix& points, int freqs, Matrix& out);
/// Derivative of the encoding along spatial axis `axis` for every column.
void positional_encoding_tangent(const Matrix& points, int freqs, int axis, Matrix& out);

double softplus(double x, double beta);

enum class Activation { relu, softplus };

struct LayerLayout {
  int in = 0;
  int out = 0;
  std::size_t offset = 0;  // weights (out x in, column-major) followed by bias (out)
  std::size_t size() const { return static_cast<std::size_t>(out) * (in + 1); }
};

/// Fully connected network: hidden layers use `activation`, the last layer is linear.
class Mlp {
 public:
  struct Cache {
    std::vector<Matrix> inputs;  // input of each layer
    std::vector<Matrix> pre;     // pre-activation of each hidden layer
    Matrix output;
  };

  Mlp() = default;
  Mlp(const std::vector<int>& sizes, Activation activation, double beta = 1.0);

  /// He-normal hidden weights, zero biases; the last layer is zeroed when zero_last is set.
  void init(std::mt19937_64& rng, bool zero_last);

  int input_dim() const { return layers_.front().in; }
  int output_dim() const { return layers_.back().out; }
  std::size_t layer_count() const { return layers_.size(); }
  const LayerLayout& layer(std::size_t i) const { return layers_[i]; }

  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  Eigen::Map<Matrix> weight(std::size_t i);
  Eigen::Map<const Matrix> weight(std::size_t i) const;
  Eigen::Map<Vector> bias(std::size_t i);
  Eigen::Map<const Vector> bias(std::size_t i) const;

  void forward(const Matrix& x, Cache& cache) const;
  Matrix forward(const Matrix& x) const;
  /// Accumulates into grad (same layout as params). grad_in, when given, receives dL/dx.
  void backward(const Cache& cache, const Matrix& grad_out, Vector& grad, Matrix* grad_in) const;

 private:
  std::vector<LayerLayout> layers_;
  Vector params_;
  Activation activation_ = Activation::relu;
  double beta_ = 1.0;
};

/// Views into a flat gradient vector with a layer's layout.
Eigen::Map<Matrix> weight_view(Vector& flat, const LayerLayout& l);
Eigen::Map<Vector> bias_view(Vector& flat, const LayerLayout& l);

}  // namespace rmvps
