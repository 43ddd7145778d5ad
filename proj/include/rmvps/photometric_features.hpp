#pragma once

#include <filesystem>
#include <vector>

#include "rmvps/image.hpp"
#include "rmvps/nn.hpp"
#include "rmvps/sdf_field.hpp"

namespace rmvps {

inline constexpr int kRawFeatureChannels = 384;

struct RawFeatureMap {
  int view = 0;
  Image features;  // H x W x C
};

struct GeometryFeatureMap {
  int view = 0;
  Image features;  // H x W x 32
  Vec3 view_dir = Vec3::UnitX();
};

struct TopkSelection {
  Image features;            // H x W x k, channels in descending variance
  std::vector<int> channels;  // source channel of each output channel
  std::vector<double> variances;
};

/// Keeps the k channels with the largest population variance over all pixels. Ties go to the
/// lower channel index.
TopkSelection topk_variance_select(const Image& features, int k = kLatentDim);

/// Per-pixel map from (feature, view direction) to a 32-vector: out = f + mlp([f; v]).
/// Freshly constructed maps have a zero last layer, so they start as the identity.
class LiftMap {
 public:
  static constexpr int kInputDim = kLatentDim + 3;

  LiftMap();

  /// Random last layer too; used to check the dependence on the view direction.
  void randomize(std::uint64_t seed);

  Vector& params() { return mlp_.params(); }
  const Vector& params() const { return mlp_.params(); }
  const Mlp& mlp() const { return mlp_; }

  /// features: 32 x N; views: 3 x N.
  Matrix forward(const Matrix& features, const Matrix& views, Mlp::Cache* cache = nullptr) const;
  /// Accumulates the parameter gradient. The inputs are data, so no input gradient is formed.
  void backward(const Mlp::Cache& cache, const Matrix& grad_out, Vector& grad) const;

 private:
  Mlp mlp_;
};

GeometryFeatureMap to_world_features(const Image& selected, const Vec3& view_dir,
                                     const LiftMap& lift, int view = 0);

/// Deterministic 384-channel embedding of a normal map: channel c is
/// s_c tanh(a_c . phi(n) + b_c), phi the positional encoding of n, with a fixed random
/// projection and decaying scales s_c. Pixels with a zero mask get zero features.
RawFeatureMap oracle_features(const Image& normals, const Image& mask, int view,
                              std::uint64_t seed = 0);

/// Binary feature file: "RMVF", uint32 height, width, channels (little endian), then float32
/// values in row-major, channel-last order.
void write_feature_file(const std::filesystem::path& path, const Image& features);
Image read_feature_file(const std::filesystem::path& path);

/// File name used for a view inside a feature directory.
std::string feature_file_name(int view);

/// Reads view_0000.rmvf ... for `views` views and checks each against height x width.
std::vector<RawFeatureMap> load_feature_maps(const std::filesystem::path& directory, int views,
                                             int height, int width);

}  // namespace rmvps
