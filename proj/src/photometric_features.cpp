#include "rmvps/photometric_features.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace rmvps {

TopkSelection topk_variance_select(const Image& features, int k) {
  const int c = features.channels;
  if (k <= 0 || k > c) {
    throw ValidationError("top-k selection needs 0 < k <= channels (k = " + std::to_string(k) +
                          ", channels = " + std::to_string(c) + ")");
  }
  const std::size_t pixels = static_cast<std::size_t>(features.width) * features.height;
  if (pixels == 0) {
    throw ValidationError("top-k selection needs a non-empty feature map");
  }
  std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
  std::vector<double> var(static_cast<std::size_t>(c), 0.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int j = 0; j < c; ++j) {
      mean[static_cast<std::size_t>(j)] += features.data[p * c + j];
    }
  }
  for (double& m : mean) {
    m /= static_cast<double>(pixels);
  }
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int j = 0; j < c; ++j) {
      const double d = features.data[p * c + j] - mean[static_cast<std::size_t>(j)];
      var[static_cast<std::size_t>(j)] += d * d;
    }
  }
  for (double& v : var) {
    v /= static_cast<double>(pixels);
  }

  std::vector<int> order(static_cast<std::size_t>(c));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return var[static_cast<std::size_t>(a)] > var[static_cast<std::size_t>(b)];
  });

  TopkSelection out;
  out.channels.assign(order.begin(), order.begin() + k);
  for (int j : out.channels) {
    out.variances.push_back(var[static_cast<std::size_t>(j)]);
  }
  out.features = Image(features.width, features.height, k);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int j = 0; j < k; ++j) {
      out.features.data[p * k + j] = features.data[p * c + out.channels[static_cast<std::size_t>(j)]];
    }
  }
  return out;
}

LiftMap::LiftMap() : mlp_({kInputDim, 64, 64, kLatentDim}, Activation::relu) {
  std::mt19937_64 rng(0x11F7);
  mlp_.init(rng, true);
}

void LiftMap::randomize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  mlp_.init(rng, false);
}

Matrix LiftMap::forward(const Matrix& features, const Matrix& views, Mlp::Cache* cache) const {
  if (features.rows() != kLatentDim || views.rows() != 3 || features.cols() != views.cols()) {
    throw ValidationError("lift map expects 32 x N features and 3 x N view directions");
  }
  Matrix x(kInputDim, features.cols());
  x.topRows(kLatentDim) = features;
  x.bottomRows(3) = views;
  if (cache != nullptr) {
    mlp_.forward(x, *cache);
    return features + cache->output;
  }
  return features + mlp_.forward(x);
}

void LiftMap::backward(const Mlp::Cache& cache, const Matrix& grad_out, Vector& grad) const {
  mlp_.backward(cache, grad_out, grad, nullptr);
}

GeometryFeatureMap to_world_features(const Image& selected, const Vec3& view_dir,
                                     const LiftMap& lift, int view) {
  if (selected.channels != kLatentDim) {
    throw ValidationError("world features need a 32-channel selection");
  }
  if (std::abs(view_dir.norm() - 1.0) > 1e-6) {
    throw ValidationError("view direction must be a unit vector");
  }
  const Eigen::Index pixels = static_cast<Eigen::Index>(selected.width) * selected.height;
  const Eigen::Map<const Matrix> f(selected.data.data(), kLatentDim, pixels);
  const Matrix views = view_dir.replicate(1, pixels);

  GeometryFeatureMap out;
  out.view = view;
  out.view_dir = view_dir;
  out.features = Image(selected.width, selected.height, kLatentDim);
  Eigen::Map<Matrix>(out.features.data.data(), kLatentDim, pixels) = lift.forward(f, views);
  return out;
}

namespace {

constexpr int kOracleFreqs = 2;

}  // namespace

RawFeatureMap oracle_features(const Image& normals, const Image& mask, int view,
                              std::uint64_t seed) {
  if (normals.channels != 3 || mask.channels != 1 || normals.width != mask.width ||
      normals.height != mask.height) {
    throw ValidationError("oracle features need a 3-channel normal map and a matching mask");
  }
  const int dim = encoding_dim(kOracleFreqs);
  std::mt19937_64 rng(mix_seed(seed, 0x0FEA));
  std::normal_distribution<double> gauss(0.0, 1.5 / std::sqrt(static_cast<double>(dim)));
  Matrix a(kRawFeatureChannels, dim);
  Vector b(kRawFeatureChannels);
  Vector scale(kRawFeatureChannels);
  for (int c = 0; c < kRawFeatureChannels; ++c) {
    for (int j = 0; j < dim; ++j) {
      a(c, j) = gauss(rng);
    }
    b[c] = to_unit_double(rng()) - 0.5;
    scale[c] = std::pow(0.99, c);
  }

  const Eigen::Index pixels = static_cast<Eigen::Index>(normals.width) * normals.height;
  const Eigen::Map<const Matrix> n(normals.data.data(), 3, pixels);
  Matrix phi;
  positional_encoding(n, kOracleFreqs, phi);
  Matrix feat = a * phi;
  feat.colwise() += b;
  feat = feat.array().tanh().colwise() * scale.array();
  for (Eigen::Index p = 0; p < pixels; ++p) {
    if (!(mask.data[static_cast<std::size_t>(p)] > 0.5)) {
      feat.col(p).setZero();
    }
  }

  RawFeatureMap out;
  out.view = view;
  out.features = Image(normals.width, normals.height, kRawFeatureChannels);
  Eigen::Map<Matrix>(out.features.data.data(), kRawFeatureChannels, pixels) = feat;
  return out;
}

namespace {

constexpr std::array<char, 4> kFeatureMagic = {'R', 'M', 'V', 'F'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                                 static_cast<char>((v >> 16) & 0xFF),
                                 static_cast<char>((v >> 24) & 0xFF)};
  os.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_feature_file(const std::filesystem::path& path, const Image& features) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw RuntimeError("cannot write feature file " + path.string());
  }
  os.write(kFeatureMagic.data(), 4);
  put_u32(os, static_cast<std::uint32_t>(features.height));
  put_u32(os, static_cast<std::uint32_t>(features.width));
  put_u32(os, static_cast<std::uint32_t>(features.channels));
  for (double v : features.data) {
    put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!os) {
    throw RuntimeError("failed writing feature file " + path.string());
  }
}

Image read_feature_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw RuntimeError("cannot open feature file " + path.string());
  }
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kFeatureMagic) {
    throw ValidationError("not a feature file (bad magic): " + path.string());
  }
  const std::uint32_t h = get_u32(is);
  const std::uint32_t w = get_u32(is);
  const std::uint32_t c = get_u32(is);
  if (!is || h == 0 || w == 0 || c == 0 || h > 65536 || w > 65536 || c > 65536) {
    throw ValidationError("bad feature file header: " + path.string());
  }
  Image img(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  for (double& v : img.data) {
    v = std::bit_cast<float>(get_u32(is));
  }
  if (!is) {
    throw ValidationError("truncated feature file: " + path.string());
  }
  for (double v : img.data) {
    if (!std::isfinite(v)) {
      throw ValidationError("non-finite value in feature file " + path.string());
    }
  }
  return img;
}

std::string feature_file_name(int view) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "view_%04d.rmvf", view);
  return buf;
}

std::vector<RawFeatureMap> load_feature_maps(const std::filesystem::path& directory, int views,
                                             int height, int width) {
  std::vector<RawFeatureMap> out;
  out.reserve(static_cast<std::size_t>(views));
  for (int v = 0; v < views; ++v) {
    const std::filesystem::path file = directory / feature_file_name(v);
    if (!std::filesystem::exists(file)) {
      throw ValidationError("missing feature file " + file.string());
    }
    RawFeatureMap map;
    map.view = v;
    map.features = read_feature_file(file);
    if (map.features.height != height || map.features.width != width) {
      throw ValidationError("feature file " + file.string() + " is " +
                            std::to_string(map.features.height) + "x" +
                            std::to_string(map.features.width) + ", images are " +
                            std::to_string(height) + "x" + std::to_string(width));
    }
    out.push_back(std::move(map));
  }
  return out;
}

}  // namespace rmvps
