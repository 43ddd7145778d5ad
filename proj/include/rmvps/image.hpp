#pragma once

#include <vector>

#include "rmvps/common.hpp"

namespace rmvps {

/// Row-major, channel-last float64 image.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
  double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }
  Vec3 rgb(int x, int y) const {
    const std::size_t i = index(x, y);
    return Vec3(data[i], data[i + 1], data[i + 2]);
  }
  void set_rgb(int x, int y, const Vec3& v) {
    const std::size_t i = index(x, y);
    data[i] = v.x();
    data[i + 1] = v.y();
    data[i + 2] = v.z();
  }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

}  // namespace rmvps
