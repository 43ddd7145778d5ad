#include "plot.hpp"

#include <algorithm>
#include <cmath>

#include "rmvps/image_io.hpp"

namespace rmvps::cli {

namespace {

// Colors are given in display (sRGB) space; write_png re-encodes linear values.
Vec3 display(double r, double g, double b) {
  return Vec3(srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
}

void put(Image& img, int x, int y, const Vec3& c) {
  if (x >= 0 && y >= 0 && x < img.width && y < img.height) {
    img.set_rgb(x, y, c);
  }
}

void line(Image& img, int x0, int y0, int x1, int y1, const Vec3& c) {
  const int dx = std::abs(x1 - x0);
  const int dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1;
  const int sy = y0 < y1 ? 1 : -1;
  int e = dx + dy;
  while (true) {
    put(img, x0, y0, c);
    if (x0 == x1 && y0 == y1) {
      break;
    }
    const int e2 = 2 * e;
    if (e2 >= dy) {
      e += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      e += dx;
      y0 += sy;
    }
  }
}

}  // namespace

Image plot_curve(const std::vector<double>& x, const std::vector<double>& y, bool log_scale,
                 int width, int height) {
  Image img(width, height, 3);
  const Vec3 white = display(1.0, 1.0, 1.0);
  for (int py = 0; py < height; ++py) {
    for (int px = 0; px < width; ++px) {
      img.set_rgb(px, py, white);
    }
  }
  const int left = 48;
  const int right = width - 16;
  const int top = 16;
  const int bottom = height - 40;
  const Vec3 axis = display(0.0, 0.0, 0.0);
  const Vec3 grid = display(0.88, 0.88, 0.88);
  for (int k = 1; k < 5; ++k) {
    const int gy = top + (bottom - top) * k / 5;
    line(img, left, gy, right, gy, grid);
  }
  line(img, left, bottom, right, bottom, axis);
  line(img, left, top, left, bottom, axis);

  std::vector<double> v;
  std::vector<double> u;
  const bool use_log =
      log_scale && std::all_of(y.begin(), y.end(), [](double a) { return a > 0.0; });
  for (std::size_t i = 0; i < std::min(x.size(), y.size()); ++i) {
    const double yi = use_log ? std::log10(y[i]) : y[i];
    if (std::isfinite(yi) && std::isfinite(x[i])) {
      u.push_back(x[i]);
      v.push_back(yi);
    }
  }
  if (v.empty()) {
    return img;
  }
  const auto [vmin_it, vmax_it] = std::minmax_element(v.begin(), v.end());
  double vmin = *vmin_it;
  double vmax = *vmax_it;
  if (vmax - vmin < 1e-12) {
    vmin -= 0.5;
    vmax += 0.5;
  }
  const double umin = *std::min_element(u.begin(), u.end());
  double umax = *std::max_element(u.begin(), u.end());
  if (umax - umin < 1e-12) {
    umax = umin + 1.0;
  }
  const Vec3 ink = display(0.12, 0.32, 0.72);
  int px_prev = 0;
  int py_prev = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const int px = left + static_cast<int>(std::lround((u[i] - umin) / (umax - umin) * (right - left)));
    const int py = bottom - static_cast<int>(std::lround((v[i] - vmin) / (vmax - vmin) * (bottom - top)));
    if (i > 0) {
      line(img, px_prev, py_prev, px, py, ink);
    } else {
      put(img, px, py, ink);
    }
    px_prev = px;
    py_prev = py;
  }
  return img;
}

Image error_map(const Image& image, const Image& reference, double scale) {
  Image out(image.width, image.height, 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      double e = 0.0;
      for (int c = 0; c < image.channels; ++c) {
        e += std::abs(image.at(x, y, c) - reference.at(x, y, c));
      }
      const double t = std::clamp(e / (image.channels * scale), 0.0, 1.0);
      const double r = std::clamp(3.0 * t, 0.0, 1.0);
      const double g = std::clamp(3.0 * t - 1.0, 0.0, 1.0);
      const double b = std::clamp(3.0 * t - 2.0, 0.0, 1.0);
      out.set_rgb(x, y, display(r, g, b));
    }
  }
  return out;
}

}  // namespace rmvps::cli
