#pragma once

#include <vector>

#include "rmvps/image.hpp"

namespace rmvps::cli {

/// Line chart of y against x on a white canvas with axes; log10 scale when asked and every y
/// is positive. Linear pixel values ready for write_png.
Image plot_curve(const std::vector<double>& x, const std::vector<double>& y, bool log_scale,
                 int width = 640, int height = 400);

/// Mean absolute channel error per pixel through a black-red-yellow-white ramp saturating at
/// `scale`.
Image error_map(const Image& image, const Image& reference, double scale);

}  // namespace rmvps::cli
