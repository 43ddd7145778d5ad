#include "rmvps/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace rmvps {

double linear_to_srgb(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
}

double srgb_to_linear(double v) {
  return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ValidationError("PNG output supports 1 or 3 channels");
  }
  std::vector<unsigned char> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = image.channels == 3 ? linear_to_srgb(image.data[i])
                                         : std::clamp(image.data[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr) == 0) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw RuntimeError("cannot write PNG " + path.string() + ": " + msg);
  }
}

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&png, path.c_str()) == 0) {
    throw RuntimeError("cannot read PNG " + path.string() + ": " + png.message);
  }
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int channels = gray ? 1 : 3;
  std::vector<unsigned char> bytes(PNG_IMAGE_SIZE(png));
  if (png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr) == 0) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw RuntimeError("cannot decode PNG " + path.string() + ": " + msg);
  }
  Image out(static_cast<int>(png.width), static_cast<int>(png.height), channels);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = bytes[i] / 255.0;
    out.data[i] = gray ? v : srgb_to_linear(v);
  }
  return out;
}

void write_pfm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ValidationError("PFM output supports 1 or 3 channels");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw RuntimeError("cannot write PFM " + path.string());
  }
  os << (image.channels == 3 ? "PF" : "Pf") << "\n"
     << image.width << " " << image.height << "\n-1.0\n";
  const std::size_t row = static_cast<std::size_t>(image.width) * image.channels;
  std::vector<char> buf(row * 4);
  for (int y = image.height - 1; y >= 0; --y) {
    for (std::size_t i = 0; i < row; ++i) {
      const auto bits =
          std::bit_cast<std::uint32_t>(static_cast<float>(image.data[y * row + i]));
      for (int b = 0; b < 4; ++b) {
        buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
      }
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!os) {
    throw RuntimeError("failed writing PFM " + path.string());
  }
}

Image read_pfm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw RuntimeError("cannot open PFM " + path.string());
  }
  std::string magic;
  int w = 0;
  int h = 0;
  double scale = 0.0;
  is >> magic >> w >> h >> scale;
  is.get();  // single whitespace before the payload
  if (!is || (magic != "PF" && magic != "Pf") || w <= 0 || h <= 0) {
    throw ValidationError("bad PFM header in " + path.string());
  }
  if (scale >= 0.0) {
    throw ValidationError("big-endian PFM not supported: " + path.string());
  }
  Image out(w, h, magic == "PF" ? 3 : 1);
  const std::size_t row = static_cast<std::size_t>(w) * out.channels;
  std::vector<unsigned char> buf(row * 4);
  for (int y = h - 1; y >= 0; --y) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) {
      throw ValidationError("truncated PFM " + path.string());
    }
    for (std::size_t i = 0; i < row; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(buf[i * 4 + b]) << (8 * b);
      }
      out.data[y * row + i] = std::bit_cast<float>(bits);
    }
  }
  return out;
}

}  // namespace rmvps
