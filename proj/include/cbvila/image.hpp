#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "cbvila/common.hpp"

namespace cbvila {

/// Interleaved HxWxC image with values in [0,1]. Channel layout matches the
/// patch vector layout: index = (y*W + x)*C + c.
template <typename S>
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<S> data;

  static Image zeros(int h, int w, int c = 3) {
    Image img;
    img.height = h;
    img.width = w;
    img.channels = c;
    img.data.assign(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) *
                        static_cast<std::size_t>(c),
                    S(0));
    return img;
  }

  S& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                 static_cast<std::size_t>(x)) *
                    static_cast<std::size_t>(channels) +
                static_cast<std::size_t>(c)];
  }
  S at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                 static_cast<std::size_t>(x)) *
                    static_cast<std::size_t>(channels) +
                static_cast<std::size_t>(c)];
  }

  /// Snap all values onto the 8-bit grid k/255, the representation PPM files
  /// round-trip exactly.
  void quantize_to_8bit() {
    for (S& v : data) {
      int q = static_cast<int>(std::lround(static_cast<double>(v) * 255.0));
      q = std::clamp(q, 0, 255);
      v = static_cast<S>(q) / S(255);
    }
  }
};

inline std::uint8_t to_byte(double v) {
  int q = static_cast<int>(std::lround(v * 255.0));
  return static_cast<std::uint8_t>(std::clamp(q, 0, 255));
}

/// Binary PPM (P6, maxval 255). Lossless for images on the 8-bit grid.
template <typename S>
void write_ppm(const std::string& path, const Image<S>& img) {
  require_contract(img.channels == 3, "write_ppm: needs 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("write_ppm: cannot open " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] =
            to_byte(static_cast<double>(img.at(y, x, c)));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw InputError("write_ppm: short write to " + path);
}

template <typename S>
Image<S> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("read_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw InputError("read_ppm: not a P6 file: " + path);
  auto skip_ws_comments = [&f]() {
    while (true) {
      int ch = f.peek();
      if (ch == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(ch)) {
        f.get();
      } else {
        break;
      }
    }
  };
  int w = 0, h = 0, maxval = 0;
  skip_ws_comments();
  f >> w;
  skip_ws_comments();
  f >> h;
  skip_ws_comments();
  f >> maxval;
  if (w <= 0 || h <= 0 || maxval != 255) throw InputError("read_ppm: bad header in " + path);
  f.get();  // single whitespace after maxval
  Image<S> img = Image<S>::zeros(h, w, 3);
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw InputError("read_ppm: truncated pixel data in " + path);
  for (std::size_t i = 0; i < raw.size(); ++i)
    img.data[i] = static_cast<S>(raw[i]) / S(255);
  return img;
}

/// Bilinear upsample of a gh x gw scalar grid to h x w (pixel centers).
template <typename S>
std::vector<S> bilinear_upsample(const std::vector<S>& grid, int gh, int gw, int h, int w) {
  require_contract(static_cast<int>(grid.size()) == gh * gw, "bilinear_upsample: grid size");
  std::vector<S> out(static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double sy = (static_cast<double>(y) + 0.5) * gh / h - 0.5;
      const double sx = (static_cast<double>(x) + 0.5) * gw / w - 0.5;
      const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, gh - 1);
      const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, gw - 1);
      const int y1 = std::min(y0 + 1, gh - 1);
      const int x1 = std::min(x0 + 1, gw - 1);
      const double fy = std::clamp(sy - y0, 0.0, 1.0);
      const double fx = std::clamp(sx - x0, 0.0, 1.0);
      const double v00 = static_cast<double>(grid[static_cast<std::size_t>(y0 * gw + x0)]);
      const double v01 = static_cast<double>(grid[static_cast<std::size_t>(y0 * gw + x1)]);
      const double v10 = static_cast<double>(grid[static_cast<std::size_t>(y1 * gw + x0)]);
      const double v11 = static_cast<double>(grid[static_cast<std::size_t>(y1 * gw + x1)]);
      out[static_cast<std::size_t>(y * w + x)] = static_cast<S>(
          (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy);
    }
  }
  return out;
}

/// Nearest-neighbor variant for patch-faithful display.
template <typename S>
std::vector<S> nearest_upsample(const std::vector<S>& grid, int gh, int gw, int h, int w) {
  require_contract(static_cast<int>(grid.size()) == gh * gw, "nearest_upsample: grid size");
  std::vector<S> out(static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int gy = std::min(y * gh / h, gh - 1);
      const int gx = std::min(x * gw / w, gw - 1);
      out[static_cast<std::size_t>(y * w + x)] = grid[static_cast<std::size_t>(gy * gw + gx)];
    }
  return out;
}

}  // namespace cbvila
