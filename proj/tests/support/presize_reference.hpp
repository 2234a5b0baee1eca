#pragma once

// Straight-line preprocessing written independently of the library: plain
// index arithmetic over raw byte vectors, one function, no shared helpers.
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cvf/image.hpp"

namespace cvf::testing {

// Pixel (y, x) stores y and x in its channels so any misplaced copy is
// visible: R = y mod 256, G = x mod 256, B = 16 * (y / 256) + x / 256.
inline RasterImage coordinate_image(std::size_t h, std::size_t w) {
  std::vector<std::uint8_t> px(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      px[(y * w + x) * 3 + 0] = static_cast<std::uint8_t>(y % 256);
      px[(y * w + x) * 3 + 1] = static_cast<std::uint8_t>(x % 256);
      px[(y * w + x) * 3 + 2] = static_cast<std::uint8_t>(16 * (y / 256) + x / 256);
    }
  return RasterImage(h, w, std::move(px));
}

inline RasterImage reference_presize(const RasterImage& img, std::size_t border, std::size_t resize_to,
                                     std::size_t crop_to) {
  const std::size_t h0 = img.height(), w0 = img.width();
  const std::size_t h = h0 - 2 * border, w = w0 - 2 * border;
  const std::size_t s = h > w ? h : w;
  // square[y][x] after stripping and mirroring.
  std::vector<std::uint8_t> sq(s * s * 3);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      std::size_t sy = y, sx = x;
      if (h < w) {
        std::size_t m = y % (2 * h);
        sy = m < h ? m : 2 * h - 1 - m;
      }
      if (w < h) {
        std::size_t m = x % (2 * w);
        sx = m < w ? m : 2 * w - 1 - m;
      }
      for (int c = 0; c < 3; ++c) sq[(y * s + x) * 3 + c] = img.at(sy + border, sx + border, c);
    }
  std::vector<std::uint8_t> rs(resize_to * resize_to * 3);
  const double scale = static_cast<double>(s) / static_cast<double>(resize_to);
  for (std::size_t y = 0; y < resize_to; ++y) {
    double fy = (y + 0.5) * scale - 0.5;
    if (fy < 0) fy = 0;
    if (fy > s - 1.0) fy = s - 1.0;
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = y0 + 1 < s ? y0 + 1 : s - 1;
    const double wy = fy - y0;
    for (std::size_t x = 0; x < resize_to; ++x) {
      double fx = (x + 0.5) * scale - 0.5;
      if (fx < 0) fx = 0;
      if (fx > s - 1.0) fx = s - 1.0;
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = x0 + 1 < s ? x0 + 1 : s - 1;
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double p00 = sq[(y0 * s + x0) * 3 + c], p01 = sq[(y0 * s + x1) * 3 + c];
        const double p10 = sq[(y1 * s + x0) * 3 + c], p11 = sq[(y1 * s + x1) * 3 + c];
        const double top = (1.0 - wx) * p00 + wx * p01;
        const double bot = (1.0 - wx) * p10 + wx * p11;
        double v = std::floor((1.0 - wy) * top + wy * bot + 0.5);
        v = v < 0 ? 0 : (v > 255 ? 255 : v);
        rs[(y * resize_to + x) * 3 + c] = static_cast<std::uint8_t>(v);
      }
    }
  }
  const std::size_t off = (resize_to - crop_to) / 2;
  std::vector<std::uint8_t> out(crop_to * crop_to * 3);
  for (std::size_t y = 0; y < crop_to; ++y)
    for (std::size_t x = 0; x < crop_to; ++x)
      for (int c = 0; c < 3; ++c)
        out[(y * crop_to + x) * 3 + c] = rs[((y + off) * resize_to + (x + off)) * 3 + c];
  return RasterImage(crop_to, crop_to, std::move(out));
}

}  // namespace cvf::testing
