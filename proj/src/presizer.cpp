#include "cvf/presizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cvf/errors.hpp"

namespace cvf::presizer {

namespace {

constexpr std::size_t C = RasterImage::kChannels;

std::uint8_t round_sample(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

struct Tap {
  std::size_t lo = 0, hi = 0;
  double frac = 0.0;
};

Tap bilinear_tap(std::size_t out, std::size_t out_extent, std::size_t in_extent) {
  const double scale = static_cast<double>(in_extent) / static_cast<double>(out_extent);
  double src = (static_cast<double>(out) + 0.5) * scale - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in_extent - 1));
  Tap t;
  t.lo = static_cast<std::size_t>(std::floor(src));
  t.hi = std::min(t.lo + 1, in_extent - 1);
  t.frac = src - static_cast<double>(t.lo);
  return t;
}

}  // namespace

void validate(const PresizeConfig& cfg) {
  if (cfg.resize_to == 0 || cfg.crop_to == 0) throw ConfigError("presize: resize and crop sizes must be positive");
  if (cfg.crop_to > cfg.resize_to) {
    throw ConfigError("presize: crop_to " + std::to_string(cfg.crop_to) + " exceeds resize_to " +
                      std::to_string(cfg.resize_to));
  }
}

RasterImage strip_border(const RasterImage& image, std::size_t border_px) {
  const std::size_t h = image.height();
  const std::size_t w = image.width();
  if (2 * border_px >= h || 2 * border_px >= w) {
    throw DegenerateInputError("image " + std::to_string(h) + "x" + std::to_string(w) +
                               " too small to strip a border of " + std::to_string(border_px) + "px");
  }
  const std::size_t oh = h - 2 * border_px;
  const std::size_t ow = w - 2 * border_px;
  RasterImage out(oh, ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const auto src = image.data().subspan(((y + border_px) * w + border_px) * C, ow * C);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(y * ow * C));
  }
  return out;
}

std::size_t mirror_index(std::size_t i, std::size_t n) noexcept {
  const std::size_t m = i % (2 * n);
  return m < n ? m : 2 * n - 1 - m;
}

RasterImage reflect_pad_to_square(const RasterImage& image) {
  const std::size_t h = image.height();
  const std::size_t w = image.width();
  if (h == w) return image;
  const std::size_t side = std::max(h, w);
  RasterImage out(side, side);
  for (std::size_t y = 0; y < side; ++y) {
    const std::size_t sy = h < w ? mirror_index(y, h) : y;
    for (std::size_t x = 0; x < side; ++x) {
      const std::size_t sx = w < h ? mirror_index(x, w) : x;
      for (std::size_t c = 0; c < C; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

RasterImage resize(const RasterImage& image, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw DegenerateInputError("resize target must be at least 1x1");
  RasterImage out(out_h, out_w);
  const std::size_t in_w = image.width();
  std::vector<Tap> xtaps(out_w);
  for (std::size_t x = 0; x < out_w; ++x) xtaps[x] = bilinear_tap(x, out_w, in_w);
  const auto rows = static_cast<std::ptrdiff_t>(out_h);
#pragma omp parallel for schedule(static) if (out_h * out_w > 65536)
  for (std::ptrdiff_t yi = 0; yi < rows; ++yi) {
    const auto y = static_cast<std::size_t>(yi);
    const Tap ty = bilinear_tap(y, out_h, image.height());
    for (std::size_t x = 0; x < out_w; ++x) {
      const Tap& tx = xtaps[x];
      for (std::size_t c = 0; c < C; ++c) {
        const double top = (1.0 - tx.frac) * image.at(ty.lo, tx.lo, c) + tx.frac * image.at(ty.lo, tx.hi, c);
        const double bottom = (1.0 - tx.frac) * image.at(ty.hi, tx.lo, c) + tx.frac * image.at(ty.hi, tx.hi, c);
        out.at(y, x, c) = round_sample((1.0 - ty.frac) * top + ty.frac * bottom);
      }
    }
  }
  return out;
}

RasterImage resize(const RasterImage& image, std::size_t to) {
  if (image.height() != image.width()) {
    throw DimensionError("square resize needs a square image, got " + std::to_string(image.height()) + "x" +
                         std::to_string(image.width()));
  }
  return resize(image, to, to);
}

RasterImage center_crop(const RasterImage& image, std::size_t to) {
  if (to == 0) throw DegenerateInputError("crop size must be positive");
  if (to > image.height() || to > image.width()) {
    throw DimensionError("crop " + std::to_string(to) + " exceeds image " + std::to_string(image.height()) + "x" +
                         std::to_string(image.width()));
  }
  const std::size_t oy = (image.height() - to) / 2;
  const std::size_t ox = (image.width() - to) / 2;
  RasterImage out(to, to);
  for (std::size_t y = 0; y < to; ++y) {
    const auto src = image.data().subspan(((y + oy) * image.width() + ox) * C, to * C);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(y * to * C));
  }
  return out;
}

RasterImage presize(const RasterImage& image, const PresizeConfig& cfg) {
  validate(cfg);
  const auto stripped = strip_border(image, cfg.border_px);
  const auto square = reflect_pad_to_square(stripped);
  const auto resized = resize(square, cfg.resize_to);
  return center_crop(resized, cfg.crop_to);
}

}  // namespace cvf::presizer
