#pragma once

#include <cstddef>

#include "cvf/image.hpp"

// Aspect-preserving preprocessing: strip a border, mirror the short axis out
// to a square, resize, center crop.
namespace cvf::presizer {

struct PresizeConfig {
  std::size_t border_px = 20;
  std::size_t resize_to = 512;
  std::size_t crop_to = 448;
};

// Drops `border_px` pixels from every side. Throws DegenerateInputError
// unless 2*border_px < height and 2*border_px < width.
RasterImage strip_border(const RasterImage& image, std::size_t border_px);

// Pads the short axis on its trailing side (bottom or right) to
// max(height, width) with the mirror image about the trailing edge. The edge
// row/column is repeated, so the seam is smooth: for width w, column w+k
// copies column w-1-k. Deficits beyond the image extent continue the mirror
// with alternating orientation.
RasterImage reflect_pad_to_square(const RasterImage& image);

// Source index that output index `i` copies under trailing mirror padding of
// an axis of length `n`.
std::size_t mirror_index(std::size_t i, std::size_t n) noexcept;

// Bilinear, half-pixel-centre convention: output pixel centre (o + 0.5)
// maps to input coordinate (o + 0.5) * in / out - 0.5, clamped to the image.
// Samples are rounded half up.
RasterImage resize(const RasterImage& image, std::size_t out_h, std::size_t out_w);
// Square resize; the input must be square.
RasterImage resize(const RasterImage& image, std::size_t to);

// to x to window at offset floor((extent - to) / 2) on each axis.
RasterImage center_crop(const RasterImage& image, std::size_t to);

// strip_border, reflect_pad_to_square, resize, center_crop.
RasterImage presize(const RasterImage& image, const PresizeConfig& cfg);

void validate(const PresizeConfig& cfg);

}  // namespace cvf::presizer
