#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cvf {

// 8-bit interleaved RGB raster, row-major.
class RasterImage {
 public:
  static constexpr std::size_t kChannels = 3;

  RasterImage() = default;
  // Black image; throws DegenerateInputError for a zero extent.
  RasterImage(std::size_t height, std::size_t width);
  RasterImage(std::size_t height, std::size_t width, std::vector<std::uint8_t> data);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  bool empty() const noexcept { return data_.empty(); }

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
    return data_[(y * width_ + x) * kChannels + c];
  }
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) noexcept {
    return data_[(y * width_ + x) * kChannels + c];
  }

  std::span<const std::uint8_t> data() const noexcept { return data_; }
  std::span<std::uint8_t> data() noexcept { return data_; }

  bool operator==(const RasterImage&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> data_;
};

// Binary PPM (P6, maxval 255). Throws FormatError on malformed input.
RasterImage read_ppm(const std::filesystem::path& path);
void write_ppm(const RasterImage& image, const std::filesystem::path& path);
RasterImage decode_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const RasterImage& image);

}  // namespace cvf
