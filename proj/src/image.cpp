#include "cvf/image.hpp"

#include <cctype>
#include <fstream>
#include <iterator>
#include <string>

#include "cvf/errors.hpp"

namespace cvf {

RasterImage::RasterImage(std::size_t height, std::size_t width)
    : RasterImage(height, width, std::vector<std::uint8_t>(height * width * kChannels, 0)) {}

RasterImage::RasterImage(std::size_t height, std::size_t width, std::vector<std::uint8_t> data)
    : height_(height), width_(width), data_(std::move(data)) {
  if (height == 0 || width == 0) {
    throw DegenerateInputError("image extent " + std::to_string(height) + "x" + std::to_string(width) +
                               " must be at least 1x1");
  }
  if (data_.size() != height * width * kChannels) {
    throw DegenerateInputError("image buffer holds " + std::to_string(data_.size()) + " bytes, expected " +
                               std::to_string(height * width * kChannels));
  }
}

namespace {

class PpmCursor {
 public:
  explicit PpmCursor(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t read_uint(const char* what) {
    skip_space_and_comments();
    std::size_t value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      ++pos_;
      if (++digits > 9) throw FormatError(std::string("PPM ") + what + " is too large");
    }
    if (digits == 0) throw FormatError(std::string("PPM header is missing the ") + what);
    return value;
  }

  std::size_t pos() const noexcept { return pos_; }
  void advance() noexcept { ++pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

RasterImage decode_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("not a binary PPM (P6) file");
  PpmCursor cur(bytes.subspan(2));
  const std::size_t width = cur.read_uint("width");
  const std::size_t height = cur.read_uint("height");
  const std::size_t maxval = cur.read_uint("maxval");
  if (maxval != 255) throw FormatError("unsupported PPM maxval " + std::to_string(maxval));
  if (width == 0 || height == 0) throw FormatError("PPM has a zero extent");
  // Exactly one whitespace byte separates the header from the samples.
  cur.advance();
  const std::size_t offset = 2 + cur.pos();
  const std::size_t expected = width * height * RasterImage::kChannels;
  if (bytes.size() < offset + expected) {
    throw FormatError("PPM payload truncated: " + std::to_string(bytes.size() - std::min(bytes.size(), offset)) +
                      " of " + std::to_string(expected) + " bytes");
  }
  std::vector<std::uint8_t> data(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                 bytes.begin() + static_cast<std::ptrdiff_t>(offset + expected));
  return RasterImage(height, width, std::move(data));
}

std::vector<std::uint8_t> encode_ppm(const RasterImage& image) {
  const std::string header =
      "P6\n" + std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.data().begin(), image.data().end());
  return out;
}

RasterImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_ppm(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_ppm(const RasterImage& image, const std::filesystem::path& path) {
  const auto bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace cvf
