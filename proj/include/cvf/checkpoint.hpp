#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cvf/model.hpp"
#include "cvf/tensor.hpp"

// Named-tensor bundles and the weight transfer between the plain patch
// embedding schema ("base") and the convolutional frontend schema.
//
// File layout: 8-byte magic "CVFCKPT\0", u32 version, u64 header length, a
// JSON header {"metadata": {...}, "entries": [{name, dtype, shape, offset,
// nbytes}]}, then the entries' little-endian bytes back to back in header
// order. Offsets are relative to the payload start.
namespace cvf::checkpoint {

constexpr std::uint32_t kFormatVersion = 1;

enum class DType { f32, f64 };

std::size_t dtype_size(DType d) noexcept;
const char* dtype_name(DType d) noexcept;

struct Entry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian, numel(shape) * dtype_size

  std::size_t numel() const noexcept { return cvf::numel(shape); }
};

struct Metadata {
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
};

class Bundle {
 public:
  Metadata metadata;

  // Throws FormatError on a duplicate name or a byte count that disagrees
  // with the shape.
  void add(Entry e);
  const Entry* find(const std::string& name) const noexcept;
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
Entry make_entry(const std::string& name, const Tensor<T>& t);
// Decodes an entry as T; f32 and f64 entries are both accepted.
template <typename T>
std::vector<T> entry_values(const Entry& e);

template <typename T>
Bundle from_model(const model::Conviformer<T>& m, Metadata metadata = {});

std::vector<std::uint8_t> encode(const Bundle& b);
// Throws FormatError naming the first entry that is malformed or incomplete.
Bundle decode(std::span<const std::uint8_t> bytes);

// Written to a sibling temporary file, then renamed over `path`.
void save(const Bundle& b, const std::filesystem::path& path);
Bundle load(const std::filesystem::path& path);

enum class Direction { base_to_conviformer, conviformer_to_base };
Direction parse_direction(const std::string& s);
const char* direction_name(Direction d) noexcept;

struct Conversion {
  Bundle bundle;
  std::vector<std::string> dropped;
};

// base -> conviformer drops patch_embed.proj.{weight,bias}; conviformer ->
// base drops every frontend.* entry plus the same two. Retained entries are
// copied byte for byte. Throws ConversionError when a name fits neither
// schema or the bundle is not in the source schema.
Conversion convert(const Bundle& b, Direction direction);

// Names the naming schema accepts, independent of mode.
bool is_known_name(const std::string& name);

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> fresh;  // model parameters absent from the bundle
};

// Copies every bundle entry into the matching model parameter in place.
// Throws ConversionError listing bundle names the model lacks, and
// FormatError on a shape mismatch. With `require_all`, missing model
// parameters are an error too.
template <typename T>
LoadReport load_into(model::Conviformer<T>& m, const Bundle& b, bool require_all = false);

}  // namespace cvf::checkpoint
