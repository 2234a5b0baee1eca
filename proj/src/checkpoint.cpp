#include "cvf/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <regex>

#include "cvf/errors.hpp"
#include "json.hpp"

namespace cvf::checkpoint {

namespace {

constexpr char kMagic[8] = {'C', 'V', 'F', 'C', 'K', 'P', 'T', '\0'};
constexpr std::size_t kPreamble = sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

// Element bytes in little-endian order regardless of the host.
template <typename T>
void to_le_bytes(std::span<const T> values, std::vector<std::uint8_t>& out) {
  out.resize(values.size() * sizeof(T));
  std::memcpy(out.data(), values.data(), out.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < values.size(); ++i) std::reverse(out.begin() + i * sizeof(T), out.begin() + (i + 1) * sizeof(T));
  }
}

template <typename T>
std::vector<T> from_le_bytes(const std::vector<std::uint8_t>& bytes) {
  std::vector<std::uint8_t> tmp = bytes;
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < tmp.size(); i += sizeof(T)) std::reverse(tmp.begin() + i, tmp.begin() + i + sizeof(T));
  }
  std::vector<T> out(tmp.size() / sizeof(T));
  std::memcpy(out.data(), tmp.data(), tmp.size());
  return out;
}

template <typename T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

DType parse_dtype(const std::string& s, const std::string& entry) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw FormatError("entry '" + entry + "': unknown dtype '" + s + "'");
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : ", ") + s;
  return out;
}

bool is_frontend(const std::string& name) { return name.rfind("frontend.", 0) == 0; }
bool is_patch_proj(const std::string& name) {
  return name == "patch_embed.proj.weight" || name == "patch_embed.proj.bias";
}

}  // namespace

std::size_t dtype_size(DType d) noexcept { return d == DType::f32 ? 4 : 8; }
const char* dtype_name(DType d) noexcept { return d == DType::f32 ? "f32" : "f64"; }

void Bundle::add(Entry e) {
  if (index_.count(e.name)) throw FormatError("duplicate entry '" + e.name + "'");
  if (e.bytes.size() != e.numel() * dtype_size(e.dtype)) {
    throw FormatError("entry '" + e.name + "': " + std::to_string(e.bytes.size()) + " bytes for shape " +
                      to_string(e.shape));
  }
  index_.emplace(e.name, entries_.size());
  entries_.push_back(std::move(e));
}

const Entry* Bundle::find(const std::string& name) const noexcept {
  const auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

std::vector<std::string> Bundle::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

template <typename T>
Entry make_entry(const std::string& name, const Tensor<T>& t) {
  Entry e{name, dtype_of<T>(), t.shape(), {}};
  to_le_bytes<T>(t.data(), e.bytes);
  return e;
}

template <typename T>
std::vector<T> entry_values(const Entry& e) {
  if (e.dtype == dtype_of<T>()) return from_le_bytes<T>(e.bytes);
  using Other = std::conditional_t<std::is_same_v<T, float>, double, float>;
  const auto raw = from_le_bytes<Other>(e.bytes);
  return std::vector<T>(raw.begin(), raw.end());
}

template <typename T>
Bundle from_model(const model::Conviformer<T>& m, Metadata metadata) {
  Bundle b;
  b.metadata = std::move(metadata);
  for (const auto& p : m.parameters()) b.add(make_entry(p.name, p.tensor));
  return b;
}

std::vector<std::uint8_t> encode(const Bundle& b) {
  nlohmann::json header;
  header["metadata"] = {{"config", b.metadata.config}, {"seed", b.metadata.seed}, {"epoch", b.metadata.epoch}};
  header["entries"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : b.entries()) {
    header["entries"].push_back({{"name", e.name},
                                 {"dtype", dtype_name(e.dtype)},
                                 {"shape", e.shape},
                                 {"offset", offset},
                                 {"nbytes", e.bytes.size()}});
    offset += e.bytes.size();
  }
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& e : b.entries()) out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  return out;
}

Bundle decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPreamble) throw FormatError("checkpoint truncated inside the preamble");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) throw FormatError("not a checkpoint (bad magic)");
  const auto version = get_le<std::uint32_t>(bytes.data() + sizeof(kMagic));
  if (version != kFormatVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = get_le<std::uint64_t>(bytes.data() + sizeof(kMagic) + sizeof(std::uint32_t));
  if (header_len > bytes.size() - kPreamble) throw FormatError("checkpoint truncated inside the header");
  const auto payload = bytes.subspan(kPreamble + header_len);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPreamble, bytes.begin() + kPreamble + header_len);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("corrupt checkpoint header: ") + ex.what());
  }

  Bundle b;
  std::uint64_t expected_offset = 0;
  try {
    const auto& meta = header.at("metadata");
    b.metadata.config = meta.at("config").get<std::map<std::string, std::string>>();
    b.metadata.seed = meta.at("seed").get<std::uint64_t>();
    b.metadata.epoch = meta.at("epoch").get<std::size_t>();
    for (const auto& je : header.at("entries")) {
      Entry e;
      e.name = je.at("name").get<std::string>();
      e.dtype = parse_dtype(je.at("dtype").get<std::string>(), e.name);
      e.shape = je.at("shape").get<Shape>();
      const auto offset = je.at("offset").get<std::uint64_t>();
      const auto nbytes = je.at("nbytes").get<std::uint64_t>();
      if (nbytes != e.numel() * dtype_size(e.dtype)) {
        throw FormatError("entry '" + e.name + "': header declares " + std::to_string(nbytes) + " bytes but shape " +
                          to_string(e.shape) + " needs " + std::to_string(e.numel() * dtype_size(e.dtype)));
      }
      if (offset != expected_offset) {
        throw FormatError("entry '" + e.name + "': offset " + std::to_string(offset) + " is not contiguous (expected " +
                          std::to_string(expected_offset) + ")");
      }
      if (offset + nbytes > payload.size()) {
        throw FormatError("entry '" + e.name + "' is truncated: needs bytes [" + std::to_string(offset) + ", " +
                          std::to_string(offset + nbytes) + ") but the payload holds " +
                          std::to_string(payload.size()));
      }
      e.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                     payload.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
      expected_offset += nbytes;
      b.add(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("corrupt checkpoint header: ") + ex.what());
  }
  if (expected_offset != payload.size()) {
    throw FormatError("checkpoint has " + std::to_string(payload.size() - expected_offset) + " trailing payload bytes");
  }
  return b;
}

void save(const Bundle& b, const std::filesystem::path& path) {
  const auto bytes = encode(b);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Bundle load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode(bytes);
  } catch (const FormatError& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
}

Direction parse_direction(const std::string& s) {
  if (s == "base-to-conviformer" || s == "base_to_conviformer") return Direction::base_to_conviformer;
  if (s == "conviformer-to-base" || s == "conviformer_to_base") return Direction::conviformer_to_base;
  throw ConfigError("unknown conversion direction '" + s + "' (base-to-conviformer|conviformer-to-base)");
}

const char* direction_name(Direction d) noexcept {
  return d == Direction::base_to_conviformer ? "base-to-conviformer" : "conviformer-to-base";
}

bool is_known_name(const std::string& name) {
  static const std::regex schema(
      R"(frontend\.\d+\.(conv|norm)\.(weight|bias))"
      R"(|frontend\.out\.(weight|bias))"
      R"(|patch_embed\.proj\.(weight|bias))"
      R"(|gpsa\.\d+\.(v_pos|gate))"
      R"(|(gpsa|sa)\.\d+\.(norm1\.weight|norm1\.bias|wq|wk|wv|wo|bo|norm2\.weight|norm2\.bias|ffn\.fc[12]\.(weight|bias)))"
      R"(|cls_token|norm\.(weight|bias)|head\.tax\.(weight|bias)|head\.(gen|fam)\.fc[12]\.(weight|bias))"
      R"(|emb\.(tax|gen|fam)\.(weight|bias))");
  return std::regex_match(name, schema);
}

Conversion convert(const Bundle& b, Direction direction) {
  std::vector<std::string> unknown;
  bool has_frontend = false;
  for (const auto& e : b.entries()) {
    if (!is_known_name(e.name)) unknown.push_back(e.name);
    has_frontend = has_frontend || is_frontend(e.name);
  }
  if (!unknown.empty()) throw ConversionError("unmatched checkpoint names: " + join(unknown));
  if (direction == Direction::base_to_conviformer && has_frontend) {
    throw ConversionError("base-to-conviformer needs a base bundle, but this one has frontend.* entries");
  }
  if (direction == Direction::conviformer_to_base && !has_frontend) {
    throw ConversionError("conviformer-to-base needs a bundle with frontend.* entries");
  }
  Conversion out;
  out.bundle.metadata = b.metadata;
  for (const auto& e : b.entries()) {
    const bool drop = is_patch_proj(e.name) || (direction == Direction::conviformer_to_base && is_frontend(e.name));
    if (drop) {
      out.dropped.push_back(e.name);
    } else {
      out.bundle.add(e);
    }
  }
  return out;
}

template <typename T>
LoadReport load_into(model::Conviformer<T>& m, const Bundle& b, bool require_all) {
  std::map<std::string, model::NamedTensor<T>*> by_name;
  for (auto& p : m.parameters()) by_name.emplace(p.name, &p);
  std::vector<std::string> unmatched;
  for (const auto& e : b.entries())
    if (!by_name.count(e.name)) unmatched.push_back(e.name);
  if (!unmatched.empty()) throw ConversionError("bundle entries without a model parameter: " + join(unmatched));
  for (const auto& e : b.entries()) {
    const auto& expected = by_name.at(e.name)->tensor.shape();
    if (expected != e.shape) {
      throw FormatError("entry '" + e.name + "' has shape " + to_string(e.shape) + " but the model expects " +
                        to_string(expected));
    }
  }
  LoadReport report;
  for (const auto& p : m.parameters())
    if (!b.find(p.name)) report.fresh.push_back(p.name);
  if (require_all && !report.fresh.empty()) throw ConversionError("bundle lacks model parameters: " + join(report.fresh));
  // Parameters are shared handles; write through them so every holder sees
  // the loaded values.
  for (const auto& e : b.entries()) {
    auto dst = by_name.at(e.name)->tensor.mutable_data();
    const auto values = entry_values<T>(e);
    std::copy(values.begin(), values.end(), dst.begin());
    report.loaded.push_back(e.name);
  }
  return report;
}

template Entry make_entry<float>(const std::string&, const Tensor<float>&);
template Entry make_entry<double>(const std::string&, const Tensor<double>&);
template std::vector<float> entry_values<float>(const Entry&);
template std::vector<double> entry_values<double>(const Entry&);
template Bundle from_model<float>(const model::Conviformer<float>&, Metadata);
template Bundle from_model<double>(const model::Conviformer<double>&, Metadata);
template LoadReport load_into<float>(model::Conviformer<float>&, const Bundle&, bool);
template LoadReport load_into<double>(model::Conviformer<double>&, const Bundle&, bool);

}  // namespace cvf::checkpoint
