#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "cvf/checkpoint.hpp"
#include "cvf/errors.hpp"
#include "support/model_fixtures.hpp"

using namespace cvf;
using namespace cvf::checkpoint;

namespace {

model::ConviformerConfig base_config() {
  auto c = cvf::testing::tiny_config();
  c.use_frontend = false;
  return c;
}

std::vector<std::uint8_t> le32(float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  return {static_cast<std::uint8_t>(bits), static_cast<std::uint8_t>(bits >> 8), static_cast<std::uint8_t>(bits >> 16),
          static_cast<std::uint8_t>(bits >> 24)};
}

std::vector<std::uint8_t> le64(double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  std::vector<std::uint8_t> out;
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  return out;
}

// File bytes assembled field by field: three tensors, a hand-written header.
struct HandFixture {
  std::vector<std::uint8_t> file;
  std::vector<std::uint8_t> a, b, c;  // payload of each entry

  HandFixture() {
    for (const float v : {1.0f, -2.5f}) append(a, le32(v));
    for (const double v : {0.125, 3.0, -7.75}) append(b, le64(v));
    for (const float v : {0.5f, 1.5f, 2.5f, 3.5f, 4.5f, 5.5f}) append(c, le32(v));
    const std::string header =
        R"({"entries":[)"
        R"({"name":"a","dtype":"f32","shape":[2],"offset":0,"nbytes":8},)"
        R"({"name":"b","dtype":"f64","shape":[3,1],"offset":8,"nbytes":24},)"
        R"({"name":"c","dtype":"f32","shape":[2,3],"offset":32,"nbytes":24}],)"
        R"("metadata":{"config":{"model.n_heads":"4"},"epoch":3,"seed":42}})";
    const char magic[8] = {'C', 'V', 'F', 'C', 'K', 'P', 'T', '\0'};
    file.assign(magic, magic + 8);
    append(file, {1, 0, 0, 0});
    std::uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) file.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    file.insert(file.end(), header.begin(), header.end());
    append(file, a);
    append(file, b);
    append(file, c);
  }

  static void append(std::vector<std::uint8_t>& dst, const std::vector<std::uint8_t>& src) {
    dst.insert(dst.end(), src.begin(), src.end());
  }
};

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "cvf_ckpt_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

std::set<std::string> names_with_prefix(const std::vector<std::string>& names, const std::vector<std::string>& prefixes) {
  std::set<std::string> out;
  for (const auto& n : names)
    for (const auto& p : prefixes)
      if (n.rfind(p, 0) == 0) out.insert(n);
  return out;
}

}  // namespace

TEST(CheckpointFormat, HandBuiltFixtureDecodes) {
  const HandFixture fx;
  const auto b = decode(fx.file);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b.names(), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(b.find("a")->bytes, fx.a);
  EXPECT_EQ(b.find("b")->bytes, fx.b);
  EXPECT_EQ(b.find("c")->bytes, fx.c);
  EXPECT_EQ(b.find("b")->dtype, DType::f64);
  EXPECT_EQ(b.find("c")->shape, (Shape{2, 3}));
  EXPECT_EQ(entry_values<double>(*b.find("b")), (std::vector<double>{0.125, 3.0, -7.75}));
  EXPECT_EQ(entry_values<float>(*b.find("a")), (std::vector<float>{1.0f, -2.5f}));
  EXPECT_EQ(b.metadata.seed, 42u);
  EXPECT_EQ(b.metadata.epoch, 3u);
  EXPECT_EQ(b.metadata.config.at("model.n_heads"), "4");
}

TEST(CheckpointFormat, EncoderAgreesWithHandLayout) {
  const HandFixture fx;
  const auto bytes = encode(decode(fx.file));
  ASSERT_GE(bytes.size(), 20u);
  EXPECT_TRUE(std::equal(fx.file.begin(), fx.file.begin() + 12, bytes.begin()));
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[12 + i]) << (8 * i);
  ASSERT_EQ(bytes.size(), 20 + len + 56);
  std::vector<std::uint8_t> payload(bytes.begin() + 20 + static_cast<std::ptrdiff_t>(len), bytes.end());
  std::vector<std::uint8_t> expected = fx.a;
  HandFixture::append(expected, fx.b);
  HandFixture::append(expected, fx.c);
  EXPECT_EQ(payload, expected);
  const std::string header(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(len));
  EXPECT_NE(header.find(R"("offset":32)"), std::string::npos);
  EXPECT_NE(header.find(R"("nbytes":24)"), std::string::npos);
}

TEST(CheckpointFormat, ModelRoundTripIsBitwise) {
  const model::Conviformer<float> m(cvf::testing::tiny_config(), 3);
  Metadata meta;
  meta.seed = 3;
  meta.epoch = 7;
  meta.config["model.n_heads"] = "4";
  const auto b = from_model(m, meta);
  const auto path = scratch("roundtrip.ckpt");
  save(b, path);
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  const auto back = load(path);
  ASSERT_EQ(back.size(), m.parameters().size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    const auto& e = back.entries()[i];
    const auto& p = m.parameters()[i];
    EXPECT_EQ(e.name, p.name);
    EXPECT_EQ(e.shape, p.tensor.shape());
    ASSERT_EQ(e.bytes.size(), p.tensor.numel() * 4);
    EXPECT_EQ(std::memcmp(e.bytes.data(), p.tensor.data().data(), e.bytes.size()), 0) << e.name;
  }
  EXPECT_EQ(back.metadata.seed, 3u);
  EXPECT_EQ(back.metadata.epoch, 7u);
  EXPECT_EQ(back.metadata.config, meta.config);
  std::filesystem::remove(path);
}

TEST(CheckpointFormat, DoubleRoundTripPreservesSpecialBits) {
  Bundle b;
  const Tensor<double> t({4}, {-0.0, 1e-310, 1.0 / 3.0, -1e300});
  b.add(make_entry("x", t));
  const auto back = decode(encode(b));
  const auto v = entry_values<double>(*back.find("x"));
  EXPECT_TRUE(std::signbit(v[0]));
  EXPECT_EQ(v[1], 1e-310);
  EXPECT_EQ(v[2], 1.0 / 3.0);
  EXPECT_EQ(v[3], -1e300);
}

TEST(CheckpointFormat, TruncationNamesFirstIncompleteEntry) {
  const HandFixture fx;
  const std::size_t payload_start = fx.file.size() - 56;
  EXPECT_NE(error_of([&] { decode(std::span(fx.file).first(payload_start + 4)); }).find("'a'"), std::string::npos);
  EXPECT_NE(error_of([&] { decode(std::span(fx.file).first(payload_start + 8)); }).find("'b'"), std::string::npos);
  EXPECT_NE(error_of([&] { decode(std::span(fx.file).first(payload_start + 40)); }).find("'c'"), std::string::npos);
  EXPECT_NE(error_of([&] { decode(std::span(fx.file).first(fx.file.size() - 1)); }).find("'c'"), std::string::npos);
  EXPECT_NE(error_of([&] { decode(std::span(fx.file).first(30)); }).find("header"), std::string::npos);
  EXPECT_NE(error_of([&] { decode(std::span(fx.file).first(10)); }).find("preamble"), std::string::npos);
}

TEST(CheckpointFormat, EveryTruncationIsRejected) {
  const model::Conviformer<float> m(cvf::testing::tiny_config(), 1);
  Bundle small;
  for (std::size_t i = 0; i < 4; ++i) small.add(make_entry(m.parameters()[i].name, m.parameters()[i].tensor));
  const auto bytes = encode(small);
  for (std::size_t n = 0; n < bytes.size(); n += 7) {
    EXPECT_THROW(decode(std::span(bytes).first(n)), FormatError) << "length " << n;
  }
}

TEST(CheckpointFormat, CorruptHeadersRejected) {
  const HandFixture fx;
  auto bad_magic = fx.file;
  bad_magic[0] = 'X';
  EXPECT_NE(error_of([&] { decode(bad_magic); }).find("magic"), std::string::npos);
  auto bad_version = fx.file;
  bad_version[8] = 9;
  EXPECT_NE(error_of([&] { decode(bad_version); }).find("version"), std::string::npos);
  auto bad_json = fx.file;
  bad_json[20] = '#';
  EXPECT_NE(error_of([&] { decode(bad_json); }).find("corrupt"), std::string::npos);
  auto trailing = fx.file;
  trailing.push_back(0);
  EXPECT_NE(error_of([&] { decode(trailing); }).find("trailing"), std::string::npos);

  // Same header length, shape of "c" changed so the byte count disagrees.
  std::string text(fx.file.begin() + 20, fx.file.end() - 56);
  auto pos = text.find(R"("shape":[2,3])");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 13, R"("shape":[3,3])");
  auto mismatch = fx.file;
  std::copy(text.begin(), text.end(), mismatch.begin() + 20);
  EXPECT_NE(error_of([&] { decode(mismatch); }).find("'c'"), std::string::npos);

  text = std::string(fx.file.begin() + 20, fx.file.end() - 56);
  pos = text.find(R"("dtype":"f64")");
  text.replace(pos, 13, R"("dtype":"i64")");
  auto bad_dtype = fx.file;
  std::copy(text.begin(), text.end(), bad_dtype.begin() + 20);
  EXPECT_NE(error_of([&] { decode(bad_dtype); }).find("'b'"), std::string::npos);
}

TEST(CheckpointFormat, BundleInvariants) {
  Bundle b;
  b.add(make_entry("x", Tensor<float>({2}, {1, 2})));
  EXPECT_THROW(b.add(make_entry("x", Tensor<float>({1}, {1}))), FormatError);
  Entry bad{"y", DType::f32, {3}, std::vector<std::uint8_t>(8)};
  EXPECT_THROW(b.add(bad), FormatError);
  EXPECT_THROW(load(scratch("missing.ckpt")), FormatError);
}

TEST(CheckpointConvert, BaseToConviformerDropsExactlyTwo) {
  const model::Conviformer<float> base(base_config(), 5);
  const auto b = from_model(base);
  const auto conv = convert(b, Direction::base_to_conviformer);
  EXPECT_EQ(conv.bundle.size(), b.size() - 2);
  EXPECT_EQ(conv.dropped, (std::vector<std::string>{"patch_embed.proj.weight", "patch_embed.proj.bias"}));
  for (const auto& e : conv.bundle.entries()) {
    const auto* src = b.find(e.name);
    ASSERT_NE(src, nullptr);
    EXPECT_EQ(e.bytes, src->bytes) << e.name;
    EXPECT_EQ(e.shape, src->shape);
  }
  // Name set difference equals the drop list.
  const auto names = b.names();
  std::set<std::string> before(names.begin(), names.end());
  for (const auto& n : conv.bundle.names()) before.erase(n);
  EXPECT_EQ(before, (std::set<std::string>(conv.dropped.begin(), conv.dropped.end())));
}

TEST(CheckpointConvert, ConvertedBaseLoadsIntoConviformer) {
  const model::Conviformer<float> base(base_config(), 5);
  const auto conv = convert(from_model(base), Direction::base_to_conviformer);
  model::Conviformer<float> target(cvf::testing::tiny_config(), 9);
  const auto report = load_into(target, conv.bundle);
  std::vector<std::string> target_names;
  for (const auto& p : target.parameters()) target_names.push_back(p.name);
  const auto expected_fresh = names_with_prefix(target_names, {"frontend.", "patch_embed."});
  EXPECT_EQ(std::set<std::string>(report.fresh.begin(), report.fresh.end()), expected_fresh);
  EXPECT_EQ(report.loaded.size() + report.fresh.size(), target.parameters().size());
  for (const auto& name : report.loaded) {
    const auto t = target.parameter(name);
    const auto s = base.parameter(name);
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), s.data().begin())) << name;
  }
  // The model's internal handles see the loaded values.
  EXPECT_EQ(target.gpsa_layers()[0].attn.wq.data()[0], base.gpsa_layers()[0].attn.wq.data()[0]);
  CounterRng rng(1);
  const auto x = cvf::testing::random_tensor<float>({2, 3, 64, 64}, rng);
  const auto out = target.forward(x);
  EXPECT_EQ(out.label_tax.shape(), (Shape{2, 36}));
  for (const auto v : out.label_tax.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(CheckpointConvert, ConviformerToBase) {
  const model::Conviformer<float> src(cvf::testing::tiny_config(), 2);
  const auto b = from_model(src);
  const auto conv = convert(b, Direction::conviformer_to_base);
  const auto expected = names_with_prefix(b.names(), {"frontend.", "patch_embed."});
  EXPECT_EQ(std::set<std::string>(conv.dropped.begin(), conv.dropped.end()), expected);
  EXPECT_EQ(conv.bundle.size() + expected.size(), b.size());
  model::Conviformer<float> target(base_config(), 4);
  const auto report = load_into(target, conv.bundle);
  EXPECT_EQ(std::set<std::string>(report.fresh.begin(), report.fresh.end()),
            (std::set<std::string>{"patch_embed.proj.weight", "patch_embed.proj.bias"}));
  CounterRng rng(2);
  EXPECT_NO_THROW(target.forward(cvf::testing::random_tensor<float>({1, 3, 64, 64}, rng)));
}

TEST(CheckpointConvert, SchemaErrors) {
  const model::Conviformer<float> base(base_config(), 5);
  auto b = from_model(base);
  EXPECT_THROW(convert(b, Direction::conviformer_to_base), ConversionError);
  const model::Conviformer<float> cf(cvf::testing::tiny_config(), 5);
  EXPECT_THROW(convert(from_model(cf), Direction::base_to_conviformer), ConversionError);

  b.add(make_entry("pos_embed", Tensor<float>({1}, {0})));
  b.add(make_entry("gpsa.0.mystery", Tensor<float>({1}, {0})));
  try {
    convert(b, Direction::base_to_conviformer);
    FAIL() << "expected ConversionError";
  } catch (const ConversionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("pos_embed"), std::string::npos);
    EXPECT_NE(msg.find("gpsa.0.mystery"), std::string::npos);
  }
  EXPECT_THROW(parse_direction("sideways"), ConfigError);
  EXPECT_EQ(parse_direction("base-to-conviformer"), Direction::base_to_conviformer);
}

TEST(CheckpointConvert, EveryModelNameIsInSchema) {
  for (const bool frontend : {true, false}) {
    auto c = cvf::testing::tiny_config();
    c.use_frontend = frontend;
    const model::Conviformer<float> m(c, 0);
    for (const auto& p : m.parameters()) EXPECT_TRUE(is_known_name(p.name)) << p.name;
  }
  EXPECT_FALSE(is_known_name("gpsa.x.wq"));
  EXPECT_FALSE(is_known_name("sa.0.v_pos"));
}

TEST(CheckpointLoad, RejectsMismatchWithoutMutating) {
  model::Conviformer<float> m(cvf::testing::tiny_config(), 1);
  const auto before = from_model(m);
  const auto cls_shape = m.parameter("cls_token").shape();
  const Tensor<float> nines(cls_shape, std::vector<float>(numel(cls_shape), 9.0f));
  Bundle b;
  b.add(make_entry("cls_token", nines));
  b.add(make_entry("norm.weight", Tensor<float>({3}, {1, 2, 3})));
  EXPECT_THROW(load_into(m, b), FormatError);
  Bundle unknown;
  unknown.add(make_entry("cls_token", nines));
  unknown.add(make_entry("extra", Tensor<float>({1}, {0})));
  EXPECT_THROW(load_into(m, unknown), ConversionError);
  const auto after = from_model(m);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before.entries()[i].bytes, after.entries()[i].bytes);
  EXPECT_THROW(load_into(m, Bundle{}, true), ConversionError);
}

TEST(CheckpointLoad, DoubleBundleIntoFloatModel) {
  const model::Conviformer<double> src(cvf::testing::tiny_config(), 6);
  model::Conviformer<float> dst(cvf::testing::tiny_config(), 7);
  const auto report = load_into(dst, from_model(src), true);
  EXPECT_TRUE(report.fresh.empty());
  const auto a = src.parameter("gpsa.0.wq");
  const auto b = dst.parameter("gpsa.0.wq");
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(b.data()[i], static_cast<float>(a.data()[i]));
}
