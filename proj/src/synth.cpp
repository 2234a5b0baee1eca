#include "cvf/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "cvf/errors.hpp"

namespace cvf::synth {

namespace {

constexpr std::uint64_t kCountStream = 0x636f756e74ULL;
constexpr std::uint64_t kGlyphStream = 0x676c797068ULL;
constexpr std::uint64_t kPhyloStream = 0x7068796c6fULL;
constexpr std::uint64_t kSplitStream = 0x73706c6974ULL;

// 12 border cells of the 4x4 glyph, row-major.
constexpr std::size_t kBorder[12] = {0, 1, 2, 3, 4, 7, 8, 11, 12, 13, 14, 15};
constexpr std::uint16_t kCentre = (1u << 5) | (1u << 6) | (1u << 9) | (1u << 10);

const std::vector<std::uint16_t>& border_patterns() {
  static const std::vector<std::uint16_t> patterns = [] {
    std::vector<std::uint16_t> out;
    for (unsigned m = 0; m < (1u << 12); ++m) {
      if (std::popcount(m) != 6) continue;
      std::uint16_t mask = kCentre;
      for (std::size_t b = 0; b < 12; ++b)
        if (m & (1u << b)) mask = static_cast<std::uint16_t>(mask | (1u << kBorder[b]));
      out.push_back(mask);
    }
    return out;
  }();
  return patterns;
}

std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  rgb[0] = 255.0 * (r + m);
  rgb[1] = 255.0 * (g + m);
  rgb[2] = 255.0 * (b + m);
}

std::uint64_t taxon_key(std::uint64_t seed, std::size_t taxon) {
  return seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(taxon) + 1));
}

}  // namespace

void validate(const SynthSpec& s) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("synth spec: " + what);
  };
  require(s.n_family >= 1, "n_family must be positive");
  require(s.n_taxa >= s.n_genus && s.n_genus >= s.n_family, "need n_taxa >= n_genus >= n_family");
  require(s.min_per_taxon >= 3, "min_per_taxon must be at least 3");
  require(s.min_per_taxon <= s.max_per_taxon, "min_per_taxon exceeds max_per_taxon");
  require(s.img_size >= 32 && s.img_size % 8 == 0, "img_size must be a multiple of 8 and at least 32");
  require(s.zipf_exponent >= 0.0 && std::isfinite(s.zipf_exponent), "zipf_exponent must be finite and >= 0");
  const std::size_t per_genus = (s.n_taxa + s.n_genus - 1) / s.n_genus;
  require(per_genus <= border_patterns().size(), "too many taxa per genus for distinct glyphs");
}

SynthSpec spec_from(const KeyValueConfig& kv, const std::string& p) {
  SynthSpec s;
  s.n_family = kv.get_size(p + "n_family", s.n_family);
  s.n_genus = kv.get_size(p + "n_genus", s.n_genus);
  s.n_taxa = kv.get_size(p + "n_taxa", s.n_taxa);
  s.img_size = kv.get_size(p + "img_size", s.img_size);
  s.min_per_taxon = kv.get_size(p + "min_per_taxon", s.min_per_taxon);
  s.max_per_taxon = kv.get_size(p + "max_per_taxon", s.max_per_taxon);
  s.zipf_exponent = kv.get_double(p + "zipf_exponent", s.zipf_exponent);
  s.seed = kv.get_u64(p + "seed", s.seed);
  validate(s);
  return s;
}

void spec_to(const SynthSpec& s, KeyValueConfig& kv, const std::string& p) {
  kv.set(p + "n_family", std::to_string(s.n_family));
  kv.set(p + "n_genus", std::to_string(s.n_genus));
  kv.set(p + "n_taxa", std::to_string(s.n_taxa));
  kv.set(p + "img_size", std::to_string(s.img_size));
  kv.set(p + "min_per_taxon", std::to_string(s.min_per_taxon));
  kv.set(p + "max_per_taxon", std::to_string(s.max_per_taxon));
  kv.set(p + "zipf_exponent", std::to_string(s.zipf_exponent));
  kv.set(p + "seed", std::to_string(s.seed));
}

Taxonomy make_taxonomy(const SynthSpec& s) {
  validate(s);
  Taxonomy t;
  for (std::size_t i = 0; i < s.n_taxa; ++i) t.taxon_genus.push_back(i * s.n_genus / s.n_taxa);
  for (std::size_t g = 0; g < s.n_genus; ++g) t.genus_family.push_back(g * s.n_family / s.n_genus);
  return t;
}

std::vector<std::size_t> taxon_counts(const SynthSpec& s) {
  validate(s);
  std::vector<std::size_t> rank(s.n_taxa);
  for (std::size_t i = 0; i < s.n_taxa; ++i) rank[i] = i + 1;
  CounterRng rng(s.seed, kCountStream);
  rng.shuffle(rank.begin(), rank.end());
  std::vector<std::size_t> out(s.n_taxa);
  for (std::size_t i = 0; i < s.n_taxa; ++i) {
    const double c = static_cast<double>(s.max_per_taxon) * std::pow(static_cast<double>(rank[i]), -s.zipf_exponent);
    out[i] = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(c)), s.min_per_taxon, s.max_per_taxon);
  }
  return out;
}

std::uint16_t glyph_mask(const SynthSpec& s, std::size_t taxon) {
  const auto tx = make_taxonomy(s);
  const std::size_t genus = tx.taxon_genus.at(taxon);
  std::size_t first = taxon;
  while (first > 0 && tx.taxon_genus[first - 1] == genus) --first;
  std::vector<std::size_t> order(border_patterns().size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  CounterRng rng(s.seed, kGlyphStream + genus);
  rng.shuffle(order.begin(), order.end());
  return border_patterns()[order[taxon - first]];
}

std::array<std::size_t, 2> plate_offsets(std::size_t img_size) noexcept {
  return {kPlateInset, img_size - kPlateInset - kPlateSize};
}

RasterImage render(const SynthSpec& s, const HierLabel& label, std::size_t instance) {
  const std::size_t n = s.img_size;
  CounterRng rng(taxon_key(s.seed, label.taxon), instance);
  RasterImage img(n, n);

  const double freq = 2.0 + 1.5 * static_cast<double>(label.family);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double tint[3] = {1.0 + 0.08 * std::cos(static_cast<double>(label.family)),
                          1.0 + 0.08 * std::cos(static_cast<double>(label.family) + 2.0),
                          1.0 + 0.08 * std::cos(static_cast<double>(label.family) + 4.0)};

  double colour[3];
  hsv_to_rgb(0.618034 * static_cast<double>(label.genus), 0.75, 0.85, colour);
  const std::size_t shape = label.genus % 4;
  const double radius = static_cast<double>(n) * (0.22 + 0.04 * static_cast<double>((label.genus / 4) % 3));
  const double jitter = static_cast<double>(n) / 32.0;
  const double cx = static_cast<double>(n) / 2.0 + rng.uniform(-jitter, jitter);
  const double cy = static_cast<double>(n) / 2.0 + rng.uniform(-jitter, jitter);

  const double k = 2.0 * std::numbers::pi * freq / static_cast<double>(n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double fx = static_cast<double>(x) + 0.5;
      const double fy = static_cast<double>(y) + 0.5;
      const double stripe = 140.0 + 30.0 * std::sin(k * (fx * std::cos(theta) + fy * std::sin(theta)) + phase);
      const double dx = fx - cx, dy = fy - cy;
      const double r = std::sqrt(dx * dx + dy * dy);
      bool inside = false;
      switch (shape) {
        case 0: inside = r <= radius; break;
        case 1: inside = std::max(std::abs(dx), std::abs(dy)) <= 0.85 * radius; break;
        case 2: inside = r <= radius && r >= 0.55 * radius; break;
        default: inside = std::abs(dx) + std::abs(dy) <= 1.2 * radius; break;
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = inside ? colour[c] : stripe * tint[c];
        img.at(y, x, c) = clamp_u8(base + rng.uniform(-6.0, 6.0));
      }
    }
  }

  const std::uint16_t mask = glyph_mask(s, label.taxon);
  const auto offsets = plate_offsets(n);
  for (const auto py : offsets)
    for (const auto px : offsets) {
      for (std::size_t y = py; y < py + kPlateSize; ++y)
        for (std::size_t x = px; x < px + kPlateSize; ++x)
          for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = 235;
      for (std::size_t gy = 0; gy < kGlyphSize; ++gy)
        for (std::size_t gx = 0; gx < kGlyphSize; ++gx)
          if (mask & (1u << (gy * kGlyphSize + gx)))
            for (std::size_t c = 0; c < 3; ++c) img.at(py + kGlyphInset + gy, px + kGlyphInset + gx, c) = 25;
    }
  return img;
}

Dataset generate(const SynthSpec& s) {
  validate(s);
  Dataset ds;
  ds.taxonomy = make_taxonomy(s);
  const auto counts = taxon_counts(s);
  std::vector<std::size_t> offset(s.n_taxa + 1, 0);
  for (std::size_t t = 0; t < s.n_taxa; ++t) offset[t + 1] = offset[t] + counts[t];
  ds.samples.resize(offset.back());
  const auto n_taxa = static_cast<std::ptrdiff_t>(s.n_taxa);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ti = 0; ti < n_taxa; ++ti) {
    const auto t = static_cast<std::size_t>(ti);
    const auto label = ds.taxonomy.label_of(t);
    for (std::size_t i = 0; i < counts[t]; ++i) ds.samples[offset[t] + i] = {render(s, label, i), label};
  }
  return ds;
}

losses::PhyloMatrix phylo_matrix(const SynthSpec& s, std::uint64_t seed) {
  validate(s);
  if (s.n_genus < 2) throw ConfigError("phylo_matrix needs at least two genera");
  const auto tx = make_taxonomy(s);
  losses::PhyloMatrix m{s.n_genus, std::vector<double>(s.n_genus * s.n_genus, 0.0)};
  CounterRng rng(seed, kPhyloStream);

  using Cluster = std::vector<std::size_t>;
  // Random agglomeration with strictly increasing merge heights; the
  // distance between two leaves is twice the height at which they join.
  auto agglomerate = [&](std::vector<Cluster> clusters, double height) {
    while (clusters.size() > 1) {
      const std::size_t i = rng.below(clusters.size());
      std::size_t j = rng.below(clusters.size() - 1);
      if (j >= i) ++j;
      height += rng.uniform(0.5, 1.5);
      for (const auto a : clusters[i])
        for (const auto b : clusters[j]) m.d[a * m.n + b] = m.d[b * m.n + a] = 2.0 * height;
      clusters[i].insert(clusters[i].end(), clusters[j].begin(), clusters[j].end());
      clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(j));
    }
    return std::make_pair(clusters.front(), height);
  };

  std::vector<Cluster> families;
  double top = 0.0;
  for (std::size_t f = 0; f < tx.n_family(); ++f) {
    std::vector<Cluster> leaves;
    for (std::size_t g = 0; g < s.n_genus; ++g)
      if (tx.genus_family[g] == f) leaves.push_back({g});
    auto [cluster, height] = agglomerate(std::move(leaves), 0.0);
    families.push_back(std::move(cluster));
    top = std::max(top, height);
  }
  agglomerate(std::move(families), top);
  return m;
}

Split stratified_split(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must lie in [0, 1)");
  std::map<std::size_t, std::vector<std::size_t>> by_taxon;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) by_taxon[ds.samples[i].label.taxon].push_back(i);
  Split split;
  for (auto& [taxon, idx] : by_taxon) {
    CounterRng rng(seed, kSplitStream + taxon);
    rng.shuffle(idx.begin(), idx.end());
    auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    if (idx.size() >= 2 && test_fraction > 0.0) n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 1);
    if (idx.size() < 2) n_test = 0;
    split.test.insert(split.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    split.train.insert(split.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.taxonomy = ds.taxonomy;
  out.samples.reserve(indices.size());
  for (const auto i : indices) out.samples.push_back(ds.samples.at(i));
  return out;
}

Dataset restrict_taxa(const Dataset& ds, std::size_t n_taxa) {
  if (n_taxa == 0 || n_taxa > ds.taxonomy.n_taxa()) throw ConfigError("restrict_taxa: bad taxon count");
  std::map<std::size_t, std::size_t> genus_map, family_map;
  Dataset out;
  for (std::size_t t = 0; t < n_taxa; ++t) {
    const auto l = ds.taxonomy.label_of(t);
    if (!genus_map.count(l.genus)) {
      genus_map.emplace(l.genus, genus_map.size());
      if (!family_map.count(l.family)) family_map.emplace(l.family, family_map.size());
      out.taxonomy.genus_family.push_back(family_map.at(l.family));
    }
    out.taxonomy.taxon_genus.push_back(genus_map.at(l.genus));
  }
  for (const auto& s : ds.samples) {
    if (s.label.taxon >= n_taxa) continue;
    out.samples.push_back({s.image, out.taxonomy.label_of(s.label.taxon)});
  }
  return out;
}

TripletBatchStream::TripletBatchStream(const Dataset& ds, Level level, std::size_t batch_size, std::uint64_t seed)
    : batch_size_(batch_size), rng_(seed, 0x7472697031ULL) {
  if (batch_size < 3) throw ConfigError("triplet batches need batch_size >= 3");
  for (const auto& s : ds.samples) {
    const auto id = level_id(s.label, level);
    ids_.push_back(id);
    if (id >= members_.size()) members_.resize(id + 1);
    members_[id].push_back(ids_.size() - 1);
  }
  std::size_t classes = 0;
  for (std::size_t c = 0; c < members_.size(); ++c) {
    if (members_[c].empty()) continue;
    ++classes;
    if (members_[c].size() >= 2) anchor_classes_.push_back(c);
  }
  if (classes < 2 || anchor_classes_.empty()) {
    throw ConfigError(std::string("dataset admits no valid triplet at ") + level_name(level) + " level");
  }
}

std::vector<std::size_t> TripletBatchStream::next() {
  const std::size_t n = ids_.size();
  const std::size_t c = anchor_classes_[rng_.below(anchor_classes_.size())];
  const auto& mem = members_[c];
  const std::size_t a = mem[rng_.below(mem.size())];
  std::size_t p = mem[rng_.below(mem.size() - 1)];
  if (p == a) p = mem.back();
  std::size_t q = rng_.below(n);
  while (ids_[q] == c) q = rng_.below(n);
  std::vector<std::size_t> batch{a, p, q};
  std::vector<bool> used(n, false);
  used[a] = used[p] = used[q] = true;
  while (batch.size() < batch_size_) {
    std::size_t i = rng_.below(n);
    if (batch.size() < n) {
      while (used[i]) i = rng_.below(n);
    }
    used[i] = true;
    batch.push_back(i);
  }
  rng_.shuffle(batch.begin(), batch.end());
  return batch;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw FormatError("cannot write " + (dir / "manifest.tsv").string());
  manifest << "path\tfamily\tgenus\ttaxon\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06zu.ppm", i);
    write_ppm(ds.samples[i].image, dir / name);
    const auto& l = ds.samples[i].label;
    manifest << name << '\t' << l.family << '\t' << l.genus << '\t' << l.taxon << '\n';
  }
  if (!manifest) throw FormatError("write failed for " + (dir / "manifest.tsv").string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.tsv");
  if (!in) throw FormatError("cannot open " + (dir / "manifest.tsv").string());
  std::string line;
  if (!std::getline(in, line) || line != "path\tfamily\tgenus\ttaxon") throw FormatError("manifest header mismatch");
  Dataset ds;
  constexpr std::size_t kUnset = static_cast<std::size_t>(-1);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string path;
    HierLabel l;
    if (!std::getline(ss, path, '\t') || !(ss >> l.family >> l.genus >> l.taxon)) {
      throw FormatError("manifest line " + std::to_string(lineno) + " is malformed");
    }
    auto& tg = ds.taxonomy.taxon_genus;
    auto& gf = ds.taxonomy.genus_family;
    if (l.taxon >= tg.size()) tg.resize(l.taxon + 1, kUnset);
    if (l.genus >= gf.size()) gf.resize(l.genus + 1, kUnset);
    if ((tg[l.taxon] != kUnset && tg[l.taxon] != l.genus) || (gf[l.genus] != kUnset && gf[l.genus] != l.family)) {
      throw LabelError("manifest line " + std::to_string(lineno) + " contradicts an earlier taxon or genus parent");
    }
    tg[l.taxon] = l.genus;
    gf[l.genus] = l.family;
    ds.samples.push_back({read_ppm(dir / path), l});
  }
  for (std::size_t t = 0; t < ds.taxonomy.taxon_genus.size(); ++t)
    if (ds.taxonomy.taxon_genus[t] == kUnset) throw LabelError("taxon " + std::to_string(t) + " has no samples");
  for (std::size_t g = 0; g < ds.taxonomy.genus_family.size(); ++g)
    if (ds.taxonomy.genus_family[g] == kUnset) throw LabelError("genus " + std::to_string(g) + " has no samples");
  return ds;
}

void write_phylo(const losses::PhyloMatrix& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  out << m.n << '\n';
  for (std::size_t i = 0; i < m.n; ++i) {
    for (std::size_t j = 0; j < m.n; ++j) out << (j ? " " : "") << m.at(i, j);
    out << '\n';
  }
}

losses::PhyloMatrix read_phylo(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  losses::PhyloMatrix m;
  if (!(in >> m.n) || m.n == 0) throw FormatError(path.string() + ": missing matrix size");
  m.d.resize(m.n * m.n);
  for (auto& v : m.d)
    if (!(in >> v)) throw FormatError(path.string() + ": truncated matrix");
  m.validate();
  return m;
}

}  // namespace cvf::synth
