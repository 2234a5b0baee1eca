#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "cvf/config.hpp"
#include "cvf/image.hpp"
#include "cvf/labels.hpp"
#include "cvf/losses.hpp"
#include "cvf/rng.hpp"

// Procedural long-tailed, hierarchically labeled image set. Coarse cues
// (stripe frequency per family, coloured shape per genus) survive
// downsampling. The taxon is only a 4x4 glyph on plain plates whose centre
// 2x2 is always dark, so 4x downsampling erases it.
namespace cvf::synth {

struct SynthSpec {
  std::size_t n_family = 4;
  std::size_t n_genus = 12;
  std::size_t n_taxa = 36;
  std::size_t img_size = 64;
  std::size_t min_per_taxon = 7;
  std::size_t max_per_taxon = 100;
  double zipf_exponent = 1.2;
  std::uint64_t seed = 0;
};

// Throws ConfigError on an inconsistent hierarchy or sizes.
void validate(const SynthSpec& spec);
SynthSpec spec_from(const KeyValueConfig& kv, const std::string& prefix = "synth.");
void spec_to(const SynthSpec& spec, KeyValueConfig& kv, const std::string& prefix = "synth.");

// Contiguous, surjective child -> parent blocks.
Taxonomy make_taxonomy(const SynthSpec& spec);

// Samples per taxon: max(min, round(max * rank^-s)) over a seeded
// permutation of ranks 1..n_taxa.
std::vector<std::size_t> taxon_counts(const SynthSpec& spec);

// The glyph is stamped on four 12x12 plain plates, one per corner, each
// inset 4 px from the image edges; the glyph sits 4 px inside its plate.
// Every origin is a multiple of 4.
constexpr std::size_t kGlyphSize = 4;
constexpr std::size_t kPlateSize = 12;
constexpr std::size_t kPlateInset = 4;
constexpr std::size_t kGlyphInset = 4;
// Top-left plate corners along one axis: {4, img_size - 16}.
std::array<std::size_t, 2> plate_offsets(std::size_t img_size) noexcept;

// 16-bit row-major on-mask of the 4x4 glyph of `taxon`: the centre 2x2 plus
// exactly 6 of the 12 border cells; distinct within each genus.
std::uint16_t glyph_mask(const SynthSpec& spec, std::size_t taxon);

struct SynthSample {
  RasterImage image;
  HierLabel label;
};

struct Dataset {
  Taxonomy taxonomy;
  std::vector<SynthSample> samples;

  std::size_t size() const noexcept { return samples.size(); }
};

// Pure function of `spec`; parallel over taxa.
Dataset generate(const SynthSpec& spec);
RasterImage render(const SynthSpec& spec, const HierLabel& label, std::size_t instance);

// Ultrametric distances from a random binary tree over genera: genera merge
// within their family first, so within-family distances are all smaller
// than cross-family ones.
losses::PhyloMatrix phylo_matrix(const SynthSpec& spec, std::uint64_t seed);

// Stratified per taxon: round(fraction * count) held out, at least one when
// the taxon has two or more samples.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};
Split stratified_split(const Dataset& ds, double test_fraction, std::uint64_t seed);

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices);

// Keeps samples of the first `n_taxa` taxa, relabelled so the kept taxa,
// genera and families are numbered densely in order of first appearance.
Dataset restrict_taxa(const Dataset& ds, std::size_t n_taxa);

// Batches of dataset indices. Every batch holds an anchor, a positive with
// the same label at `level` and a negative with a different one.
class TripletBatchStream {
 public:
  // Throws ConfigError when batch_size < 3 or the dataset cannot supply a
  // valid triplet at `level`.
  TripletBatchStream(const Dataset& ds, Level level, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  std::vector<std::size_t> ids_;
  std::vector<std::size_t> anchor_classes_;
  std::vector<std::vector<std::size_t>> members_;
  std::size_t batch_size_;
  CounterRng rng_;
};

// <dir>/images/<index>.ppm, <dir>/manifest.tsv (path, family, genus, taxon).
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
// Throws FormatError on a malformed manifest and LabelError when the records
// do not form a consistent hierarchy.
Dataset read_dataset(const std::filesystem::path& dir);

// First line n, then n rows of n distances.
void write_phylo(const losses::PhyloMatrix& m, const std::filesystem::path& path);
losses::PhyloMatrix read_phylo(const std::filesystem::path& path);

}  // namespace cvf::synth
