#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cvf/errors.hpp"

namespace cvf {

struct HierLabel {
  std::size_t taxon = 0;
  std::size_t genus = 0;
  std::size_t family = 0;

  bool operator==(const HierLabel&) const = default;
};

// Child -> parent maps; both are total functions.
struct Taxonomy {
  std::vector<std::size_t> taxon_genus;
  std::vector<std::size_t> genus_family;

  std::size_t n_taxa() const noexcept { return taxon_genus.size(); }
  std::size_t n_genus() const noexcept { return genus_family.size(); }
  std::size_t n_family() const noexcept {
    std::size_t n = 0;
    for (const auto f : genus_family) n = std::max(n, f + 1);
    return n;
  }

  HierLabel label_of(std::size_t taxon) const {
    if (taxon >= taxon_genus.size()) throw LabelError("taxon " + std::to_string(taxon) + " out of range");
    const std::size_t g = taxon_genus[taxon];
    return {taxon, g, genus_family.at(g)};
  }

  // Throws LabelError if the label disagrees with the maps.
  void check(const HierLabel& l) const {
    if (l.taxon >= taxon_genus.size() || taxon_genus[l.taxon] != l.genus || l.genus >= genus_family.size() ||
        genus_family[l.genus] != l.family) {
      throw LabelError("inconsistent label (taxon " + std::to_string(l.taxon) + ", genus " + std::to_string(l.genus) +
                       ", family " + std::to_string(l.family) + ")");
    }
  }
  void check(std::span<const HierLabel> labels) const {
    for (const auto& l : labels) check(l);
  }
};

enum class Level { taxon, genus, family };

inline std::size_t level_id(const HierLabel& l, Level level) noexcept {
  switch (level) {
    case Level::taxon: return l.taxon;
    case Level::genus: return l.genus;
    case Level::family: return l.family;
  }
  return l.taxon;
}

inline std::vector<std::size_t> level_ids(std::span<const HierLabel> labels, Level level) {
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(level_id(l, level));
  return out;
}

inline Level parse_level(const std::string& s) {
  if (s == "taxon") return Level::taxon;
  if (s == "genus") return Level::genus;
  if (s == "family") return Level::family;
  throw ConfigError("unknown sampling level '" + s + "' (taxon|genus|family)");
}

inline const char* level_name(Level l) noexcept {
  switch (l) {
    case Level::taxon: return "taxon";
    case Level::genus: return "genus";
    case Level::family: return "family";
  }
  return "taxon";
}

}  // namespace cvf
