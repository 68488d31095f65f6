#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "taxofuse/csv.hpp"
#include "taxofuse/error.hpp"

namespace taxofuse {

// Taxonomic ranks, finest first. Level l+1 is always the parent rank of l.
enum class Level : int { species = 0, genus, family, order, klass, phylum };

inline constexpr int kNumLevels = 6;

inline constexpr std::array<Level, kNumLevels> kAllLevels = {
    Level::species, Level::genus, Level::family,
    Level::order,   Level::klass, Level::phylum};

inline constexpr std::string_view level_name(Level l) {
  constexpr std::array<std::string_view, kNumLevels> names = {
      "species", "genus", "family", "order", "class", "phylum"};
  return names[static_cast<int>(l)];
}

inline constexpr int level_index(Level l) { return static_cast<int>(l); }

inline Level level_from_index(int i) {
  if (i < 0 || i >= kNumLevels) throw ConfigError("taxonomy level out of range: " + std::to_string(i));
  return static_cast<Level>(i);
}

inline Level parse_level(std::string_view s) {
  for (Level l : kAllLevels)
    if (level_name(l) == s) return l;
  throw ConfigError("unknown taxonomy level: " + std::string(s));
}

// One row of a taxonomy file: the full lineage of a species, finest first.
struct TaxonRecord {
  std::array<std::string, kNumLevels> names;

  const std::string& species() const { return names[0]; }
  const std::string& at(Level l) const { return names[level_index(l)]; }
  bool operator==(const TaxonRecord&) const = default;
};

// A probability (or mass) vector over the classes of one level.
struct ScoreDistribution {
  Level level = Level::species;
  std::vector<double> values;
};

// Immutable six-rank forest. Node ids are dense per level and assigned in
// depth-first order from the phyla down, visiting siblings in lexicographic
// name order, so species ids follow the taxonomy and are independent of the
// order in which records were supplied.
class TaxonomyTree {
 public:
  static TaxonomyTree build(std::span<const TaxonRecord> records);

  std::size_t num_species() const { return size(Level::species); }
  std::size_t size(Level l) const { return names_[level_index(l)].size(); }
  std::array<std::size_t, kNumLevels> cardinalities() const {
    std::array<std::size_t, kNumLevels> out{};
    for (Level l : kAllLevels) out[level_index(l)] = size(l);
    return out;
  }

  const std::string& name(Level l, std::size_t id) const {
    check_id(l, id);
    return names_[level_index(l)][id];
  }

  std::optional<std::size_t> find(Level l, std::string_view name) const {
    const auto& idx = index_[level_index(l)];
    auto it = idx.find(std::string(name));
    if (it == idx.end()) return std::nullopt;
    return it->second;
  }

  // Parent id at level l+1; nullopt for phylum nodes.
  std::optional<std::size_t> parent(Level l, std::size_t id) const {
    check_id(l, id);
    if (l == Level::phylum) return std::nullopt;
    return parents_[level_index(l)][id];
  }

  // Total map from level-l ids to level-(l+1) ids. Requires l != phylum.
  const std::vector<std::size_t>& parent_map(Level l) const {
    if (l == Level::phylum) throw ConfigError("phylum nodes have no parent");
    return parents_[level_index(l)];
  }

  const std::vector<std::size_t>& children(Level l, std::size_t id) const {
    check_id(l, id);
    if (l == Level::species) {
      static const std::vector<std::size_t> none;
      return none;
    }
    return children_[level_index(l)][id];
  }

  // Cached ancestor of a species at any level.
  std::size_t ancestor(std::size_t species, Level l) const {
    check_id(Level::species, species);
    return ancestors_[species][level_index(l)];
  }

  // Lineage of one species, in the same form it was built from.
  TaxonRecord record(std::size_t species) const {
    TaxonRecord r;
    for (Level l : kAllLevels) r.names[level_index(l)] = name(l, ancestor(species, l));
    return r;
  }

  std::vector<TaxonRecord> records() const {
    std::vector<TaxonRecord> out;
    out.reserve(num_species());
    for (std::size_t s = 0; s < num_species(); ++s) out.push_back(record(s));
    return out;
  }

  // FNV-1a over the canonical (depth-first) serialization.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::string_view s) {
      for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto& r : records()) {
      for (const auto& n : r.names) {
        mix(n);
        mix("\x1f");
      }
      mix("\n");
    }
    return h;
  }

  // Boundaries of contiguous level-l blocks in species order: entry i is the
  // first species id of the i-th level-l taxon, plus a final num_species().
  std::vector<std::size_t> block_starts(Level l) const {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < num_species(); ++s)
      if (s == 0 || ancestor(s, l) != ancestor(s - 1, l)) out.push_back(s);
    out.push_back(num_species());
    return out;
  }

 private:
  void check_id(Level l, std::size_t id) const {
    if (id >= size(l))
      throw ConfigError(std::string(level_name(l)) + " id " + std::to_string(id) +
                        " out of range (" + std::to_string(size(l)) + " nodes)");
  }

  std::array<std::vector<std::string>, kNumLevels> names_;
  std::array<std::unordered_map<std::string, std::size_t>, kNumLevels> index_;
  // parents_[l][id] for l in [species, klass]; parents_[phylum] is empty.
  std::array<std::vector<std::size_t>, kNumLevels> parents_;
  std::array<std::vector<std::vector<std::size_t>>, kNumLevels> children_;
  std::vector<std::array<std::size_t, kNumLevels>> ancestors_;
};

inline TaxonomyTree TaxonomyTree::build(std::span<const TaxonRecord> records) {
  if (records.empty()) throw DataError("cannot build a taxonomy from zero records");

  // Per level: name -> parent name. Children sets keyed by name, sorted.
  std::array<std::map<std::string, std::string>, kNumLevels> parent_of;
  std::array<std::map<std::string, std::vector<std::string>>, kNumLevels> kids;
  for (const auto& r : records) {
    for (Level l : kAllLevels)
      if (r.at(l).empty())
        throw DataError("species '" + r.species() + "' has an empty " +
                        std::string(level_name(l)) + " name");
    if (parent_of[0].count(r.species()))
      throw DataError("duplicate species '" + r.species() + "'");
    for (int l = 0; l + 1 < kNumLevels; ++l) {
      const auto& child = r.names[l];
      const auto& par = r.names[l + 1];
      auto [it, inserted] = parent_of[l].emplace(child, par);
      if (inserted) {
        kids[l + 1][par].push_back(child);
      } else if (it->second != par) {
        throw DataError("lineage conflict: " + std::string(level_name(level_from_index(l))) +
                        " '" + child + "' is placed under both " +
                        std::string(level_name(level_from_index(l + 1))) + " '" + it->second +
                        "' and '" + par + "'");
      }
    }
    parent_of[kNumLevels - 1].emplace(r.names[kNumLevels - 1], std::string{});
  }

  TaxonomyTree tree;
  // Depth-first walk with lexicographic sibling order (std::map keys are
  // already sorted; child lists are sorted explicitly).
  auto visit = [&](auto&& self, int level, const std::string& nm) -> std::size_t {
    auto id = tree.names_[level].size();
    tree.names_[level].push_back(nm);
    tree.index_[level].emplace(nm, id);
    if (level > 0) {
      tree.children_[level].emplace_back();
      auto ks = kids[level][nm];
      std::sort(ks.begin(), ks.end());
      for (const auto& k : ks) {
        auto cid = self(self, level - 1, k);
        tree.children_[level][id].push_back(cid);
      }
    }
    return id;
  };
  for (const auto& [phylum, unused] : parent_of[kNumLevels - 1]) visit(visit, kNumLevels - 1, phylum);

  for (int l = 0; l + 1 < kNumLevels; ++l) {
    tree.parents_[l].assign(tree.names_[l].size(), 0);
    for (std::size_t p = 0; p < tree.children_[l + 1].size(); ++p)
      for (auto c : tree.children_[l + 1][p]) tree.parents_[l][c] = p;
  }
  tree.ancestors_.resize(tree.names_[0].size());
  for (std::size_t s = 0; s < tree.ancestors_.size(); ++s) {
    std::size_t id = s;
    for (int l = 0; l < kNumLevels; ++l) {
      tree.ancestors_[s][l] = id;
      if (l + 1 < kNumLevels) id = tree.parents_[l][id];
    }
  }
  return tree;
}

// ---------------------------------------------------------------------------
// Free operations

inline std::size_t ancestor_at_level(const TaxonomyTree& tree, std::size_t species, Level l) {
  return tree.ancestor(species, l);
}

// Sums a distribution over level-l classes into level-(l+1) classes:
// out[i] = sum of dist[j] over children j of i.
inline ScoreDistribution marginalise(const TaxonomyTree& tree, const ScoreDistribution& dist) {
  if (dist.level == Level::phylum) throw ConfigError("cannot marginalise above phylum");
  if (dist.values.size() != tree.size(dist.level))
    throw ConfigError("distribution has " + std::to_string(dist.values.size()) +
                      " entries but level " + std::string(level_name(dist.level)) + " has " +
                      std::to_string(tree.size(dist.level)) + " classes");
  Level up = level_from_index(level_index(dist.level) + 1);
  ScoreDistribution out{up, std::vector<double>(tree.size(up), 0.0)};
  const auto& parents = tree.parent_map(dist.level);
  for (std::size_t j = 0; j < dist.values.size(); ++j) out.values[parents[j]] += dist.values[j];
  return out;
}

// Element l is the distribution at level l; element 0 is the input itself.
inline std::vector<ScoreDistribution> marginalise_all(const TaxonomyTree& tree,
                                                      const ScoreDistribution& species_dist) {
  if (species_dist.level != Level::species)
    throw ConfigError("marginalise_all expects a species-level distribution");
  std::vector<ScoreDistribution> out;
  out.reserve(kNumLevels);
  out.push_back(species_dist);
  if (species_dist.values.size() != tree.num_species())
    throw ConfigError("distribution length " + std::to_string(species_dist.values.size()) +
                      " does not match species count " + std::to_string(tree.num_species()));
  while (out.back().level != Level::phylum) out.push_back(marginalise(tree, out.back()));
  return out;
}

// ---------------------------------------------------------------------------
// Taxonomy file: header species,genus,family,order,class,phylum

inline std::vector<TaxonRecord> read_taxonomy_records(std::istream& in) {
  auto table = csv::parse(in);
  std::array<int, kNumLevels> col{};
  for (Level l : kAllLevels) {
    col[level_index(l)] = table.column(level_name(l));
    if (col[level_index(l)] < 0)
      throw DataError("taxonomy file is missing column '" + std::string(level_name(l)) + "'");
  }
  std::vector<TaxonRecord> out;
  for (const auto& [line, fields] : table.rows) {
    TaxonRecord r;
    for (int l = 0; l < kNumLevels; ++l) {
      if (col[l] >= static_cast<int>(fields.size()))
        throw DataError("taxonomy file line " + std::to_string(line) + ": too few fields");
      r.names[l] = fields[col[l]];
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<TaxonRecord> read_taxonomy_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open taxonomy file: " + path);
  return read_taxonomy_records(in);
}

inline void write_taxonomy_records(std::ostream& out, std::span<const TaxonRecord> records) {
  for (int l = 0; l < kNumLevels; ++l) out << (l ? "," : "") << level_name(level_from_index(l));
  out << '\n';
  for (const auto& r : records) {
    for (int l = 0; l < kNumLevels; ++l) out << (l ? "," : "") << csv::quote_if_needed(r.names[l]);
    out << '\n';
  }
}

}  // namespace taxofuse
