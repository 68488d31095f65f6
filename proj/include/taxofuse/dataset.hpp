#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "taxofuse/csv.hpp"
#include "taxofuse/encoding.hpp"
#include "taxofuse/error.hpp"
#include "taxofuse/ndiff/tensor.hpp"
#include "taxofuse/taxonomy.hpp"

namespace taxofuse {

struct Observation {
  std::string id;
  std::string image_ref;  // file path, or "synth:<prototype>:<noise seed>"
  RawContext context;
  std::string species;
  std::optional<std::string> patch_ref;
};

struct RowRejection {
  std::size_t line = 0;
  std::string reason;
};

struct ParsedObservations {
  std::vector<Observation> observations;
  std::vector<RowRejection> rejected;
};

inline constexpr std::array<std::string_view, 7> kObservationColumns = {
    "id", "image_path", "longitude", "latitude", "altitude", "day_of_year", "species"};

namespace dataset_detail {

inline std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace dataset_detail

inline ParsedObservations parse_observations(std::istream& in) {
  auto table = csv::parse(in);
  std::array<int, kObservationColumns.size()> col{};
  for (std::size_t i = 0; i < kObservationColumns.size(); ++i) {
    col[i] = table.column(kObservationColumns[i]);
    if (col[i] < 0)
      throw DataError("observation file is missing mandatory column '" + std::string(kObservationColumns[i]) + "'");
  }
  const int patch_col = table.column("patch_path");

  ParsedObservations out;
  for (const auto& [line, f] : table.rows) {
    auto field = [&f](int c) -> const std::string& {
      static const std::string empty;
      return c < static_cast<int>(f.size()) ? f[c] : empty;
    };
    std::string reason;
    Observation o;
    o.id = field(col[0]);
    o.image_ref = field(col[1]);
    o.species = field(col[6]);
    const char* names[] = {"longitude", "latitude", "altitude", "day_of_year"};
    double* targets[] = {&o.context.longitude, &o.context.latitude, &o.context.altitude, &o.context.day_of_year};
    for (int k = 0; k < 4 && reason.empty(); ++k) {
      auto v = dataset_detail::parse_double(field(col[2 + k]));
      if (!v) reason = std::string("unparseable ") + names[k] + " '" + field(col[2 + k]) + "'";
      else *targets[k] = *v;
    }
    if (reason.empty() && (o.context.longitude < -180 || o.context.longitude > 180))
      reason = "longitude out of [-180, 180]";
    if (reason.empty() && (o.context.latitude < -90 || o.context.latitude > 90)) reason = "latitude out of [-90, 90]";
    if (reason.empty() && o.context.day_of_year < 0) reason = "negative day_of_year";
    if (reason.empty() && o.species.empty()) reason = "empty species";
    if (reason.empty() && o.id.empty()) reason = "empty id";
    if (!reason.empty()) {
      out.rejected.push_back({line, reason});
      continue;
    }
    if (patch_col >= 0 && !field(patch_col).empty()) o.patch_ref = field(patch_col);
    out.observations.push_back(std::move(o));
  }
  return out;
}

inline ParsedObservations parse_observations_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open observation file: " + path);
  return parse_observations(in);
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline void write_observations(std::ostream& out, std::span<const Observation> obs) {
  for (std::size_t i = 0; i < kObservationColumns.size(); ++i) out << (i ? "," : "") << kObservationColumns[i];
  out << '\n';
  for (const auto& o : obs) {
    out << csv::quote_if_needed(o.id) << ',' << csv::quote_if_needed(o.image_ref) << ','
        << format_double(o.context.longitude) << ',' << format_double(o.context.latitude) << ','
        << format_double(o.context.altitude) << ',' << format_double(o.context.day_of_year) << ','
        << csv::quote_if_needed(o.species) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Filtering and splitting

struct SplitConfig {
  std::size_t min_count = 10;    // species with at least this many images are kept
  std::size_t unseen_min = 6;    // species with [unseen_min, min_count) images form the unseen set
  std::size_t unseen_take = 5;   // images drawn per unseen species
  std::uint64_t seed = 0;
};

struct DatasetSplit {
  std::vector<std::size_t> selected;  // indices into the observation list
  std::vector<std::size_t> unseen;
  std::vector<std::string> selected_species;  // sorted
  std::vector<std::string> unseen_species;    // sorted
  std::vector<std::size_t> unresolved;        // labels missing from the taxonomy
};

inline DatasetSplit filter_and_split(std::span<const Observation> obs, const TaxonomyTree& taxonomy,
                                     const SplitConfig& cfg) {
  if (cfg.min_count <= cfg.unseen_take) throw ConfigError("min_count must exceed unseen_take");
  if (cfg.unseen_min < cfg.unseen_take) throw ConfigError("unseen_min must be at least unseen_take");
  DatasetSplit split;
  std::map<std::string, std::vector<std::size_t>> by_species;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (!taxonomy.find(Level::species, obs[i].species)) {
      split.unresolved.push_back(i);
      continue;
    }
    by_species[obs[i].species].push_back(i);
  }
  nd::Rng rng(cfg.seed);
  for (auto& [name, idx] : by_species) {
    if (idx.size() >= cfg.min_count) {
      split.selected_species.push_back(name);
      split.selected.insert(split.selected.end(), idx.begin(), idx.end());
    } else if (idx.size() >= cfg.unseen_min) {
      split.unseen_species.push_back(name);
      std::shuffle(idx.begin(), idx.end(), rng);
      std::vector<std::size_t> take(idx.begin(), idx.begin() + static_cast<long>(cfg.unseen_take));
      std::sort(take.begin(), take.end());
      split.unseen.insert(split.unseen.end(), take.begin(), take.end());
    }
  }
  std::sort(split.selected.begin(), split.selected.end());
  std::sort(split.unseen.begin(), split.unseen.end());
  return split;
}

// Taxonomy restricted to the given species names (e.g. the selected set).
inline TaxonomyTree restrict_taxonomy(const TaxonomyTree& full, std::span<const std::string> species) {
  std::vector<TaxonRecord> recs;
  recs.reserve(species.size());
  for (const auto& s : species) {
    auto id = full.find(Level::species, s);
    if (!id) throw DataError("species '" + s + "' is not in the taxonomy");
    recs.push_back(full.record(*id));
  }
  return TaxonomyTree::build(recs);
}

// ---------------------------------------------------------------------------
// Balanced sampling

// W_i = 1 / (number of samples sharing label i).
inline std::vector<double> sampling_weights(std::span<const std::size_t> labels) {
  if (labels.empty()) throw DataError("sampling weights need at least one label");
  std::map<std::size_t, std::size_t> counts;
  for (auto y : labels) ++counts[y];
  std::vector<double> w(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) w[i] = 1.0 / static_cast<double>(counts[labels[i]]);
  return w;
}

// Epoch index stream: weighted draws with replacement (balanced) or a
// shuffled permutation (unbalanced). Epoch length equals the dataset size.
class EpochSampler {
 public:
  EpochSampler(std::span<const std::size_t> labels, bool balanced)
      : n_(labels.size()), balanced_(balanced) {
    if (balanced_) {
      auto w = sampling_weights(labels);
      dist_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
    }
  }

  std::vector<std::size_t> epoch(nd::Rng& rng) {
    std::vector<std::size_t> out(n_);
    if (balanced_) {
      for (auto& i : out) i = dist_(rng);
    } else {
      std::iota(out.begin(), out.end(), std::size_t{0});
      std::shuffle(out.begin(), out.end(), rng);
    }
    return out;
  }

 private:
  std::size_t n_;
  bool balanced_;
  std::discrete_distribution<std::size_t> dist_;
};

// ---------------------------------------------------------------------------
// Stratified k-fold

// Fold index per sample. Members of each class are shuffled and dealt
// round-robin; the starting fold rotates from class to class so overall fold
// sizes also stay within one of each other.
inline std::vector<std::size_t> stratified_kfold(std::span<const std::size_t> labels, std::size_t k,
                                                 std::uint64_t seed,
                                                 const std::vector<std::string>* class_names = nullptr) {
  if (k == 0) throw ConfigError("number of folds must be positive");
  std::map<std::size_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  std::vector<std::size_t> fold(labels.size(), 0);
  nd::Rng rng(seed);
  std::size_t start = 0;
  for (auto& [cls, idx] : members) {
    if (idx.size() < k) {
      std::string name = class_names && cls < class_names->size() ? (*class_names)[cls] : std::to_string(cls);
      throw DataError("class '" + name + "' has " + std::to_string(idx.size()) + " samples, fewer than " +
                      std::to_string(k) + " folds");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < idx.size(); ++j) fold[idx[j]] = (start + j) % k;
    start = (start + idx.size()) % k;
  }
  return fold;
}

}  // namespace taxofuse
