#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxofuse/error.hpp"
#include "taxofuse/taxonomy.hpp"

namespace taxofuse {

using Posteriors = std::vector<std::vector<double>>;

// Position of `label` when classes are sorted by descending score, ties
// broken by ascending class index (0 = best).
inline std::size_t rank_of(std::span<const double> scores, std::size_t label) {
  if (label >= scores.size()) throw ShapeError("label " + std::to_string(label) + " outside score vector");
  const double s = scores[label];
  std::size_t rank = 0;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > s || (scores[j] == s && j < label)) ++rank;
  return rank;
}

// Highest-scoring class, lowest index on ties.
inline std::size_t argmax(std::span<const double> scores) {
  if (scores.empty()) throw ShapeError("argmax of an empty vector");
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

inline double micro_accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.empty()) throw DataError("accuracy of an empty evaluation set");
  if (predictions.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(labels.size());
}

// Per-class hit rates from per-sample hits, averaged over classes present.
inline double macro_average(std::span<const char> hits, std::span<const std::size_t> labels) {
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> per;  // class -> (hits, total)
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& e = per[labels[i]];
    e.first += hits[i] ? 1 : 0;
    ++e.second;
  }
  if (per.empty()) throw DataError("macro average of an empty evaluation set");
  double sum = 0.0;
  for (const auto& [c, e] : per) sum += static_cast<double>(e.first) / static_cast<double>(e.second);
  return 100.0 * sum / static_cast<double>(per.size());
}

// Macro top-k over classes present in labels.
inline double macro_topk(std::span<const std::vector<double>> scores, std::span<const std::size_t> labels,
                         std::size_t k) {
  if (scores.size() != labels.size()) throw ShapeError("posteriors and labels differ in length");
  if (scores.empty()) throw DataError("macro top-k of an empty evaluation set");
  if (k == 0 || k > scores[0].size())
    throw ConfigError("top-k with k = " + std::to_string(k) + " but only " + std::to_string(scores[0].size()) +
                      " classes");
  std::vector<char> hits(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) hits[i] = rank_of(scores[i], labels[i]) < k;
  return macro_average(hits, labels);
}

struct LevelMetrics {
  Level level = Level::species;
  std::size_t classes = 0;
  double accuracy = 0.0;  // micro, %
  double top1 = 0.0, top3 = 0.0, top5 = 0.0;  // macro, %; k clamped to the class count
  std::size_t samples = 0;
};

using MetricsReport = std::vector<LevelMetrics>;

// Ranks and predictions at one level from per-sample level-class scores.
inline LevelMetrics level_metrics_from_ranks(Level level, std::size_t classes, std::span<const std::size_t> ranks,
                                             std::span<const std::size_t> labels) {
  LevelMetrics m;
  m.level = level;
  m.classes = classes;
  m.samples = labels.size();
  std::vector<char> h(ranks.size());
  auto at_k = [&](std::size_t k) {
    k = std::min(k, classes);
    for (std::size_t i = 0; i < ranks.size(); ++i) h[i] = ranks[i] < k;
    return macro_average(h, labels);
  };
  std::size_t hit = 0;
  for (auto r : ranks) hit += r == 0;
  m.accuracy = 100.0 * static_cast<double>(hit) / static_cast<double>(ranks.size());
  m.top1 = at_k(1);
  m.top3 = at_k(3);
  m.top5 = at_k(5);
  return m;
}

inline LevelMetrics species_metrics(std::span<const std::vector<double>> posteriors, std::span<const std::size_t> labels) {
  if (posteriors.empty()) throw DataError("evaluation set is empty");
  if (posteriors.size() != labels.size()) throw ShapeError("posteriors and labels differ in length");
  std::vector<std::size_t> ranks(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) ranks[i] = rank_of(posteriors[i], labels[i]);
  return level_metrics_from_ranks(Level::species, posteriors[0].size(), ranks, labels);
}

// How a species posterior is turned into coarser predictions.
//   marginalise: sum the posterior within each taxon and rank the sums.
//   ancestor:    walk the species ranking and rank taxa by first appearance
//                (top-1 is the ancestor of the species argmax).
enum class Rollup { marginalise, ancestor };

inline std::string_view rollup_name(Rollup r) { return r == Rollup::marginalise ? "marginalise" : "ancestor"; }

inline Rollup parse_rollup(std::string_view s) {
  if (s == "marginalise") return Rollup::marginalise;
  if (s == "ancestor") return Rollup::ancestor;
  throw ConfigError("unknown rollup mode '" + std::string(s) + "' (expected marginalise or ancestor)");
}

// Ordered level-l classes for one species posterior.
inline std::vector<std::size_t> level_ranking(std::span<const double> posterior, const TaxonomyTree& taxonomy,
                                              Level level, Rollup mode) {
  const std::size_t nl = taxonomy.size(level);
  std::vector<std::size_t> order;
  order.reserve(nl);
  if (mode == Rollup::marginalise) {
    std::vector<double> mass(nl, 0.0);
    for (std::size_t s = 0; s < posterior.size(); ++s) mass[taxonomy.ancestor(s, level)] += posterior[s];
    order.resize(nl);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
    return order;
  }
  std::vector<std::size_t> sp(posterior.size());
  std::iota(sp.begin(), sp.end(), std::size_t{0});
  std::stable_sort(sp.begin(), sp.end(), [&](std::size_t a, std::size_t b) { return posterior[a] > posterior[b]; });
  std::vector<char> seen(nl, 0);
  for (auto s : sp) {
    auto a = taxonomy.ancestor(s, level);
    if (!seen[a]) {
      seen[a] = 1;
      order.push_back(a);
    }
  }
  return order;
}

inline std::size_t level_rank(std::span<const double> posterior, const TaxonomyTree& taxonomy, Level level,
                              Rollup mode, std::size_t level_label) {
  auto order = level_ranking(posterior, taxonomy, level, mode);
  auto it = std::find(order.begin(), order.end(), level_label);
  return static_cast<std::size_t>(it - order.begin());
}

inline std::size_t level_prediction(std::span<const double> posterior, const TaxonomyTree& taxonomy, Level level,
                                    Rollup mode) {
  return level_ranking(posterior, taxonomy, level, mode).front();
}

// Six rows, species..phylum, against ancestor labels of the species labels.
inline MetricsReport per_level_metrics(std::span<const std::vector<double>> posteriors,
                                       std::span<const std::size_t> labels, const TaxonomyTree& taxonomy,
                                       Rollup mode) {
  if (posteriors.empty()) throw DataError("evaluation set is empty");
  if (posteriors.size() != labels.size()) throw ShapeError("posteriors and labels differ in length");
  MetricsReport out;
  for (Level l : kAllLevels) {
    std::vector<std::size_t> ranks(labels.size()), level_labels(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      level_labels[i] = taxonomy.ancestor(labels[i], l);
      ranks[i] = l == Level::species ? rank_of(posteriors[i], labels[i])
                                     : level_rank(posteriors[i], taxonomy, l, mode, level_labels[i]);
    }
    out.push_back(level_metrics_from_ranks(l, taxonomy.size(l), ranks, level_labels));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Unseen species

struct UnseenLevelResult {
  Level level = Level::genus;
  std::optional<double> accuracy;  // nullopt at species level, or if nothing evaluable
  std::optional<double> chance;    // most-common-class frequency, %
  std::size_t evaluated = 0;       // observations whose ancestor exists in the model taxonomy
  std::size_t skipped = 0;         // observations whose ancestor is absent
  bool uninformative = false;      // a single class among evaluated observations
};

struct UnseenReport {
  std::vector<UnseenLevelResult> levels;  // species..phylum
  std::size_t observations = 0;
  std::size_t flagged = 0;  // observations skipped at one or more levels
};

// posteriors are over the model taxonomy's species; lineages are the true
// (full-taxonomy) lineages of the unseen observations.
inline UnseenReport unseen_species_eval(std::span<const std::vector<double>> posteriors,
                                        std::span<const TaxonRecord> lineages, const TaxonomyTree& model_taxonomy,
                                        Rollup mode = Rollup::marginalise) {
  if (posteriors.size() != lineages.size()) throw ShapeError("posteriors and lineages differ in length");
  UnseenReport rep;
  rep.observations = lineages.size();
  std::vector<char> flagged(lineages.size(), 0);
  rep.levels.push_back({Level::species, std::nullopt, std::nullopt, 0, 0, false});
  for (int li = 1; li < kNumLevels; ++li) {
    Level l = level_from_index(li);
    UnseenLevelResult r;
    r.level = l;
    std::map<std::size_t, std::size_t> freq;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < lineages.size(); ++i) {
      auto truth = model_taxonomy.find(l, lineages[i].at(l));
      if (!truth) {
        ++r.skipped;
        flagged[i] = 1;
        continue;
      }
      ++r.evaluated;
      ++freq[*truth];
      hit += level_prediction(posteriors[i], model_taxonomy, l, mode) == *truth;
    }
    if (r.evaluated > 0) {
      r.accuracy = 100.0 * static_cast<double>(hit) / static_cast<double>(r.evaluated);
      std::size_t top = 0;
      for (const auto& [c, n] : freq) top = std::max(top, n);
      r.chance = 100.0 * static_cast<double>(top) / static_cast<double>(r.evaluated);
      r.uninformative = freq.size() == 1;
    }
    rep.levels.push_back(r);
  }
  rep.flagged = static_cast<std::size_t>(std::count(flagged.begin(), flagged.end(), 1));
  return rep;
}

// ---------------------------------------------------------------------------
// Confusion matrix

// Rows are true species, columns predicted species, both in taxonomy
// (depth-first) order.
struct ConfusionMatrix {
  std::size_t n = 0;
  std::vector<std::size_t> counts;

  std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * n + pred]; }
  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
  std::size_t row_sum(std::size_t truth) const {
    return std::accumulate(counts.begin() + static_cast<long>(truth * n),
                           counts.begin() + static_cast<long>((truth + 1) * n), std::size_t{0});
  }
};

inline ConfusionMatrix confusion_matrix(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                                        const TaxonomyTree& taxonomy) {
  if (predictions.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
  ConfusionMatrix cm;
  cm.n = taxonomy.num_species();
  cm.counts.assign(cm.n * cm.n, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= cm.n || predictions[i] >= cm.n) throw ShapeError("species id out of range in confusion matrix");
    ++cm.counts[labels[i] * cm.n + predictions[i]];
  }
  return cm;
}

// Share of off-diagonal mass whose predicted species lies in the true genus.
inline std::optional<double> within_genus_error_fraction(const ConfusionMatrix& cm, const TaxonomyTree& taxonomy) {
  std::size_t off = 0, within = 0;
  for (std::size_t t = 0; t < cm.n; ++t)
    for (std::size_t p = 0; p < cm.n; ++p) {
      if (t == p) continue;
      off += cm.at(t, p);
      if (taxonomy.ancestor(t, Level::genus) == taxonomy.ancestor(p, Level::genus)) within += cm.at(t, p);
    }
  if (off == 0) return std::nullopt;
  return static_cast<double>(within) / static_cast<double>(off);
}

inline void write_confusion_counts(std::ostream& out, const ConfusionMatrix& cm) {
  for (std::size_t t = 0; t < cm.n; ++t) {
    for (std::size_t p = 0; p < cm.n; ++p) out << (p ? "," : "") << cm.at(t, p);
    out << '\n';
  }
}

// Sidecar: one "index,species" row per matrix row, then one
// "#boundaries <level>: i0 i1 ..." line per level (block start indices
// followed by the species count).
inline void write_confusion_order(std::ostream& out, const TaxonomyTree& taxonomy) {
  out << "index,species\n";
  for (std::size_t s = 0; s < taxonomy.num_species(); ++s)
    out << s << ',' << taxonomy.name(Level::species, s) << '\n';
  for (Level l : kAllLevels) {
    out << "#boundaries " << level_name(l) << ':';
    for (auto b : taxonomy.block_starts(l)) out << ' ' << b;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Accuracy by training-frequency band

struct FrequencyBand {
  std::size_t lo = 0;
  std::size_t hi = std::numeric_limits<std::size_t>::max();  // exclusive

  bool contains(std::size_t n) const { return n >= lo && n < hi; }
  std::string label() const {
    return std::to_string(lo) + "-" + (hi == std::numeric_limits<std::size_t>::max() ? std::string("inf") : std::to_string(hi));
  }
};

inline std::vector<FrequencyBand> default_frequency_bands() {
  return {{10, 50}, {50, 100}, {100, 500}, {500, std::numeric_limits<std::size_t>::max()}};
}

struct BandResult {
  FrequencyBand band;
  std::size_t species = 0;  // species with evaluation samples in this band
  std::optional<double> model_accuracy, baseline_accuracy, delta;  // absent when the band is empty
};

// Per-species top-1 hit rate (%), for species present in labels.
inline std::map<std::size_t, double> per_species_accuracy(std::span<const std::vector<double>> posteriors,
                                                          std::span<const std::size_t> labels) {
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> acc;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& e = acc[labels[i]];
    e.first += argmax(posteriors[i]) == labels[i];
    ++e.second;
  }
  std::map<std::size_t, double> out;
  for (const auto& [c, e] : acc) out[c] = 100.0 * static_cast<double>(e.first) / static_cast<double>(e.second);
  return out;
}

// image_counts[s] is the number of images of species s in the dataset.
inline std::vector<BandResult> accuracy_by_frequency_band(std::span<const std::vector<double>> model,
                                                          std::span<const std::vector<double>> baseline,
                                                          std::span<const std::size_t> labels,
                                                          std::span<const std::size_t> image_counts,
                                                          const std::vector<FrequencyBand>& bands) {
  if (model.size() != labels.size() || baseline.size() != labels.size())
    throw ShapeError("model, baseline and labels must have equal lengths");
  auto m = per_species_accuracy(model, labels);
  auto b = per_species_accuracy(baseline, labels);
  std::vector<BandResult> out;
  for (const auto& band : bands) {
    BandResult r;
    r.band = band;
    double ms = 0.0, bs = 0.0;
    for (const auto& [s, acc] : m) {
      if (s >= image_counts.size()) throw ShapeError("species without an image count");
      if (!band.contains(image_counts[s])) continue;
      ++r.species;
      ms += acc;
      bs += b.at(s);
    }
    if (r.species > 0) {
      r.model_accuracy = ms / static_cast<double>(r.species);
      r.baseline_accuracy = bs / static_cast<double>(r.species);
      r.delta = *r.model_accuracy - *r.baseline_accuracy;
    }
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report writers

inline std::string fmt_percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// key=value text, one metric per line.
inline void write_metrics_text(std::ostream& out, const MetricsReport& rep, const std::string& prefix = "") {
  for (const auto& m : rep) {
    const std::string k = prefix + std::string(level_name(m.level)) + ".";
    out << k << "classes=" << m.classes << '\n'
        << k << "samples=" << m.samples << '\n'
        << k << "accuracy=" << fmt_percent(m.accuracy) << '\n'
        << k << "top1=" << fmt_percent(m.top1) << '\n'
        << k << "top3=" << fmt_percent(m.top3) << '\n'
        << k << "top5=" << fmt_percent(m.top5) << '\n';
  }
}

inline nlohmann::json metrics_json(const MetricsReport& rep) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& m : rep)
    j.push_back({{"level", level_name(m.level)},
                 {"classes", m.classes},
                 {"samples", m.samples},
                 {"accuracy", m.accuracy},
                 {"top1", m.top1},
                 {"top3", m.top3},
                 {"top5", m.top5}});
  return j;
}

inline void write_unseen_text(std::ostream& out, const UnseenReport& rep) {
  out << "unseen.observations=" << rep.observations << '\n' << "unseen.flagged=" << rep.flagged << '\n';
  for (const auto& r : rep.levels) {
    const std::string k = "unseen." + std::string(level_name(r.level)) + ".";
    out << k << "accuracy=" << (r.accuracy ? fmt_percent(*r.accuracy) : "-") << '\n'
        << k << "chance=" << (r.chance ? fmt_percent(*r.chance) : "-") << '\n'
        << k << "evaluated=" << r.evaluated << '\n'
        << k << "skipped=" << r.skipped << '\n';
    if (r.uninformative) out << k << "uninformative=1\n";
  }
}

inline nlohmann::json unseen_json(const UnseenReport& rep) {
  nlohmann::json j;
  j["observations"] = rep.observations;
  j["flagged"] = rep.flagged;
  for (const auto& r : rep.levels) {
    nlohmann::json e{{"evaluated", r.evaluated}, {"skipped", r.skipped}, {"uninformative", r.uninformative}};
    e["accuracy"] = r.accuracy ? nlohmann::json(*r.accuracy) : nlohmann::json("-");
    e["chance"] = r.chance ? nlohmann::json(*r.chance) : nlohmann::json("-");
    j["levels"][std::string(level_name(r.level))] = e;
  }
  return j;
}

}  // namespace taxofuse
