#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "taxofuse/error.hpp"
#include "taxofuse/ndiff/tape.hpp"
#include "taxofuse/taxonomy.hpp"

namespace taxofuse {

inline constexpr double kProbabilityFloor = 1e-12;

inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax of an empty vector");
  double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - m));
  for (auto& v : p) v /= z;
  return p;
}

// Normalizes a vector of log-weights into a probability vector.
inline std::vector<double> normalize_log(std::span<const double> logw) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logw) m = std::max(m, v);
  if (!std::isfinite(m))
    throw DataError("fused posterior is degenerate: every class has zero probability under the product of branches");
  std::vector<double> p(logw.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logw[i] - m));
  for (auto& v : p) v /= z;
  return p;
}

// Late fusion: softmax(image_logits) scaled per class by the context
// presence probabilities (and satellite ones when given), renormalized.
// Evaluated in the log domain.
inline std::vector<double> fuse_late(std::span<const double> image_logits, std::span<const double> context_probs,
                                     std::optional<std::span<const double>> satellite_probs = std::nullopt) {
  const std::size_t c = image_logits.size();
  if (context_probs.size() != c || (satellite_probs && satellite_probs->size() != c))
    throw ShapeError("branch outputs disagree on the number of classes");
  std::vector<double> logw(c);
  double m = *std::max_element(image_logits.begin(), image_logits.end());
  for (std::size_t i = 0; i < c; ++i) {
    logw[i] = image_logits[i] - m + std::log(context_probs[i]);
    if (satellite_probs) logw[i] += std::log((*satellite_probs)[i]);
  }
  return normalize_log(logw);
}

// Separate training at inference: the same product rule, with a graceful
// image-only fallback when the context is missing.
inline std::vector<double> infer_separate(std::span<const double> image_logits,
                                          std::optional<std::span<const double>> context_probs) {
  if (!context_probs) return softmax(image_logits);
  return fuse_late(image_logits, *context_probs);
}

// -log p(label), with p floored at 1e-12 (a warning is printed once per call
// that hits the floor).
inline double cross_entropy(std::span<const double> posterior, std::size_t label) {
  if (label >= posterior.size())
    throw ShapeError("label " + std::to_string(label) + " outside posterior of size " + std::to_string(posterior.size()));
  double p = posterior[label];
  if (!(p >= kProbabilityFloor)) {
    std::fprintf(stderr, "warning: probability of the true class %.3g clamped to %.0e\n", p, kProbabilityFloor);
    p = kProbabilityFloor;
  }
  return -std::log(p);
}

// Batch mean of cross_entropy.
inline double cross_entropy(std::span<const std::vector<double>> posteriors, std::span<const std::size_t> labels) {
  if (posteriors.size() != labels.size() || posteriors.empty())
    throw ShapeError("cross_entropy needs one label per posterior");
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) s += cross_entropy(posteriors[i], labels[i]);
  return s / static_cast<double>(labels.size());
}

// Sum over levels species..top of the cross-entropy of the marginalised
// posterior against the ancestor label at that level.
inline double marginalisation_loss(std::span<const double> species_posterior, std::size_t species_label,
                                   const TaxonomyTree& taxonomy, Level top = Level::phylum) {
  ScoreDistribution d{Level::species, {species_posterior.begin(), species_posterior.end()}};
  auto levels = marginalise_all(taxonomy, d);
  double total = 0.0;
  for (int l = 0; l <= level_index(top); ++l)
    total += cross_entropy(levels[l].values, taxonomy.ancestor(species_label, level_from_index(l)));
  return total;
}

enum class LossKind { cross_entropy, marginalisation };

inline std::string_view loss_name(LossKind k) {
  return k == LossKind::cross_entropy ? "cross_entropy" : "marginalisation";
}

inline LossKind parse_loss(std::string_view s) {
  if (s == "ce" || s == "cross_entropy") return LossKind::cross_entropy;
  if (s == "marginalisation" || s == "mar" || s == "hierarchy") return LossKind::marginalisation;
  throw ConfigError("unknown loss '" + std::string(s) + "' (expected cross_entropy or marginalisation)");
}

// Tape version of the training objective on species log-posteriors [N, C].
// Coarser levels come from log-sum-exp over each parent's children.
inline nd::Var species_loss(nd::Tape& t, nd::Var logp, std::span<const std::size_t> labels, LossKind kind,
                            const TaxonomyTree& taxonomy, Level top = Level::phylum) {
  if (kind == LossKind::cross_entropy || top == Level::species) return t.nll(logp, labels);
  std::vector<nd::Var> terms{t.nll(logp, labels)};
  std::vector<std::size_t> level_labels(labels.begin(), labels.end());
  nd::Var cur = logp;
  for (int l = 0; l < level_index(top); ++l) {
    Level from = level_from_index(l), to = level_from_index(l + 1);
    const auto& parents = taxonomy.parent_map(from);
    cur = t.group_logsumexp(cur, parents, taxonomy.size(to));
    for (auto& y : level_labels) y = parents[y];
    terms.push_back(t.nll(cur, level_labels));
  }
  return t.sum(terms);
}

}  // namespace taxofuse
