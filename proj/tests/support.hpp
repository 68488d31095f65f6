#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "taxofuse/ndiff/tape.hpp"
#include "taxofuse/taxonomy.hpp"

namespace testing_support {

using taxofuse::Level;
using taxofuse::TaxonomyTree;
using taxofuse::TaxonRecord;
using taxofuse::nd::Tape;
using taxofuse::nd::Tensor;
using taxofuse::nd::Var;

inline TaxonRecord lineage(std::string sp, std::string ge, std::string fa, std::string ord, std::string cl,
                           std::string ph) {
  return TaxonRecord{{std::move(sp), std::move(ge), std::move(fa), std::move(ord), std::move(cl), std::move(ph)}};
}

// Six species, three genera, two families, one order/class/phylum.
inline std::vector<TaxonRecord> toy_records() {
  return {lineage("Parus major", "Parus", "Paridae", "Passeriformes", "Aves", "Chordata"),
          lineage("Parus minor", "Parus", "Paridae", "Passeriformes", "Aves", "Chordata"),
          lineage("Cyanistes caeruleus", "Cyanistes", "Paridae", "Passeriformes", "Aves", "Chordata"),
          lineage("Cyanistes teneriffae", "Cyanistes", "Paridae", "Passeriformes", "Aves", "Chordata"),
          lineage("Sitta europaea", "Sitta", "Sittidae", "Passeriformes", "Aves", "Chordata"),
          lineage("Sitta neumayer", "Sitta", "Sittidae", "Passeriformes", "Aves", "Chordata")};
}

inline TaxonomyTree toy_tree() { return TaxonomyTree::build(toy_records()); }

// Random tree: species attach to random genera, genera to random families,
// and so on; names are level-prefixed indices.
inline std::vector<TaxonRecord> random_records(std::mt19937_64& rng, std::size_t species,
                                               const std::array<std::size_t, 5>& coarser) {
  std::vector<std::vector<std::size_t>> parent(5);
  std::size_t below = species;
  for (int l = 0; l < 5; ++l) {
    std::size_t above = std::min(coarser[l], below);
    parent[l].resize(below);
    // Every coarse node gets at least one child.
    for (std::size_t i = 0; i < below; ++i)
      parent[l][i] = i < above ? i : std::uniform_int_distribution<std::size_t>(0, above - 1)(rng);
    std::shuffle(parent[l].begin(), parent[l].end(), rng);
    below = above;
  }
  const char* prefix[6] = {"s", "g", "f", "o", "c", "p"};
  std::vector<TaxonRecord> out;
  for (std::size_t s = 0; s < species; ++s) {
    TaxonRecord r;
    std::size_t id = s;
    r.names[0] = prefix[0] + std::to_string(id);
    for (int l = 0; l < 5; ++l) {
      id = parent[l][id];
      r.names[l + 1] = prefix[l + 1] + std::to_string(id);
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<double> random_distribution(std::mt19937_64& rng, std::size_t n) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(n);
  double s = 0;
  for (auto& x : v) s += x = e(rng);
  for (auto& x : v) x /= s;
  return v;
}

// Brute force: for every coarse class walk an explicit member list built by
// scanning the records by name.
inline std::vector<double> brute_force_marginal(const TaxonomyTree& tree, const std::vector<double>& species, Level up) {
  std::vector<double> out(tree.size(up), 0.0);
  for (std::size_t c = 0; c < out.size(); ++c) {
    std::vector<std::size_t> members;
    for (std::size_t s = 0; s < tree.num_species(); ++s)
      if (tree.record(s).at(up) == tree.name(up, c)) members.push_back(s);
    for (auto s : members) out[c] += species[s];
  }
  return out;
}

inline Tensor random_tensor(std::mt19937_64& rng, taxofuse::nd::Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Smooth scalar from any [N, ...] tensor: binary cross-entropy of its
// flattened values against fixed targets in (0, 1), so every element gets a
// distinct, non-zero gradient.
inline Var reduce_to_scalar(Tape& t, Var y) {
  Var flat = t.value(y).rank() == 2 ? y : t.flatten(y);
  const auto& v = t.value(flat);
  Tensor targets(v.shape());
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = 0.5 + 0.4 * std::sin(1.0 + 0.7 * static_cast<double>(i));
  return t.bce_with_logits(flat, targets);
}

// Central-difference check of d(scalar)/d(input) for every input element.
// Returns the largest relative error |a - n| / max(|a|, |n|, 1e-6).
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double max_relative_error(std::vector<Tensor> inputs, const ScalarFn& f, double h = 1e-5) {
  auto evaluate = [&](const std::vector<Tensor>& in, std::vector<Tensor>* grads) {
    Tape t;
    std::vector<Var> vars;
    for (const auto& x : in) vars.push_back(t.constant(x));
    Var out = f(t, vars);
    double v = t.value(out)[0];
    if (grads) {
      t.backward(out);
      grads->clear();
      for (auto x : vars) grads->push_back(t.grad(x));
    }
    return v;
  };
  std::vector<Tensor> analytic;
  evaluate(inputs, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double up = evaluate(inputs, nullptr);
      inputs[k][i] = orig - h;
      const double down = evaluate(inputs, nullptr);
      inputs[k][i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("taxofuse_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_support
