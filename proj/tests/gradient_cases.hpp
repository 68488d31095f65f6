#pragma once

// Finite-difference cases for every tape op and both species losses.

#include <random>
#include <string>
#include <vector>

#include "support.hpp"
#include "taxofuse/model/fusion.hpp"

namespace testing_support {

struct GradientCase {
  std::string name;
  std::vector<Tensor> inputs;
  ScalarFn f;
};

// Values bounded away from zero, for ops with a kink at 0.
inline Tensor away_from_zero(std::mt19937_64& rng, taxofuse::nd::Shape shape) {
  Tensor t = random_tensor(rng, std::move(shape), 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.values())
    if (sign(rng)) v = -v;
  return t;
}

inline std::vector<GradientCase> gradient_cases() {
  std::mt19937_64 rng(20240611);
  std::vector<GradientCase> cases;
  auto add = [&](std::string name, std::vector<Tensor> in, ScalarFn f) {
    cases.push_back({std::move(name), std::move(in), std::move(f)});
  };

  add("dense", {random_tensor(rng, {3, 4}), random_tensor(rng, {5, 4}), random_tensor(rng, {5})},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.dense(v[0], v[1], v[2])); });
  add("conv2d_same", {random_tensor(rng, {2, 2, 5, 5}), random_tensor(rng, {3, 2, 3, 3}), random_tensor(rng, {3})},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.conv2d(v[0], v[1], v[2], 1, 1)); });
  add("conv2d_strided", {random_tensor(rng, {1, 2, 6, 6}), random_tensor(rng, {2, 2, 3, 3}), random_tensor(rng, {2})},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.conv2d(v[0], v[1], v[2], 2, 0)); });
  add("max_pool2d", {random_tensor(rng, {2, 2, 4, 4})},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.max_pool2d(v[0], 2)); });
  add("avg_pool2d", {random_tensor(rng, {2, 2, 4, 4})},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.avg_pool2d(v[0], 2)); });
  add("global_avg_pool", {random_tensor(rng, {2, 3, 3, 3})},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.global_avg_pool(v[0])); });
  add("concat", {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 2})}, [](Tape& t, const std::vector<Var>& v) {
    std::vector<Var> parts{v[0], v[1]};
    return reduce_to_scalar(t, t.concat(parts));
  });
  add("flatten", {random_tensor(rng, {2, 2, 2, 2})},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.flatten(v[0])); });
  add("relu", {away_from_zero(rng, {3, 4})},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.relu(v[0])); });
  add("sigmoid", {random_tensor(rng, {3, 4}, -3, 3)},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.sigmoid(v[0])); });
  add("log_sigmoid", {random_tensor(rng, {3, 4}, -3, 3)},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.log_sigmoid(v[0])); });
  add("scale", {random_tensor(rng, {2, 3})},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.scale(v[0], -1.7)); });
  add("add", {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.add(v[0], v[1])); });
  add("dropout", {random_tensor(rng, {4, 5})}, [](Tape& t, const std::vector<Var>& v) {
    taxofuse::nd::Rng mask_rng(7);  // identical mask on every evaluation
    return reduce_to_scalar(t, t.dropout(v[0], 0.5, true, mask_rng));
  });
  add("softmax", {random_tensor(rng, {3, 5}, -2, 2)},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.softmax(v[0])); });
  add("log_softmax", {random_tensor(rng, {3, 5}, -2, 2)},
      [](Tape& t, const std::vector<Var>& v) { return reduce_to_scalar(t, t.log_softmax(v[0])); });
  add("group_logsumexp", {random_tensor(rng, {3, 6}, -2, 2)}, [](Tape& t, const std::vector<Var>& v) {
    return reduce_to_scalar(t, t.group_logsumexp(v[0], {0, 0, 1, 2, 2, 2}, 3));
  });
  add("nll", {random_tensor(rng, {4, 5}, -2, 2)}, [](Tape& t, const std::vector<Var>& v) {
    std::vector<std::size_t> labels{0, 3, 4, 1};
    return t.nll(t.log_softmax(v[0]), labels);
  });
  add("bce_with_logits", {random_tensor(rng, {3, 4}, -3, 3)}, [](Tape& t, const std::vector<Var>& v) {
    Tensor y({3, 4}, std::vector<double>{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1});
    return t.bce_with_logits(v[0], y);
  });
  add("sum", {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})}, [](Tape& t, const std::vector<Var>& v) {
    std::vector<Var> parts{reduce_to_scalar(t, v[0]), t.scale(reduce_to_scalar(t, v[1]), 2.0)};
    return t.sum(parts);
  });
  add("late_fusion_posterior", {random_tensor(rng, {3, 6}, -2, 2), random_tensor(rng, {3, 6}, -2, 2)},
      [](Tape& t, const std::vector<Var>& v) {
        std::vector<std::size_t> labels{1, 4, 5};
        return t.nll(t.log_softmax(t.add(v[0], t.log_sigmoid(v[1]))), labels);
      });
  add("cross_entropy_loss", {random_tensor(rng, {4, 6}, -2, 2)}, [](Tape& t, const std::vector<Var>& v) {
    static const TaxonomyTree tree = toy_tree();
    std::vector<std::size_t> labels{0, 2, 5, 3};
    return taxofuse::species_loss(t, t.log_softmax(v[0]), labels, taxofuse::LossKind::cross_entropy, tree);
  });
  add("marginalisation_loss", {random_tensor(rng, {4, 6}, -2, 2)}, [](Tape& t, const std::vector<Var>& v) {
    static const TaxonomyTree tree = toy_tree();
    std::vector<std::size_t> labels{0, 2, 5, 3};
    return taxofuse::species_loss(t, t.log_softmax(v[0]), labels, taxofuse::LossKind::marginalisation, tree,
                                  Level::family);
  });
  return cases;
}

// The marginalisation loss differentiated on the tape against central
// differences of the probability-domain loss built on marginalise_all
// (species, genus, family of the toy tree). Returns the largest relative
// error over all logits.
inline double marginalisation_cross_check(double h = 1e-5) {
  const TaxonomyTree tree = toy_tree();
  std::mt19937_64 rng(99);
  Tensor logits = random_tensor(rng, {3, 6}, -2, 2);
  const std::vector<std::size_t> labels{1, 2, 4};

  auto reference = [&](const Tensor& z) {
    double total = 0.0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
      std::vector<double> row(z.values().begin() + static_cast<long>(r * 6),
                              z.values().begin() + static_cast<long>((r + 1) * 6));
      total += taxofuse::marginalisation_loss(taxofuse::softmax(row), labels[r], tree, Level::family);
    }
    return total / static_cast<double>(labels.size());
  };

  Tape t;
  Var z = t.constant(logits);
  Var loss = taxofuse::species_loss(t, t.log_softmax(z), labels, taxofuse::LossKind::marginalisation, tree,
                                    Level::family);
  t.backward(loss);
  const Tensor analytic = t.grad(z);
  double worst = std::abs(t.value(loss)[0] - reference(logits));
  for (std::size_t i = 0; i < logits.size(); ++i) {
    Tensor up = logits, down = logits;
    up[i] += h;
    down[i] -= h;
    const double numeric = (reference(up) - reference(down)) / (2 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6}));
  }
  return worst;
}

}  // namespace testing_support
