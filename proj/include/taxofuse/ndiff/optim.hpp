#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "taxofuse/ndiff/tensor.hpp"

namespace taxofuse::nd {

struct ParameterGroup {
  std::string name;
  std::vector<Parameter*> params;
  double lr = 0.0;
};

// Plain SGD: p <- p - lr * grad, then zero the gradient. Every gradient is
// checked for finiteness before any parameter moves.
inline void sgd_step(std::vector<ParameterGroup>& groups) {
  for (const auto& g : groups) {
    if (!(g.lr > 0.0)) throw ConfigError("parameter group '" + g.name + "' has non-positive learning rate");
    for (const Parameter* p : g.params)
      for (double v : p->grad.values())
        if (!std::isfinite(v)) throw DivergenceError("non-finite gradient in parameter '" + p->name + "'");
  }
  for (auto& g : groups)
    for (Parameter* p : g.params) {
      auto val = p->value.values();
      auto grad = p->grad.values();
      if (grad.size() == val.size())
        for (std::size_t i = 0; i < val.size(); ++i) val[i] -= g.lr * grad[i];
      p->zero_grad();
    }
}

// Reduce-on-plateau for a metric that should decrease (a loss).
class PlateauScheduler {
 public:
  PlateauScheduler(std::size_t patience = 5, double factor = 0.5, double min_lr = 1e-7,
                   double threshold = 1e-4)
      : patience_(patience), factor_(factor), min_lr_(min_lr), threshold_(threshold) {
    if (patience_ < 1) throw ConfigError("plateau patience must be >= 1");
    if (!(factor_ > 0.0 && factor_ < 1.0)) throw ConfigError("plateau factor must be in (0, 1)");
    if (!(min_lr_ >= 0.0)) throw ConfigError("minimum learning rate must be >= 0");
  }

  // Returns true when the learning rates were reduced.
  bool step(double metric, std::vector<ParameterGroup>& groups) {
    if (!std::isfinite(metric)) throw DivergenceError("plateau scheduler received a non-finite metric");
    history_.push_back(metric);
    // Relative improvement threshold, as in the usual reduce-on-plateau rule.
    if (metric < best_ - threshold_ * std::abs(best_) || history_.size() == 1) {
      best_ = metric;
      bad_epochs_ = 0;
      return false;
    }
    if (++bad_epochs_ < patience_) return false;
    bad_epochs_ = 0;
    bool changed = false;
    for (auto& g : groups) {
      double next = std::max(g.lr * factor_, min_lr_);
      if (next < g.lr) {
        g.lr = next;
        changed = true;
      }
    }
    return changed;
  }

  const std::vector<double>& history() const { return history_; }
  std::size_t patience() const { return patience_; }
  double factor() const { return factor_; }

 private:
  std::size_t patience_;
  double factor_;
  double min_lr_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs_ = 0;
  std::vector<double> history_;
};

}  // namespace taxofuse::nd
