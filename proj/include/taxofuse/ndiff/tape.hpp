#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "taxofuse/ndiff/tensor.hpp"

namespace taxofuse::nd {

// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Numerically stable log(sigmoid(x)).
inline double log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Reverse-mode tape. Every op evaluates eagerly and records a closure that
// propagates the output gradient to its inputs. Ops are appended in
// topological order, so backward() is a single reverse sweep.
//
// Batched layouts: dense inputs are [N, features], images are [N, C, H, W].
class Tape {
 public:
  Var constant(Tensor t) { return push(std::move(t), nullptr, {}); }

  // Records a parameter; backward() adds its gradient into p.grad.
  Var param(Parameter& p) { return push(p.value, &p, {}); }

  // Records a read-only parameter. Its gradient stays on the tape and is
  // retrieved with gradient_of() after backward().
  Var param(const Parameter& p) {
    Var v = push(p.value, nullptr, {});
    sources_.emplace_back(&p, v.id);
    return v;
  }

  // Sum of tape gradients of every node recorded from p (zero if unused).
  Tensor gradient_of(const Parameter& p) const {
    Tensor g(p.value.shape());
    for (auto [src, id] : sources_) {
      if (src != &p) continue;
      const auto& ng = nodes_[id].grad;
      if (ng.size() != g.size()) continue;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += ng[i];
    }
    return g;
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss) {
    if (value(loss).size() != 1)
      throw ShapeError("backward() needs a scalar loss, got shape " + shape_string(value(loss).shape()));
    for (auto& n : nodes_) n.grad = Tensor(n.value.shape());
    nodes_[loss.id].grad[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[i];
      if (n.backward) n.backward();
      if (n.param) {
        if (n.param->grad.shape() != n.value.shape()) n.param->zero_grad();
        auto g = n.param->grad.values();
        auto src = n.grad.values();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += src[k];
      }
    }
  }

  // ---- layers ------------------------------------------------------------

  // y[n,o] = sum_i x[n,i] w[o,i] + b[o]
  Var dense(Var x, Var w, Var b) {
    const auto& xs = value(x).shape();
    const auto& ws = value(w).shape();
    const auto& bs = value(b).shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1] || bs.size() != 1 || bs[0] != ws[0])
      throw ShapeError("dense: input " + shape_string(xs) + " incompatible with weight " +
                       shape_string(ws) + " and bias " + shape_string(bs));
    std::size_t n = xs[0], in = xs[1], out = ws[0];
    Tensor y({n, out});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t o = 0; o < out; ++o) y[r * out + o] = value(b)[o];
    blas::gemm_nt(n, out, in, value(x).data(), value(w).data(), y.data());
    Var yv = push(std::move(y), nullptr, {x, w, b});
    node(yv).backward = [this, x, w, b, yv, n, in, out] {
      const auto& gy = grad(yv);
      blas::gemm_nn(n, in, out, gy.data(), value(w).data(), mgrad(x).data());
      blas::gemm_tn(out, in, n, gy.data(), value(x).data(), mgrad(w).data());
      auto& gb = mgrad(b);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out; ++o) gb[o] += gy[r * out + o];
    };
    return yv;
  }

  // x [N,C,H,W], w [O,C,k,k], b [O] -> [N,O,Ho,Wo]
  Var conv2d(Var x, Var w, Var b, std::size_t stride = 1, std::size_t padding = 0) {
    const auto& xs = value(x).shape();
    const auto& ws = value(w).shape();
    const auto& bs = value(b).shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || bs.size() != 1 ||
        bs[0] != ws[0] || stride == 0)
      throw ShapeError("conv2d: input " + shape_string(xs) + " incompatible with weight " +
                       shape_string(ws) + " and bias " + shape_string(bs));
    const std::size_t n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
    const std::size_t o = ws[0], k = ws[2];
    if (h + 2 * padding < k || wd + 2 * padding < k)
      throw ShapeError("conv2d: kernel " + shape_string(ws) + " larger than padded input " +
                       shape_string(xs));
    const std::size_t ho = (h + 2 * padding - k) / stride + 1;
    const std::size_t wo = (wd + 2 * padding - k) / stride + 1;
    const std::size_t ckk = c * k * k, hw = ho * wo;

    auto cols = std::make_shared<std::vector<double>>(n * ckk * hw, 0.0);
    const double* xd = value(x).data();
    for (std::size_t s = 0; s < n; ++s) {
      double* col = cols->data() + s * ckk * hw;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            double* row = col + ((ch * k + ky) * k + kx) * hw;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              auto iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                auto ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                row[oy * wo + ox] = xd[((s * c + ch) * h + iy) * wd + ix];
              }
            }
          }
    }
    Tensor y({n, o, ho, wo});
    for (std::size_t s = 0; s < n; ++s) {
      double* ys = y.data() + s * o * hw;
      for (std::size_t oc = 0; oc < o; ++oc) std::fill(ys + oc * hw, ys + (oc + 1) * hw, value(b)[oc]);
      blas::gemm_nn(o, hw, ckk, value(w).data(), cols->data() + s * ckk * hw, ys);
    }
    Var yv = push(std::move(y), nullptr, {x, w, b});
    node(yv).backward = [=, this] {
      const auto& gy = grad(yv);
      auto& gx = mgrad(x);
      auto& gw = mgrad(w);
      auto& gb = mgrad(b);
      std::vector<double> dcol(ckk * hw);
      for (std::size_t s = 0; s < n; ++s) {
        const double* gys = gy.data() + s * o * hw;
        for (std::size_t oc = 0; oc < o; ++oc)
          for (std::size_t p = 0; p < hw; ++p) gb[oc] += gys[oc * hw + p];
        blas::gemm_nt(o, ckk, hw, gys, cols->data() + s * ckk * hw, gw.data());
        std::fill(dcol.begin(), dcol.end(), 0.0);
        blas::gemm_tn(ckk, hw, o, value(w).data(), gys, dcol.data());
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const double* row = dcol.data() + ((ch * k + ky) * k + kx) * hw;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                auto iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  auto ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                  if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                  gx[((s * c + ch) * h + iy) * wd + ix] += row[oy * wo + ox];
                }
              }
            }
      }
    };
    return yv;
  }

  // Non-overlapping k x k max pooling; trailing rows/cols that do not fill a
  // window are dropped.
  Var max_pool2d(Var x, std::size_t k = 2) {
    const auto& xs = value(x).shape();
    if (xs.size() != 4 || k == 0 || xs[2] < k || xs[3] < k)
      throw ShapeError("max_pool2d: input " + shape_string(xs) + " too small for window " + std::to_string(k));
    const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3], ho = h / k, wo = w / k;
    Tensor y({n, c, ho, wo});
    auto argmax = std::make_shared<std::vector<std::size_t>>(y.size());
    const auto& xv = value(x);
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          std::size_t best = p * h * w + (oy * k) * w + ox * k;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) {
              std::size_t idx = p * h * w + (oy * k + dy) * w + ox * k + dx;
              if (xv[idx] > xv[best]) best = idx;
            }
          std::size_t o = (p * ho + oy) * wo + ox;
          y[o] = xv[best];
          (*argmax)[o] = best;
        }
    Var yv = push(std::move(y), nullptr, {x});
    node(yv).backward = [this, x, yv, argmax] {
      const auto& gy = grad(yv);
      auto& gx = mgrad(x);
      for (std::size_t o = 0; o < gy.size(); ++o) gx[(*argmax)[o]] += gy[o];
    };
    return yv;
  }

  // Non-overlapping k x k mean pooling.
  Var avg_pool2d(Var x, std::size_t k) {
    const auto& xs = value(x).shape();
    if (xs.size() != 4 || k == 0 || xs[2] < k || xs[3] < k)
      throw ShapeError("avg_pool2d: input " + shape_string(xs) + " too small for window " + std::to_string(k));
    const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3], ho = h / k, wo = w / k;
    const double inv = 1.0 / static_cast<double>(k * k);
    Tensor y({n, c, ho, wo});
    const auto& xv = value(x);
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t iy = 0; iy < ho * k; ++iy)
        for (std::size_t ix = 0; ix < wo * k; ++ix)
          y[(p * ho + iy / k) * wo + ix / k] += inv * xv[(p * h + iy) * w + ix];
    Var yv = push(std::move(y), nullptr, {x});
    node(yv).backward = [=, this] {
      const auto& gy = grad(yv);
      auto& gx = mgrad(x);
      for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t iy = 0; iy < ho * k; ++iy)
          for (std::size_t ix = 0; ix < wo * k; ++ix)
            gx[(p * h + iy) * w + ix] += inv * gy[(p * ho + iy / k) * wo + ix / k];
    };
    return yv;
  }

  // [N,C,H,W] -> [N,C]
  Var global_avg_pool(Var x) {
    const auto& xs = value(x).shape();
    if (xs.size() != 4) throw ShapeError("global_avg_pool: expected [N,C,H,W], got " + shape_string(xs));
    const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
    Tensor y({n, c});
    const auto& xv = value(x);
    for (std::size_t p = 0; p < n * c; ++p) {
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += xv[p * hw + i];
      y[p] = s / static_cast<double>(hw);
    }
    Var yv = push(std::move(y), nullptr, {x});
    node(yv).backward = [=, this] {
      const auto& gy = grad(yv);
      auto& gx = mgrad(x);
      for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += gy[p] / static_cast<double>(hw);
    };
    return yv;
  }

  // Concatenates [N, d_i] blocks along the feature axis.
  Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t n = value(parts[0]).dim(0);
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (Var p : parts) {
      const auto& s = value(p).shape();
      if (s.size() != 2 || s[0] != n)
        throw ShapeError("concat: input " + shape_string(s) + " incompatible with " +
                         shape_string(value(parts[0]).shape()));
      widths.push_back(s[1]);
      total += s[1];
    }
    Tensor y({n, total});
    std::size_t off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const auto& pv = value(parts[i]);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < widths[i]; ++j) y[r * total + off + j] = pv[r * widths[i] + j];
      off += widths[i];
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    Var yv = push(std::move(y), nullptr, ins);
    node(yv).backward = [this, ins, widths, n, total, yv] {
      const auto& gy = grad(yv);
      std::size_t off = 0;
      for (std::size_t i = 0; i < ins.size(); ++i) {
        auto& g = mgrad(ins[i]);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < widths[i]; ++j) g[r * widths[i] + j] += gy[r * total + off + j];
        off += widths[i];
      }
    };
    return yv;
  }

  // Flattens [N, ...] to [N, prod(...)].
  Var flatten(Var x) {
    const auto& xs = value(x).shape();
    if (xs.empty()) throw ShapeError("flatten: scalar input");
    std::size_t n = xs[0];
    Tensor y = value(x).reshaped({n, value(x).size() / std::max<std::size_t>(n, 1)});
    Var yv = push(std::move(y), nullptr, {x});
    node(yv).backward = [this, x, yv] {
      auto& gx = mgrad(x);
      const auto& gy = grad(yv);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    };
    return yv;
  }

  // ---- elementwise ---------------------------------------------------------

  Var relu(Var x) {
    return unary(x, [](double v) { return v > 0 ? v : 0.0; },
                 [](double v, double) { return v > 0 ? 1.0 : 0.0; });
  }

  Var sigmoid(Var x) {
    return unary(x, [](double v) { return nd::sigmoid(v); },
                 [](double, double y) { return y * (1.0 - y); });
  }

  Var log_sigmoid(Var x) {
    return unary(x, [](double v) { return nd::log_sigmoid(v); },
                 [](double v, double) { return 1.0 - nd::sigmoid(v); });
  }

  Var scale(Var x, double a) {
    return unary(x, [a](double v) { return a * v; }, [a](double, double) { return a; });
  }

  Var add(Var a, Var b) {
    if (value(a).shape() != value(b).shape())
      throw ShapeError("add: shapes " + shape_string(value(a).shape()) + " and " +
                       shape_string(value(b).shape()) + " differ");
    Tensor y = value(a);
    const auto& bv = value(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    Var yv = push(std::move(y), nullptr, {a, b});
    node(yv).backward = [this, a, b, yv] {
      const auto& gy = grad(yv);
      auto& ga = mgrad(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      auto& gb = mgrad(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
    };
    return yv;
  }

  // Inverted dropout: in training, zeroes each entry with probability `rate`
  // and scales survivors by 1/(1-rate); identity otherwise.
  Var dropout(Var x, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
    if (!training || rate == 0.0) return x;
    auto mask = std::make_shared<std::vector<double>>(value(x).size());
    std::bernoulli_distribution keep(1.0 - rate);
    const double s = 1.0 / (1.0 - rate);
    for (auto& m : *mask) m = keep(rng) ? s : 0.0;
    Tensor y = value(x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= (*mask)[i];
    Var yv = push(std::move(y), nullptr, {x});
    node(yv).backward = [this, x, yv, mask] {
      const auto& gy = grad(yv);
      auto& gx = mgrad(x);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (*mask)[i];
    };
    return yv;
  }

  // ---- row-wise normalizers over [N, C] --------------------------------------

  Var softmax(Var x) {
    auto [n, c] = rows(x, "softmax");
    Tensor y = value(x);
    for (std::size_t r = 0; r < n; ++r) {
      double* row = y.data() + r * c;
      double m = *std::max_element(row, row + c);
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += (row[j] = std::exp(row[j] - m));
      for (std::size_t j = 0; j < c; ++j) row[j] /= s;
    }
    Var yv = push(std::move(y), nullptr, {x});
    node(yv).backward = [this, x, yv, n, c] {
      const auto& yv_ = value(yv);
      const auto& gy = grad(yv);
      auto& gx = mgrad(x);
      for (std::size_t r = 0; r < n; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += gy[r * c + j] * yv_[r * c + j];
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += yv_[r * c + j] * (gy[r * c + j] - dot);
      }
    };
    return yv;
  }

  Var log_softmax(Var x) {
    auto [n, c] = rows(x, "log_softmax");
    Tensor y = value(x);
    for (std::size_t r = 0; r < n; ++r) {
      double* row = y.data() + r * c;
      double m = *std::max_element(row, row + c);
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
      double lse = m + std::log(s);
      for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
    }
    Var yv = push(std::move(y), nullptr, {x});
    node(yv).backward = [this, x, yv, n, c] {
      const auto& yv_ = value(yv);
      const auto& gy = grad(yv);
      auto& gx = mgrad(x);
      for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += gy[r * c + j];
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += gy[r * c + j] - std::exp(yv_[r * c + j]) * s;
      }
    };
    return yv;
  }

  // Log-domain grouping: y[n,g] = log sum_{j : group[j] = g} exp(x[n,j]).
  // With x a log-distribution over fine classes and group the parent map,
  // this is the log of the coarser marginal distribution.
  Var group_logsumexp(Var x, const std::vector<std::size_t>& group, std::size_t n_groups) {
    auto [n, c] = rows(x, "group_logsumexp");
    if (group.size() != c)
      throw ShapeError("group_logsumexp: group map has " + std::to_string(group.size()) +
                       " entries for input " + shape_string(value(x).shape()));
    const auto& xv = value(x);
    Tensor y({n, n_groups}, -std::numeric_limits<double>::infinity());
    for (std::size_t r = 0; r < n; ++r) {
      std::vector<double> mx(n_groups, -std::numeric_limits<double>::infinity());
      for (std::size_t j = 0; j < c; ++j) {
        if (group[j] >= n_groups) throw ShapeError("group_logsumexp: group id out of range");
        mx[group[j]] = std::max(mx[group[j]], xv[r * c + j]);
      }
      std::vector<double> s(n_groups, 0.0);
      for (std::size_t j = 0; j < c; ++j) s[group[j]] += std::exp(xv[r * c + j] - mx[group[j]]);
      for (std::size_t g = 0; g < n_groups; ++g)
        if (s[g] > 0) y[r * n_groups + g] = mx[g] + std::log(s[g]);
    }
    Var yv = push(std::move(y), nullptr, {x});
    node(yv).backward = [this, x, yv, group, n, c, n_groups] {
      const auto& xv_ = value(x);
      const auto& yv_ = value(yv);
      const auto& gy = grad(yv);
      auto& gx = mgrad(x);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          std::size_t g = group[j];
          gx[r * c + j] += gy[r * n_groups + g] * std::exp(xv_[r * c + j] - yv_[r * n_groups + g]);
        }
    };
    return yv;
  }

  // ---- losses (scalar outputs) ---------------------------------------------

  // Mean negative log-likelihood of labels under row log-distributions.
  // log p is floored at log(floor); floored entries receive no gradient.
  Var nll(Var logp, std::span<const std::size_t> labels, double floor = 1e-12) {
    auto [n, c] = rows(logp, "nll");
    if (labels.size() != n)
      throw ShapeError("nll: " + std::to_string(labels.size()) + " labels for input " +
                       shape_string(value(logp).shape()));
    const double lf = std::log(floor);
    double total = 0.0;
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    std::vector<char> clamped(n, 0);
    for (std::size_t r = 0; r < n; ++r) {
      if (lab[r] >= c) throw ShapeError("nll: label " + std::to_string(lab[r]) + " out of range");
      double v = value(logp)[r * c + lab[r]];
      if (!(v >= lf)) {
        v = lf;
        clamped[r] = 1;
        ++clamp_count_;
      }
      total -= v;
    }
    Var yv = push(Tensor({1}, total / static_cast<double>(n)), nullptr, {logp});
    node(yv).backward = [this, logp, yv, lab, clamped, n, c] {
      double g = grad(yv)[0] / static_cast<double>(n);
      auto& gx = mgrad(logp);
      for (std::size_t r = 0; r < n; ++r)
        if (!clamped[r]) gx[r * c + lab[r]] -= g;
    };
    return yv;
  }

  // Mean over rows of the per-class binary cross-entropy summed over
  // classes, computed from logits.
  Var bce_with_logits(Var logits, const Tensor& targets) {
    auto [n, c] = rows(logits, "bce_with_logits");
    if (targets.shape() != value(logits).shape())
      throw ShapeError("bce_with_logits: targets " + shape_string(targets.shape()) + " vs logits " +
                       shape_string(value(logits).shape()));
    const auto& z = value(logits);
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i)
      total -= targets[i] * nd::log_sigmoid(z[i]) + (1.0 - targets[i]) * nd::log_sigmoid(-z[i]);
    Var yv = push(Tensor({1}, total / static_cast<double>(n)), nullptr, {logits});
    node(yv).backward = [this, logits, yv, targets, n] {
      double g = grad(yv)[0] / static_cast<double>(n);
      const auto& z_ = value(logits);
      auto& gx = mgrad(logits);
      for (std::size_t i = 0; i < z_.size(); ++i) gx[i] += g * (nd::sigmoid(z_[i]) - targets[i]);
    };
    return yv;
  }

  Var sum(std::span<const Var> scalars) {
    if (scalars.empty()) throw ShapeError("sum: no inputs");
    double total = 0.0;
    for (Var s : scalars) {
      if (value(s).size() != 1) throw ShapeError("sum: non-scalar input " + shape_string(value(s).shape()));
      total += value(s)[0];
    }
    std::vector<Var> ins(scalars.begin(), scalars.end());
    Var yv = push(Tensor({1}, total), nullptr, ins);
    node(yv).backward = [this, ins, yv] {
      for (Var s : ins) mgrad(s)[0] += grad(yv)[0];
    };
    return yv;
  }

  // Number of nll terms that hit the probability floor so far.
  std::size_t clamp_count() const { return clamp_count_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Parameter* param = nullptr;
    std::function<void()> backward;
  };

  Var push(Tensor value, Parameter* p, const std::vector<Var>& inputs) {
    for (Var in : inputs)
      if (in.id < 0 || in.id >= static_cast<int>(nodes_.size())) throw ShapeError("invalid tape variable");
    nodes_.push_back(Node{std::move(value), Tensor{}, p, {}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(Var v) { return nodes_[v.id]; }
  Tensor& mgrad(Var v) { return nodes_[v.id].grad; }

  std::pair<std::size_t, std::size_t> rows(Var x, const char* op) const {
    const auto& s = value(x).shape();
    if (s.size() != 2) throw ShapeError(std::string(op) + ": expected [N, C], got " + shape_string(s));
    return {s[0], s[1]};
  }

  template <class F, class DF>
  Var unary(Var x, F f, DF df) {
    Tensor y = value(x);
    for (auto& v : y.values()) v = f(v);
    Var yv = push(std::move(y), nullptr, {x});
    node(yv).backward = [this, x, yv, df] {
      const auto& xv = value(x);
      const auto& yv_ = value(yv);
      const auto& gy = grad(yv);
      auto& gx = mgrad(x);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * df(xv[i], yv_[i]);
    };
    return yv;
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<const Parameter*, int>> sources_;
  std::size_t clamp_count_ = 0;
};

}  // namespace taxofuse::nd
