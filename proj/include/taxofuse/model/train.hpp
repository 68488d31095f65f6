#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taxofuse/dataset.hpp"
#include "taxofuse/encoding.hpp"
#include "taxofuse/image.hpp"
#include "taxofuse/model/fusion.hpp"
#include "taxofuse/model/model.hpp"
#include "taxofuse/ndiff/optim.hpp"
#include "taxofuse/taxonomy.hpp"

namespace taxofuse {

// Everything fit on the training split that inference must reproduce.
struct Preprocessing {
  NormalizationBounds bounds;
  ChannelStats image_stats = ChannelStats::identity(3);
  ChannelStats patch_stats = ChannelStats::identity(4);
  PreprocessConfig image;
  bool augment = true;
  std::size_t patch_extent = 256;
};

// Per-observation inputs, ready for batching.
struct SampleSet {
  std::vector<Tensor> images;           // raw [C,H,W]
  std::vector<ContextVector> contexts;  // normalized
  std::vector<Tensor> patches;          // block-averaged [4,S,S]; empty without satellite
  std::vector<std::size_t> labels;      // species ids in the model taxonomy

  std::size_t size() const { return images.size(); }
  bool has_patches() const { return !patches.empty(); }
  SampleSet subset(std::span<const std::size_t> idx) const {
    SampleSet s;
    for (auto i : idx) {
      s.images.push_back(images.at(i));
      s.contexts.push_back(contexts.at(i));
      if (has_patches()) s.patches.push_back(patches.at(i));
      s.labels.push_back(labels.at(i));
    }
    return s;
  }
};

struct Batch {
  Tensor images;   // [N,C,S,S]
  Tensor context;  // [N,5]
  std::optional<Tensor> patches;
  std::vector<std::size_t> labels;
};

// with_images = false leaves images empty (auxiliary-branch-only phases).
inline Batch assemble_batch(const SampleSet& set, std::span<const std::size_t> idx, const Preprocessing& pre,
                            PreprocessMode mode, nd::Rng* rng, bool with_images = true) {
  if (idx.empty()) throw ShapeError("empty batch");
  const bool augment = mode == PreprocessMode::train && pre.augment;
  Batch b;
  std::vector<double> img_values, ctx_values, patch_values;
  nd::Shape img_shape;
  for (auto i : idx) {
    if (with_images) {
      Tensor img = preprocess_image(set.images.at(i), augment ? PreprocessMode::train : PreprocessMode::eval,
                                    pre.image_stats, pre.image, rng);
      img_shape = img.shape();
      img_values.insert(img_values.end(), img.values().begin(), img.values().end());
    }
    auto c = set.contexts.at(i).as_array();
    ctx_values.insert(ctx_values.end(), c.begin(), c.end());
    if (set.has_patches()) {
      Tensor p = set.patches.at(i);
      standardize(p, pre.patch_stats);
      patch_values.insert(patch_values.end(), p.values().begin(), p.values().end());
    }
    b.labels.push_back(set.labels.at(i));
  }
  const std::size_t n = idx.size();
  if (with_images) b.images = Tensor({n, img_shape[0], img_shape[1], img_shape[2]}, std::move(img_values));
  b.context = Tensor({n, ContextVector::kDim}, std::move(ctx_values));
  if (set.has_patches()) {
    const auto& ps = set.patches.at(idx[0]).shape();
    b.patches = Tensor({n, ps[0], ps[1], ps[2]}, std::move(patch_values));
  }
  return b;
}

struct TrainConfig {
  LossKind loss = LossKind::marginalisation;
  bool balanced = true;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr_conv = 5e-5;
  double lr_fc = 2e-3;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.5;
  double min_lr = 1e-7;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  std::string phase;  // "joint", or the branch trained in separate mode
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_accuracy;
  std::vector<std::pair<std::string, double>> learning_rates;
};

// Eval-mode species posteriors for every sample, optionally ignoring the
// context (image-only fallback, allowed in image and separate modes).
inline std::vector<std::vector<double>> predict_posteriors(const Model& model, const SampleSet& set,
                                                           const Preprocessing& pre, bool use_context = true,
                                                           std::size_t batch_size = 64) {
  std::vector<std::vector<double>> out;
  out.reserve(set.size());
  nd::Rng unused(0);
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(set.size(), start + batch_size); ++i) idx.push_back(i);
    Batch b = assemble_batch(set, idx, pre, PreprocessMode::eval, nullptr);
    Tape t;
    Var images = t.constant(b.images);
    std::optional<Var> ctx, patches;
    if (use_context) ctx = t.constant(b.context);
    if (b.patches && use_context) patches = t.constant(*b.patches);
    Var logp = model.log_posterior(t, images, ctx, patches, false, unused);
    const auto& v = t.value(logp);
    const std::size_t c = v.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::vector<double> p(c);
      for (std::size_t j = 0; j < c; ++j) p[j] = std::exp(v[r * c + j]);
      out.push_back(std::move(p));
    }
  }
  return out;
}

// Raw branch outputs for one batch: image logits, and sigmoid presence
// probabilities of the auxiliary branches the model has.
struct BranchOutputs {
  Tensor image_logits;
  std::optional<Tensor> context_probs;
  std::optional<Tensor> satellite_probs;
};

inline BranchOutputs branch_outputs(const Model& model, const Batch& b) {
  nd::Rng unused(0);
  Tape t;
  BranchOutputs out;
  if (model.fusion().tag == FusionTag::early) throw ConfigError("early fusion has no per-branch class scores");
  out.image_logits = t.value(model.image_logits(t, t.constant(b.images), false, unused));
  if (model.has_param("context.out.w")) out.context_probs = t.value(t.sigmoid(model.context_logits(t, t.constant(b.context))));
  if (model.has_param("satellite.out.w") && b.patches)
    out.satellite_probs = t.value(t.sigmoid(model.satellite_logits(t, t.constant(*b.patches), false, unused)));
  return out;
}

namespace train_detail {

inline std::vector<nd::ParameterGroup> make_groups(std::span<Parameter* const> params, const TrainConfig& cfg) {
  nd::ParameterGroup conv{"conv", {}, cfg.lr_conv}, fc{"fc", {}, cfg.lr_fc};
  for (auto* p : params) (p->kind == nd::ParamKind::conv ? conv : fc).params.push_back(p);
  std::vector<nd::ParameterGroup> groups;
  if (!conv.params.empty()) groups.push_back(std::move(conv));
  if (!fc.params.empty()) groups.push_back(std::move(fc));
  return groups;
}

using Objective = std::function<Var(Tape&, const Batch&, nd::Rng&)>;

// One optimisation phase over a parameter subset.
inline void run_phase(const std::string& phase, Model& model, std::vector<Parameter*> params, const SampleSet& train,
                      const Preprocessing& pre, const TrainConfig& cfg, std::uint64_t seed,
                      const Objective& objective, std::vector<EpochRecord>& log,
                      const std::function<void(const EpochRecord&)>& on_epoch,
                      const std::function<std::optional<std::pair<double, double>>()>& validate,
                      bool with_images = true) {
  if (train.size() == 0) throw DataError("training set is empty");
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
  auto groups = make_groups(params, cfg);
  for (auto* p : params) p->zero_grad();
  nd::PlateauScheduler scheduler(cfg.plateau_patience, cfg.plateau_factor, cfg.min_lr);
  EpochSampler sampler(train.labels, cfg.balanced);
  nd::Rng rng(seed);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto order = sampler.epoch(rng);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      Batch b = assemble_batch(train, idx, pre, PreprocessMode::train, &rng, with_images);
      Tape t;
      Var loss = objective(t, b, rng);
      double lv = t.value(loss)[0];
      if (!std::isfinite(lv))
        throw DivergenceError(phase + " training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(steps + 1));
      t.backward(loss);
      model.accumulate_gradients(t);
      try {
        nd::sgd_step(groups);
      } catch (const DivergenceError& e) {
        throw DivergenceError(phase + " training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(steps + 1) + ": " + e.what());
      }
      loss_sum += lv;
      ++steps;
    }
    EpochRecord rec;
    rec.phase = phase;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(steps);
    if (auto v = validate()) {
      rec.val_loss = v->first;
      rec.val_accuracy = v->second;
    }
    scheduler.step(rec.train_loss, groups);
    for (const auto& g : groups) rec.learning_rates.emplace_back(g.name, g.lr);
    log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
}

}  // namespace train_detail

// Trains the model in place. Joint modes (image, early, late) optimise all
// parameters through the fused posterior with the chosen species loss.
// Separate mode trains the image branch alone with that loss, then each
// auxiliary branch alone with per-class binary cross-entropy against
// one-hot presence targets; each phase has its own random stream.
inline std::vector<EpochRecord> train_model(Model& model, const TaxonomyTree& taxonomy, const SampleSet& train,
                                            const SampleSet* val, const Preprocessing& pre, const TrainConfig& cfg,
                                            const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (taxonomy.num_species() != model.num_classes())
    throw DataError("taxonomy has " + std::to_string(taxonomy.num_species()) + " species but the model has " +
                    std::to_string(model.num_classes()) + " classes");
  const auto& mode = model.fusion();
  if (mode.satellite && mode.tag != FusionTag::image && !train.has_patches())
    throw DataError("satellite branch enabled but the training samples carry no patches");
  std::vector<EpochRecord> log;

  auto validate = [&]() -> std::optional<std::pair<double, double>> {
    if (!val || val->size() == 0) return std::nullopt;
    auto post = predict_posteriors(model, *val, pre, true);
    double loss = 0.0, correct = 0.0;
    for (std::size_t i = 0; i < post.size(); ++i) {
      double p = std::max(post[i][val->labels[i]], kProbabilityFloor);
      loss -= std::log(p);
      auto arg = static_cast<std::size_t>(std::max_element(post[i].begin(), post[i].end()) - post[i].begin());
      correct += arg == val->labels[i];
    }
    return std::pair{loss / post.size(), 100.0 * correct / post.size()};
  };

  auto species_objective = [&](bool image_only) -> train_detail::Objective {
    return [&, image_only](Tape& t, const Batch& b, nd::Rng& rng) {
      Var images = t.constant(b.images);
      Var logp;
      if (image_only) {
        logp = t.log_softmax(model.image_logits(t, images, true, rng));
      } else {
        std::optional<Var> patches;
        if (b.patches) patches = t.constant(*b.patches);
        logp = model.log_posterior(t, images, t.constant(b.context), patches, true, rng);
      }
      return species_loss(t, logp, b.labels, cfg.loss, taxonomy);
    };
  };
  auto presence_targets = [&](const Batch& b) {
    Tensor y({b.labels.size(), model.num_classes()});
    for (std::size_t r = 0; r < b.labels.size(); ++r) y[r * model.num_classes() + b.labels[r]] = 1.0;
    return y;
  };

  if (mode.tag != FusionTag::separate) {
    std::vector<Parameter*> all;
    for (auto& p : model.parameters()) all.push_back(&p);
    train_detail::run_phase("joint", model, all, train, pre, cfg, cfg.seed,
                            species_objective(mode.tag == FusionTag::image), log, on_epoch, validate);
    return log;
  }

  using Validator = std::function<std::optional<std::pair<double, double>>()>;
  Validator no_validation = []() -> std::optional<std::pair<double, double>> { return std::nullopt; };
  Validator with_validation = validate;
  train_detail::run_phase("image", model, model.parameters_with_prefix("image."), train, pre, cfg, cfg.seed,
                          species_objective(true), log, on_epoch, no_validation);
  train_detail::run_phase(
      "context", model, model.parameters_with_prefix("context."), train, pre, cfg, cfg.seed ^ 0x9e3779b97f4a7c15ULL,
      [&](Tape& t, const Batch& b, nd::Rng&) {
        return t.bce_with_logits(model.context_logits(t, t.constant(b.context)), presence_targets(b));
      },
      log, on_epoch, mode.satellite ? no_validation : with_validation, false);
  if (mode.satellite) {
    train_detail::run_phase(
        "satellite", model, model.parameters_with_prefix("satellite."), train, pre, cfg,
        cfg.seed ^ 0xc2b2ae3d27d4eb4fULL,
        [&](Tape& t, const Batch& b, nd::Rng& rng) {
          return t.bce_with_logits(model.satellite_logits(t, t.constant(*b.patches), true, rng), presence_targets(b));
        },
        log, on_epoch, with_validation, false);
  }
  return log;
}

}  // namespace taxofuse
