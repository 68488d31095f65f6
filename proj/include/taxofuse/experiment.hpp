#pragma once

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxofuse/dataset.hpp"
#include "taxofuse/evaluation.hpp"
#include "taxofuse/model/checkpoint.hpp"
#include "taxofuse/model/train.hpp"
#include "taxofuse/pipeline.hpp"
#include "taxofuse/raster.hpp"
#include "taxofuse/synthetic.hpp"
#include "taxofuse/taxonomy.hpp"

namespace taxofuse {

// Every knob of a training or cross-validation run.
struct ExperimentConfig {
  // data
  std::string observations;  // observation CSV
  std::string taxonomy;      // taxonomy CSV (full lineages)
  std::string raster;        // satellite raster; defaults to satellite.rst next to the observations
  std::string world;         // synthetic sidecar; defaults to ground_truth.json next to the observations
  std::string holdout;       // test observations for folds = 1
  std::string output = "run";

  // model and training
  FusionTag fusion = FusionTag::late;
  LossKind loss = LossKind::marginalisation;
  bool balanced = true;
  bool satellite = false;
  std::size_t patch_extent = 256;
  std::size_t satellite_size = 16;
  bool dropout = false;
  double dropout_rate = 0.5;
  bool augment = true;
  std::size_t image_resize = 256;
  std::size_t image_crop = 224;
  std::vector<std::size_t> image_widths = {16, 32, 64};
  std::vector<std::size_t> context_hidden = {64, 64};
  std::vector<std::size_t> satellite_widths = {8, 16};
  std::size_t early_hidden = 64;
  double lr_conv = 5e-5;
  double lr_fc = 2e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.5;
  double min_lr = 1e-7;

  // protocol
  std::size_t folds = 5;
  std::size_t threads = 1;
  std::uint64_t seed = 1;
  std::size_t min_count = 10;
  std::size_t unseen_min = 6;
  std::size_t unseen_take = 5;

  FusionMode fusion_mode() const { return {fusion, satellite, dropout}; }

  void validate() const {
    namespace fs = std::filesystem;
    auto must_exist = [](const std::string& key, const std::string& p) {
      if (p.empty()) throw ConfigError(key + " is required");
      if (!fs::exists(p)) throw ConfigError(key + " does not exist: " + p);
    };
    must_exist("observations", observations);
    must_exist("taxonomy", taxonomy);
    if (!raster.empty()) must_exist("raster", raster);
    if (!world.empty()) must_exist("world", world);
    if (!holdout.empty()) must_exist("holdout", holdout);
    if (satellite) check_patch_extent(patch_extent);
    if (folds == 0) throw ConfigError("folds must be positive");
    if (folds == 1 && holdout.empty()) throw ConfigError("folds = 1 needs a holdout observation file");
    if (batch_size == 0 || epochs == 0) throw ConfigError("batch_size and epochs must be positive");
    if (!(lr_conv > 0) || !(lr_fc > 0)) throw ConfigError("learning rates must be positive");
    if (image_crop > image_resize) throw ConfigError("image_crop exceeds image_resize");
    if (image_widths.empty()) throw ConfigError("image_widths must list at least one width");
    if (satellite && fusion == FusionTag::image) throw ConfigError("the satellite branch needs a fusion mode other than image");
    if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("dropout_rate must lie in [0, 1)");
  }

  ModelConfig model_config(std::size_t num_classes) const {
    ModelConfig m;
    m.num_classes = num_classes;
    m.image_size = image_crop;
    m.image_encoder.widths = image_widths;
    m.context_hidden = context_hidden;
    m.satellite_encoder.widths = satellite_widths;
    m.satellite_size = satellite_size;
    m.early_hidden = early_hidden;
    m.dropout_rate = dropout_rate;
    m.fusion = fusion_mode();
    return m;
  }

  TrainConfig train_config(std::uint64_t run_seed) const {
    TrainConfig t;
    t.loss = loss;
    t.balanced = balanced;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.lr_conv = lr_conv;
    t.lr_fc = lr_fc;
    t.plateau_patience = plateau_patience;
    t.plateau_factor = plateau_factor;
    t.min_lr = min_lr;
    t.seed = run_seed;
    return t;
  }

  PipelineConfig pipeline_config() const {
    PipelineConfig p;
    p.image.resize = image_resize;
    p.image.crop = image_crop;
    p.augment = augment;
    p.satellite = satellite;
    p.patch_extent = patch_extent;
    p.satellite_size = satellite_size;
    return p;
  }

  SplitConfig split_config() const { return {min_count, unseen_min, unseen_take, seed}; }
};

// Observations plus everything needed to turn them into model inputs.
struct Dataset {
  std::vector<Observation> observations;
  std::vector<RowRejection> rejected;
  TaxonomyTree taxonomy;
  std::shared_ptr<const SyntheticWorld> world;
  std::shared_ptr<const InMemoryRaster> raster;
  ImageSource images;
};

// Loads the synthetic world and raster, either from the given paths or from
// their default names next to the observation file.
inline void attach_sources(Dataset& d, const std::string& observations, const std::string& world,
                           const std::string& raster, bool need_raster) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(observations).parent_path();
  fs::path w = world.empty() ? dir / "ground_truth.json" : fs::path(world);
  if (fs::exists(w)) d.world = std::make_shared<const SyntheticWorld>(SyntheticWorld::from_sidecar(w));
  d.images = ImageSource(d.world, dir);
  if (need_raster) {
    fs::path r = raster.empty() ? dir / "satellite.rst" : fs::path(raster);
    if (!fs::exists(r)) throw ConfigError("satellite branch enabled but no raster found at " + r.string());
    d.raster = InMemoryRaster::open(r.string());
  }
}

inline Dataset load_dataset(const std::string& observations, const std::string& taxonomy, const std::string& world,
                            const std::string& raster, bool need_raster) {
  Dataset d;
  auto parsed = parse_observations_file(observations);
  d.observations = std::move(parsed.observations);
  d.rejected = std::move(parsed.rejected);
  d.taxonomy = TaxonomyTree::build(read_taxonomy_file(taxonomy));
  attach_sources(d, observations, world, raster, need_raster);
  return d;
}

inline Dataset load_dataset(const ExperimentConfig& cfg) {
  return load_dataset(cfg.observations, cfg.taxonomy, cfg.world, cfg.raster, cfg.satellite);
}

// The species kept for training and their observations.
struct Selection {
  DatasetSplit split;
  TaxonomyTree taxonomy;  // restricted to the selected species
  std::vector<Observation> observations;
  std::vector<std::size_t> labels;
  std::vector<Observation> unseen;
};

inline Selection select_species(const Dataset& d, const SplitConfig& cfg) {
  Selection s;
  s.split = filter_and_split(d.observations, d.taxonomy, cfg);
  if (s.split.selected_species.empty())
    throw DataError("no species has at least " + std::to_string(cfg.min_count) + " observations");
  s.taxonomy = restrict_taxonomy(d.taxonomy, s.split.selected_species);
  for (auto i : s.split.selected) {
    s.observations.push_back(d.observations[i]);
    s.labels.push_back(*s.taxonomy.find(Level::species, d.observations[i].species));
  }
  for (auto i : s.split.unseen) s.unseen.push_back(d.observations[i]);
  return s;
}

inline std::vector<Observation> pick(std::span<const Observation> obs, std::span<const std::size_t> idx) {
  std::vector<Observation> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(obs[i]);
  return out;
}

struct TrainedModel {
  ModelBundle bundle;
  std::vector<EpochRecord> log;
};

// Fits preprocessing on `train`, builds and trains a model.
inline TrainedModel train_on(const ExperimentConfig& cfg, const Dataset& d, const TaxonomyTree& taxonomy,
                             std::span<const Observation> train, std::span<const Observation> val,
                             std::uint64_t run_seed, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  const auto pcfg = cfg.pipeline_config();
  Preprocessing pre = fit_preprocessing(train, d.images, d.raster.get(), pcfg);
  SampleSet train_set = build_samples(train, taxonomy, d.images, d.raster.get(), pre, pcfg);
  std::optional<SampleSet> val_set;
  if (!val.empty()) val_set = build_samples(val, taxonomy, d.images, d.raster.get(), pre, pcfg);
  Model model(cfg.model_config(taxonomy.num_species()), run_seed);
  TrainedModel out;
  out.log = train_model(model, taxonomy, train_set, val_set ? &*val_set : nullptr, pre, cfg.train_config(run_seed),
                        on_epoch);
  out.bundle.model = std::move(model);
  out.bundle.pre = pre;
  out.bundle.pre.augment = false;
  out.bundle.taxonomy_fingerprint = taxonomy.fingerprint();
  for (std::size_t s = 0; s < taxonomy.num_species(); ++s) out.bundle.species.push_back(taxonomy.name(Level::species, s));
  return out;
}

// Species posteriors for observations. Observations whose species is not in
// the model taxonomy are allowed (their label is irrelevant here).
inline Posteriors predict(const ModelBundle& b, const Dataset& d, const TaxonomyTree& taxonomy,
                          std::span<const Observation> obs, bool use_context = true) {
  if (obs.empty()) return {};
  PipelineConfig pcfg;
  pcfg.image = b.pre.image;
  pcfg.augment = false;
  pcfg.satellite = b.model.fusion().satellite && use_context;
  pcfg.patch_extent = b.pre.patch_extent;
  pcfg.satellite_size = b.model.config().satellite_size;
  SampleSet set = build_samples(obs, taxonomy, d.images, d.raster.get(), b.pre, pcfg, true);
  return predict_posteriors(b.model, set, b.pre, use_context);
}

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldOutcome {
  std::size_t fold = 0;
  std::size_t train_size = 0;
  std::vector<std::size_t> test_indices;  // into Selection::observations
  Posteriors posteriors;
  MetricsReport marginalise, ancestor;
  std::vector<EpochRecord> log;
};

struct CvOutcome {
  Selection selection;
  std::vector<FoldOutcome> folds;
  MetricsReport marginalise, ancestor;  // means over folds

  // Pooled held-out predictions in selection order.
  std::vector<std::size_t> pooled_labels() const;
  Posteriors pooled_posteriors() const;
};

inline std::vector<std::size_t> CvOutcome::pooled_labels() const {
  std::vector<std::size_t> out;
  for (const auto& f : folds)
    for (auto i : f.test_indices) out.push_back(selection.labels[i]);
  return out;
}

inline Posteriors CvOutcome::pooled_posteriors() const {
  Posteriors out;
  for (const auto& f : folds) out.insert(out.end(), f.posteriors.begin(), f.posteriors.end());
  return out;
}

inline MetricsReport mean_report(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw DataError("no reports to average");
  MetricsReport m = reports.front();
  for (std::size_t l = 0; l < m.size(); ++l) {
    double acc = 0, t1 = 0, t3 = 0, t5 = 0;
    std::size_t n = 0;
    for (const auto& r : reports) {
      acc += r[l].accuracy;
      t1 += r[l].top1;
      t3 += r[l].top3;
      t5 += r[l].top5;
      n += r[l].samples;
    }
    const double k = static_cast<double>(reports.size());
    m[l].accuracy = acc / k;
    m[l].top1 = t1 / k;
    m[l].top3 = t3 / k;
    m[l].top5 = t5 / k;
    m[l].samples = n;
  }
  return m;
}

// Rethrows the current taxofuse error with a prefix, keeping its type.
[[noreturn]] inline void rethrow_with_prefix(const std::string& prefix) {
  try {
    throw;
  } catch (const DivergenceError& e) {
    throw DivergenceError(prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(prefix + e.what());
  } catch (const DataError& e) {
    throw DataError(prefix + e.what());
  }
}

using FoldEpochCallback = std::function<void(std::size_t fold, const EpochRecord&)>;

// Stratified k-fold cross-validation over the selected species. With
// folds = 1 the model trains on every selected observation and is tested on
// the holdout file. Each fold seeds its model with seed + fold.
inline CvOutcome run_cv(const ExperimentConfig& cfg, const Dataset& d, const FoldEpochCallback& on_epoch = {}) {
  CvOutcome out;
  out.selection = select_species(d, cfg.split_config());
  const auto& sel = out.selection;
  const std::size_t k = cfg.folds;

  std::vector<Observation> holdout;
  std::vector<std::size_t> fold_of;
  if (k == 1) {
    holdout = parse_observations_file(cfg.holdout).observations;
    if (holdout.empty()) throw DataError("holdout file has no valid observations");
  } else {
    std::vector<std::string> names;
    for (std::size_t s = 0; s < sel.taxonomy.num_species(); ++s) names.push_back(sel.taxonomy.name(Level::species, s));
    fold_of = stratified_kfold(sel.labels, k, cfg.seed, &names);
  }

  out.folds.resize(k);
  std::mutex log_mutex;
  auto run_fold = [&](std::size_t f) {
    FoldOutcome& r = out.folds[f];
    r.fold = f;
    std::vector<Observation> train, test;
    std::vector<std::size_t> test_labels;
    if (k == 1) {
      train = sel.observations;
      test = holdout;
      for (const auto& o : test) {
        auto id = sel.taxonomy.find(Level::species, o.species);
        if (!id) throw DataError("holdout observation " + o.id + " has species '" + o.species + "' outside the selected set");
        test_labels.push_back(*id);
      }
    } else {
      std::vector<std::size_t> train_idx;
      for (std::size_t i = 0; i < sel.observations.size(); ++i) {
        if (fold_of[i] == f) {
          r.test_indices.push_back(i);
          test_labels.push_back(sel.labels[i]);
        } else {
          train_idx.push_back(i);
        }
      }
      train = pick(sel.observations, train_idx);
      test = pick(sel.observations, r.test_indices);
    }
    r.train_size = train.size();
    std::function<void(const EpochRecord&)> cb;
    if (on_epoch)
      cb = [&, f](const EpochRecord& rec) {
        std::lock_guard lock(log_mutex);
        on_epoch(f, rec);
      };
    auto trained = train_on(cfg, d, sel.taxonomy, train, {}, cfg.seed + f, cb);
    r.log = std::move(trained.log);
    r.posteriors = predict(trained.bundle, d, sel.taxonomy, test);
    r.marginalise = per_level_metrics(r.posteriors, test_labels, sel.taxonomy, Rollup::marginalise);
    r.ancestor = per_level_metrics(r.posteriors, test_labels, sel.taxonomy, Rollup::ancestor);
  };

  std::vector<std::exception_ptr> errors(k);
  auto guarded = [&](std::size_t f) {
    try {
      try {
        run_fold(f);
      } catch (const Error&) {
        rethrow_with_prefix("fold " + std::to_string(f) + ": ");
      }
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.threads, k));
  if (workers == 1) {
    for (std::size_t f = 0; f < k; ++f) guarded(f);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t f = w; f < k; f += workers) guarded(f);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<MetricsReport> m, a;
  for (const auto& f : out.folds) {
    m.push_back(f.marginalise);
    a.push_back(f.ancestor);
  }
  out.marginalise = mean_report(m);
  out.ancestor = mean_report(a);
  return out;
}

// ---------------------------------------------------------------------------
// Output helpers

inline nlohmann::json epoch_json(const EpochRecord& r) {
  nlohmann::json j{{"phase", r.phase}, {"epoch", r.epoch}, {"train_loss", r.train_loss}};
  if (r.val_loss) j["val_loss"] = *r.val_loss;
  if (r.val_accuracy) j["val_accuracy"] = *r.val_accuracy;
  for (const auto& [name, lr] : r.learning_rates) j["lr"][name] = lr;
  return j;
}

// Deterministic key=value report of a cross-validation run.
inline void write_cv_report(std::ostream& out, const CvOutcome& cv) {
  out << "folds=" << cv.folds.size() << '\n'
      << "species=" << cv.selection.taxonomy.num_species() << '\n'
      << "observations=" << cv.selection.observations.size() << '\n';
  write_metrics_text(out, cv.marginalise, "mean.marginalise.");
  write_metrics_text(out, cv.ancestor, "mean.ancestor.");
  for (const auto& f : cv.folds) {
    const std::string p = "fold" + std::to_string(f.fold) + ".";
    out << p << "train_size=" << f.train_size << '\n';
    write_metrics_text(out, f.marginalise, p + "marginalise.");
    write_metrics_text(out, f.ancestor, p + "ancestor.");
  }
}

inline nlohmann::json cv_json(const CvOutcome& cv) {
  nlohmann::json j;
  j["folds"] = cv.folds.size();
  j["species"] = cv.selection.taxonomy.num_species();
  j["observations"] = cv.selection.observations.size();
  j["mean"]["marginalise"] = metrics_json(cv.marginalise);
  j["mean"]["ancestor"] = metrics_json(cv.ancestor);
  for (const auto& f : cv.folds)
    j["per_fold"].push_back(
        {{"fold", f.fold}, {"train_size", f.train_size}, {"marginalise", metrics_json(f.marginalise)},
         {"ancestor", metrics_json(f.ancestor)}});
  return j;
}

inline std::ofstream open_output(const std::filesystem::path& p, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(p, mode);
  if (!out) throw ConfigError("cannot write " + p.string());
  return out;
}

}  // namespace taxofuse
