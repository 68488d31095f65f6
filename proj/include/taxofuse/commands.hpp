#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxofuse/evaluation.hpp"
#include "taxofuse/experiment.hpp"
#include "taxofuse/model/checkpoint.hpp"
#include "taxofuse/synthetic.hpp"

namespace taxofuse {

namespace fs = std::filesystem;

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("cannot create output directory " + dir.string());
}

// ---------------------------------------------------------------------------
// synth

inline SyntheticWorld cmd_synth(const SyntheticConfig& cfg, const fs::path& out) {
  ensure_dir(out);
  SyntheticWorld w(cfg);
  w.write(out);
  return w;
}

// ---------------------------------------------------------------------------
// train

inline void write_log(const fs::path& p, const std::vector<EpochRecord>& log, std::optional<std::size_t> fold = {}) {
  auto out = open_output(p, std::ios::out | std::ios::app);
  for (const auto& r : log) {
    auto j = epoch_json(r);
    if (fold) j["fold"] = *fold;
    out << j.dump() << '\n';
  }
}

// Trains on every selected observation (the holdout file, if any, is used
// for per-epoch validation) and writes the checkpoint, the model taxonomy,
// the training log and the unseen-species observations.
inline TrainedModel cmd_train(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  const fs::path out(cfg.output);
  ensure_dir(out);
  Dataset d = load_dataset(cfg);
  Selection sel = select_species(d, cfg.split_config());
  std::vector<Observation> val;
  if (!cfg.holdout.empty()) {
    for (auto& o : parse_observations_file(cfg.holdout).observations)
      if (sel.taxonomy.find(Level::species, o.species)) val.push_back(std::move(o));
  }
  auto on_epoch = [&](const EpochRecord& r) {
    if (progress) *progress << epoch_json(r).dump() << '\n';
  };
  auto trained = train_on(cfg, d, sel.taxonomy, sel.observations, val, cfg.seed, on_epoch);
  save_checkpoint((out / "model.ckpt").string(), trained.bundle);
  {
    auto f = open_output(out / "model_taxonomy.csv");
    write_taxonomy_records(f, sel.taxonomy.records());
  }
  {
    auto f = open_output(out / "unseen_observations.csv");
    write_observations(f, sel.unseen);
  }
  fs::remove(out / "train_log.jsonl");
  write_log(out / "train_log.jsonl", trained.log);
  {
    auto f = open_output(out / "split.txt");
    f << "selected_species=" << sel.split.selected_species.size() << '\n'
      << "selected_observations=" << sel.observations.size() << '\n'
      << "unseen_species=" << sel.split.unseen_species.size() << '\n'
      << "unseen_observations=" << sel.unseen.size() << '\n'
      << "unresolved_observations=" << sel.split.unresolved.size() << '\n'
      << "rejected_rows=" << d.rejected.size() << '\n';
  }
  return trained;
}

// ---------------------------------------------------------------------------
// cv

inline void write_confusion_files(const fs::path& dir, const ConfusionMatrix& cm, const TaxonomyTree& taxonomy) {
  auto c = open_output(dir / "confusion.csv");
  write_confusion_counts(c, cm);
  auto o = open_output(dir / "confusion_order.csv");
  write_confusion_order(o, taxonomy);
}

inline std::vector<std::size_t> argmax_all(const Posteriors& p) {
  std::vector<std::size_t> out;
  out.reserve(p.size());
  for (const auto& row : p) out.push_back(argmax(row));
  return out;
}

// Writes metrics.txt, metrics.json, cv_log.jsonl and the pooled confusion
// matrix into the output directory.
inline CvOutcome cmd_cv(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  const fs::path out(cfg.output);
  ensure_dir(out);
  Dataset d = load_dataset(cfg);
  FoldEpochCallback cb;
  if (progress)
    cb = [progress](std::size_t fold, const EpochRecord& r) {
      auto j = epoch_json(r);
      j["fold"] = fold;
      *progress << j.dump() << '\n';
    };
  CvOutcome cv = run_cv(cfg, d, cb);
  {
    auto f = open_output(out / "metrics.txt");
    write_cv_report(f, cv);
  }
  {
    auto f = open_output(out / "metrics.json");
    f << cv_json(cv).dump(2) << '\n';
  }
  fs::remove(out / "cv_log.jsonl");
  for (const auto& f : cv.folds) write_log(out / "cv_log.jsonl", f.log, f.fold);
  if (cfg.folds > 1) {
    auto cm = confusion_matrix(argmax_all(cv.pooled_posteriors()), cv.pooled_labels(), cv.selection.taxonomy);
    write_confusion_files(out, cm, cv.selection.taxonomy);
  }
  return cv;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string checkpoint;
  std::string observations;
  std::string taxonomy;  // dataset taxonomy; must contain the model's species with matching lineages
  std::string world;
  std::string raster;
  std::string output = "eval";
  bool per_level = false;
  bool unseen = false;
  bool confusion = false;
  std::string bands;              // baseline checkpoint for the frequency-band comparison
  std::string band_counts;        // observation file giving per-species image counts (default: observations)
  Rollup rollup = Rollup::marginalise;
};

struct EvalResult {
  MetricsReport metrics;  // species row, or six rows with per_level
  std::optional<UnseenReport> unseen;
  std::optional<ConfusionMatrix> confusion;
  std::optional<std::vector<BandResult>> bands;
  std::size_t known = 0, unknown = 0;
};

// Model taxonomy recovered from the dataset taxonomy; throws if it does not
// match the checkpoint.
inline TaxonomyTree checked_model_taxonomy(const ModelBundle& b, const TaxonomyTree& dataset_taxonomy) {
  TaxonomyTree t;
  if (b.species.empty()) {
    t = dataset_taxonomy;
  } else {
    try {
      t = restrict_taxonomy(dataset_taxonomy, b.species);
    } catch (const DataError& e) {
      throw DataError(std::string("taxonomy fingerprint mismatch: ") + e.what());
    }
  }
  if (t.fingerprint() != b.taxonomy_fingerprint) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "checkpoint %016llx, dataset %016llx",
                  static_cast<unsigned long long>(b.taxonomy_fingerprint),
                  static_cast<unsigned long long>(t.fingerprint()));
    throw DataError(std::string("taxonomy fingerprint mismatch: ") + buf);
  }
  return t;
}

inline EvalResult cmd_eval(const EvalOptions& opt) {
  if (opt.checkpoint.empty() || opt.observations.empty() || opt.taxonomy.empty())
    throw ConfigError("eval needs checkpoint, observations and taxonomy");
  for (const auto& p : {opt.checkpoint, opt.observations, opt.taxonomy})
    if (!fs::exists(p)) throw ConfigError("no such file: " + p);
  const fs::path out(opt.output);
  ensure_dir(out);
  ModelBundle b = load_checkpoint(opt.checkpoint);
  Dataset d = load_dataset(opt.observations, opt.taxonomy, opt.world, opt.raster, b.model.fusion().satellite);
  TaxonomyTree taxonomy = checked_model_taxonomy(b, d.taxonomy);

  std::vector<Observation> known, unknown;
  std::vector<std::size_t> labels;
  for (const auto& o : d.observations) {
    if (auto id = taxonomy.find(Level::species, o.species)) {
      known.push_back(o);
      labels.push_back(*id);
    } else {
      unknown.push_back(o);
    }
  }
  EvalResult r;
  r.known = known.size();
  r.unknown = unknown.size();
  if (known.empty() && !opt.unseen) throw DataError("no observation belongs to a species the model knows");

  std::ofstream report = open_output(out / "metrics.txt");
  nlohmann::json j;
  j["known_observations"] = r.known;
  j["unknown_observations"] = r.unknown;
  report << "known_observations=" << r.known << '\n' << "unknown_observations=" << r.unknown << '\n';

  if (!known.empty()) {
    Posteriors post = predict(b, d, taxonomy, known);
    if (opt.per_level) {
      r.metrics = per_level_metrics(post, labels, taxonomy, opt.rollup);
      report << "rollup=" << rollup_name(opt.rollup) << '\n';
      j["rollup"] = rollup_name(opt.rollup);
    } else {
      r.metrics = {species_metrics(post, labels)};
    }
    write_metrics_text(report, r.metrics);
    j["metrics"] = metrics_json(r.metrics);

    if (opt.confusion) {
      r.confusion = confusion_matrix(argmax_all(post), labels, taxonomy);
      write_confusion_files(out, *r.confusion, taxonomy);
    }
    if (!opt.bands.empty()) {
      ModelBundle base = load_checkpoint(opt.bands);
      if (base.taxonomy_fingerprint != b.taxonomy_fingerprint)
        throw DataError("baseline checkpoint was trained on a different taxonomy");
      Posteriors base_post = predict(base, d, taxonomy, known);
      std::vector<std::size_t> counts(taxonomy.num_species(), 0);
      const auto count_obs = opt.band_counts.empty() ? d.observations
                                                     : parse_observations_file(opt.band_counts).observations;
      for (const auto& o : count_obs)
        if (auto id = taxonomy.find(Level::species, o.species)) ++counts[*id];
      r.bands = accuracy_by_frequency_band(post, base_post, labels, counts, default_frequency_bands());
      auto f = open_output(out / "bands.csv");
      f << "band,species,model_accuracy,baseline_accuracy,delta\n";
      for (const auto& band : *r.bands) {
        f << band.band.label() << ',' << band.species;
        for (const auto& v : {band.model_accuracy, band.baseline_accuracy, band.delta})
          f << ',' << (v ? fmt_percent(*v) : std::string("-"));
        f << '\n';
      }
    }
  }

  if (opt.unseen) {
    std::vector<Observation> evaluable;
    std::vector<TaxonRecord> lineages;
    for (const auto& o : unknown) {
      auto id = d.taxonomy.find(Level::species, o.species);
      if (!id) continue;  // no lineage at all; counted in unknown_observations
      evaluable.push_back(o);
      lineages.push_back(d.taxonomy.record(*id));
    }
    if (evaluable.empty()) throw DataError("no unseen-species observations with a known lineage");
    Posteriors post = predict(b, d, taxonomy, evaluable);
    r.unseen = unseen_species_eval(post, lineages, taxonomy, opt.rollup);
    auto f = open_output(out / "unseen.txt");
    write_unseen_text(f, *r.unseen);
    j["unseen"] = unseen_json(*r.unseen);
  }
  auto f = open_output(out / "metrics.json");
  f << j.dump(2) << '\n';
  return r;
}

// ---------------------------------------------------------------------------
// predict

struct PredictOptions {
  std::string checkpoint;
  std::string taxonomy;
  std::string image;
  std::optional<double> longitude, latitude, altitude, day_of_year;
  std::string world;
  std::string raster;
};

struct Prediction {
  std::vector<std::pair<std::string, double>> top;  // up to five species, best first
  TaxonRecord lineage;                              // of the best species
  bool used_context = false;
};

inline Prediction cmd_predict(const PredictOptions& opt) {
  if (opt.checkpoint.empty() || opt.taxonomy.empty() || opt.image.empty())
    throw ConfigError("predict needs checkpoint, taxonomy and image");
  ModelBundle b = load_checkpoint(opt.checkpoint);
  TaxonomyTree taxonomy = checked_model_taxonomy(b, TaxonomyTree::build(read_taxonomy_file(opt.taxonomy)));
  const auto mode = b.model.fusion();
  const bool have_meta = opt.longitude && opt.latitude && opt.altitude && opt.day_of_year;
  if (!have_meta && mode.requires_context())
    throw ConfigError("fusion mode '" + std::string(fusion_name(mode.tag)) +
                      "' needs longitude, latitude, altitude and day_of_year");

  Dataset d;
  d.taxonomy = taxonomy;
  if (!opt.world.empty()) d.world = std::make_shared<const SyntheticWorld>(SyntheticWorld::from_sidecar(opt.world));
  d.images = ImageSource(d.world);
  bool use_context = have_meta && mode.uses_context();
  if (use_context && mode.satellite) {
    if (opt.raster.empty()) {
      if (mode.requires_context()) throw ConfigError("satellite branch enabled but no raster given");
      use_context = false;
    } else {
      d.raster = InMemoryRaster::open(opt.raster);
    }
  }
  Observation o;
  o.id = "query";
  o.image_ref = opt.image;
  o.species = taxonomy.name(Level::species, 0);
  if (have_meta) o.context = {*opt.longitude, *opt.latitude, *opt.altitude, *opt.day_of_year};
  std::vector<Observation> one{o};
  auto post = predict(b, d, taxonomy, one, use_context).front();

  Prediction p;
  p.used_context = use_context;
  std::vector<std::size_t> order(post.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return post[a] > post[c]; });
  for (std::size_t i = 0; i < std::min<std::size_t>(5, order.size()); ++i)
    p.top.emplace_back(taxonomy.name(Level::species, order[i]), post[order[i]]);
  p.lineage = taxonomy.record(order[0]);
  return p;
}

inline void write_prediction(std::ostream& out, const Prediction& p) {
  out << "context=" << (p.used_context ? "used" : "ignored") << '\n';
  for (std::size_t i = 0; i < p.top.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", p.top[i].second);
    out << "top" << i + 1 << '=' << p.top[i].first << ' ' << buf << '\n';
  }
  for (Level l : kAllLevels) out << level_name(l) << '=' << p.lineage.at(l) << '\n';
}

}  // namespace taxofuse
