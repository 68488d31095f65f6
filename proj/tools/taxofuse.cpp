// taxofuse command-line entry point: synth, train, cv, eval, predict.
//
// Every subcommand takes --config <file> with flat key=value lines; any key
// can be overridden by the flag of the same name. train and cv echo the
// resolved configuration into their output directory as config.ini.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "taxofuse/commands.hpp"

namespace {

using namespace taxofuse;

// Enumerated settings are bound as text so the config echo stays readable.
struct ExperimentOptions {
  ExperimentConfig c;
  std::string fusion{fusion_name(c.fusion)};
  std::string loss{loss_name(c.loss)};

  const ExperimentConfig& resolve() {
    c.fusion = parse_fusion(fusion);
    c.loss = parse_loss(loss);
    return c;
  }
};

// Subcommand config files are not read by CLI11 itself, so each subcommand
// gets a plain --config option and apply_config() fills in every option the
// command line left unset.
void add_config_option(CLI::App& app, std::string& path) {
  app.add_option("--config", path, "flat key=value configuration file")->configurable(false);
}

void apply_config(CLI::App& app, const std::string& path) {
  if (path.empty()) return;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  for (const auto& item : CLI::ConfigTOML().from_config(in)) {
    if (item.name == "++" || item.name == "--") continue;
    if (!item.parents.empty()) throw ConfigError("config file " + path + ": sections are not supported");
    CLI::Option* op = app.get_option_no_throw("--" + item.name);
    if (op == nullptr || !op->get_configurable())
      throw ConfigError("config file " + path + ": unknown key '" + item.name + "'");
    if (op->count() > 0) continue;
    op->add_result(item.inputs);
    op->run_callback();
  }
}

void add_experiment_options(CLI::App& app, ExperimentOptions& opts, std::string& config) {
  ExperimentConfig& c = opts.c;
  add_config_option(app, config);
  app.add_option("--observations", c.observations, "observation CSV")->group("Data");
  app.add_option("--taxonomy", c.taxonomy, "taxonomy CSV")->group("Data");
  app.add_option("--raster", c.raster, "satellite raster (default: satellite.rst beside the observations)")->group("Data");
  app.add_option("--world", c.world, "synthetic sidecar (default: ground_truth.json beside the observations)")->group("Data");
  app.add_option("--holdout", c.holdout, "holdout observations (test set for folds=1, validation for train)")->group("Data");
  app.add_option("--output", c.output, "output directory")->capture_default_str();

  app.add_option("--fusion", opts.fusion)
      ->check(CLI::IsMember({"image", "early", "separate", "late"}))
      ->capture_default_str()->group("Model");
  app.add_option("--loss", opts.loss)
      ->check(CLI::IsMember({"cross_entropy", "marginalisation"}))
      ->capture_default_str()->group("Model");
  app.add_option("--balanced", c.balanced, "inverse-frequency sampling")->capture_default_str()->group("Model");
  app.add_option("--satellite", c.satellite, "add the satellite branch")->capture_default_str()->group("Model");
  app.add_option("--patch_extent", c.patch_extent, "satellite patch side in pixels (128, 256 or 512)")
      ->capture_default_str()->group("Model");
  app.add_option("--satellite_size", c.satellite_size, "satellite branch input size")->capture_default_str()->group("Model");
  app.add_option("--dropout", c.dropout, "dropout before the classification heads")->capture_default_str()->group("Model");
  app.add_option("--dropout_rate", c.dropout_rate)->capture_default_str()->group("Model");
  app.add_option("--augment", c.augment, "training-time image augmentation")->capture_default_str()->group("Model");
  app.add_option("--image_resize", c.image_resize)->capture_default_str()->group("Model");
  app.add_option("--image_crop", c.image_crop)->capture_default_str()->group("Model");
  app.add_option("--image_widths", c.image_widths, "image encoder channel widths")
      ->delimiter(',')->capture_default_str()->group("Model");
  app.add_option("--context_hidden", c.context_hidden, "context MLP hidden widths")
      ->delimiter(',')->capture_default_str()->group("Model");
  app.add_option("--satellite_widths", c.satellite_widths, "satellite encoder channel widths")
      ->delimiter(',')->capture_default_str()->group("Model");
  app.add_option("--early_hidden", c.early_hidden)->capture_default_str()->group("Model");

  app.add_option("--lr_conv", c.lr_conv, "learning rate of convolutional layers")->capture_default_str()->group("Optimizer");
  app.add_option("--lr_fc", c.lr_fc, "learning rate of fully connected layers")->capture_default_str()->group("Optimizer");
  app.add_option("--batch_size", c.batch_size)->capture_default_str()->group("Optimizer");
  app.add_option("--epochs", c.epochs)->capture_default_str()->group("Optimizer");
  app.add_option("--plateau_patience", c.plateau_patience)->capture_default_str()->group("Optimizer");
  app.add_option("--plateau_factor", c.plateau_factor)->capture_default_str()->group("Optimizer");
  app.add_option("--min_lr", c.min_lr)->capture_default_str()->group("Optimizer");

  app.add_option("--folds", c.folds)->capture_default_str()->group("Protocol");
  app.add_option("--threads", c.threads, "folds trained concurrently")->capture_default_str()->group("Protocol");
  app.add_option("--seed", c.seed)->capture_default_str()->group("Protocol");
  app.add_option("--min_count", c.min_count, "minimum observations per trained species")->capture_default_str()->group("Protocol");
  app.add_option("--unseen_min", c.unseen_min)->capture_default_str()->group("Protocol");
  app.add_option("--unseen_take", c.unseen_take)->capture_default_str()->group("Protocol");
}

void echo_config(const CLI::App& app, const std::string& dir) {
  ensure_dir(dir);
  auto out = open_output(std::filesystem::path(dir) / "config.ini");
  out << app.config_to_str(true, false);
}

int exit_code_for(const std::exception_ptr& ep) {
  try {
    std::rethrow_exception(ep);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"taxonomy-aware fusion of images and observation context"};
  app.require_subcommand(1);

  // synth
  SyntheticConfig sc;
  std::string synth_out = "synthetic";
  std::vector<std::size_t> branching(sc.branching.begin(), sc.branching.end());
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset with known ground truth");
  std::string synth_config, train_config, cv_config, eval_config, predict_config;
  add_config_option(*synth, synth_config);
  synth->add_option("--output", synth_out)->capture_default_str();
  synth->add_option("--branching", branching, "children per parent: species/genus .. classes/phylum")
      ->delimiter(',')->expected(5)->capture_default_str();
  synth->add_option("--phyla", sc.phyla)->capture_default_str();
  synth->add_option("--min_obs", sc.min_obs)->capture_default_str();
  synth->add_option("--max_obs", sc.max_obs)->capture_default_str();
  synth->add_option("--power_law", sc.power_law)->capture_default_str();
  synth->add_option("--ambiguity_pairs", sc.ambiguity_pairs)->capture_default_str();
  synth->add_option("--hierarchy_consistent", sc.hierarchy_consistent)->capture_default_str();
  synth->add_option("--pair_separation", sc.pair_separation)->capture_default_str();
  synth->add_option("--unseen_per_genus", sc.unseen_per_genus)->capture_default_str();
  synth->add_option("--unseen_min_obs", sc.unseen_min_obs)->capture_default_str();
  synth->add_option("--unseen_max_obs", sc.unseen_max_obs)->capture_default_str();
  synth->add_option("--range_sigma", sc.range_sigma)->capture_default_str();
  synth->add_option("--season_kappa", sc.season_kappa)->capture_default_str();
  synth->add_option("--image_size", sc.image_size)->capture_default_str();
  synth->add_option("--image_noise", sc.image_noise)->capture_default_str();
  synth->add_option("--background_strength", sc.background_strength, "habitat background around the object")
      ->capture_default_str();
  synth->add_option("--raster_core", sc.raster_core)->capture_default_str();
  synth->add_option("--raster_margin", sc.raster_margin)->capture_default_str();
  synth->add_option("--seed", sc.seed)->capture_default_str();

  // train / cv
  ExperimentOptions train_opts, cv_opts;
  auto* train = app.add_subcommand("train", "train one model on all selected species");
  add_experiment_options(*train, train_opts, train_config);
  auto* cv = app.add_subcommand("cv", "stratified k-fold cross-validation");
  add_experiment_options(*cv, cv_opts, cv_config);
  bool verbose = false;
  for (auto* s : {train, cv}) s->add_flag("--verbose", verbose, "print one JSON line per epoch")->configurable(false);

  // eval
  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on an observation file");
  add_config_option(*eval, eval_config);
  eval->add_option("--checkpoint", eo.checkpoint)->group("Required");
  eval->add_option("--observations", eo.observations)->group("Required");
  eval->add_option("--taxonomy", eo.taxonomy)->group("Required");
  eval->add_option("--world", eo.world);
  eval->add_option("--raster", eo.raster);
  eval->add_option("--output", eo.output)->capture_default_str();
  eval->add_flag("--per-level,--per_level", eo.per_level, "metrics at all six levels");
  eval->add_flag("--unseen", eo.unseen, "evaluate observations of species the model never saw");
  eval->add_flag("--confusion", eo.confusion, "write the taxonomy-ordered confusion matrix");
  eval->add_option("--bands", eo.bands, "baseline checkpoint for accuracy by training-frequency band");
  eval->add_option("--band_counts", eo.band_counts, "observation file whose species counts define the bands");
  std::string rollup{rollup_name(eo.rollup)};
  eval->add_option("--rollup", rollup)->check(CLI::IsMember({"marginalise", "ancestor"}))->capture_default_str();

  // predict
  PredictOptions po;
  double lon = 0, lat = 0, alt = 0, day = 0;
  auto* predict_cmd = app.add_subcommand("predict", "top-5 species for one observation");
  add_config_option(*predict_cmd, predict_config);
  predict_cmd->add_option("--checkpoint", po.checkpoint)->group("Required");
  predict_cmd->add_option("--taxonomy", po.taxonomy)->group("Required");
  predict_cmd->add_option("--image", po.image, "PPM file or synth:<prototype>:<seed>")->group("Required");
  auto* o_lon = predict_cmd->add_option("--longitude", lon);
  auto* o_lat = predict_cmd->add_option("--latitude", lat);
  auto* o_alt = predict_cmd->add_option("--altitude", alt);
  auto* o_day = predict_cmd->add_option("--day_of_year", day);
  predict_cmd->add_option("--world", po.world, "synthetic sidecar for synth: images");
  predict_cmd->add_option("--raster", po.raster);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    for (auto [sub, path] : {std::pair{synth, &synth_config}, {train, &train_config}, {cv, &cv_config},
                             {eval, &eval_config}, {predict_cmd, &predict_config}})
      if (sub->parsed()) apply_config(*sub, *path);
    for (auto* sub : {eval, predict_cmd}) {
      if (!sub->parsed()) continue;
      for (const char* key : {"--checkpoint", "--taxonomy"})
        if (sub->get_option(key)->count() == 0) throw ConfigError(std::string(key + 2) + " is required");
    }
    if (predict_cmd->parsed() && predict_cmd->get_option("--image")->count() == 0)
      throw ConfigError("image is required");
    if (eval->parsed() && eval->get_option("--observations")->count() == 0)
      throw ConfigError("observations is required");
    if (synth->parsed()) {
      std::copy(branching.begin(), branching.end(), sc.branching.begin());
      auto w = cmd_synth(sc, synth_out);
      std::cout << "wrote " << w.observations().size() << " observations of " << w.species().size()
                << " species to " << synth_out << '\n';
    } else if (train->parsed()) {
      const auto& train_cfg = train_opts.resolve();
      train_cfg.validate();
      echo_config(*train, train_cfg.output);
      auto t = cmd_train(train_cfg, verbose ? &std::cout : nullptr);
      std::cout << "checkpoint: " << (std::filesystem::path(train_cfg.output) / "model.ckpt").string() << '\n';
    } else if (cv->parsed()) {
      const auto& cv_cfg = cv_opts.resolve();
      cv_cfg.validate();
      echo_config(*cv, cv_cfg.output);
      auto r = cmd_cv(cv_cfg, verbose ? &std::cout : nullptr);
      write_metrics_text(std::cout, {r.marginalise.front()}, "mean.");
    } else if (eval->parsed()) {
      eo.rollup = parse_rollup(rollup);
      auto r = cmd_eval(eo);
      write_metrics_text(std::cout, r.metrics);
      if (r.unseen) write_unseen_text(std::cout, *r.unseen);
    } else if (predict_cmd->parsed()) {
      if (o_lon->count()) po.longitude = lon;
      if (o_lat->count()) po.latitude = lat;
      if (o_alt->count()) po.altitude = alt;
      if (o_day->count()) po.day_of_year = day;
      write_prediction(std::cout, cmd_predict(po));
    }
  } catch (...) {
    return exit_code_for(std::current_exception());
  }
  return 0;
}
