#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"
#include "taxofuse/commands.hpp"

using namespace taxofuse;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SyntheticConfig tiny_world() {
  SyntheticConfig c;
  c.branching = {3, 2, 1, 1, 1};
  c.ambiguity_pairs = 1;
  c.unseen_per_genus = 1;
  c.image_size = 8;
  c.max_obs = 20;
  c.raster_core = 32;
  c.raster_margin = 64;
  c.seed = 3;
  return c;
}

// One shared world for the whole file.
const fs::path& world_dir() {
  static const fs::path dir = [] {
    auto d = temp_dir("cmd_world");
    cmd_synth(tiny_world(), d);
    return d;
  }();
  return dir;
}

ExperimentConfig tiny_experiment(const std::string& out) {
  ExperimentConfig c;
  c.observations = (world_dir() / "observations.csv").string();
  c.taxonomy = (world_dir() / "taxonomy.csv").string();
  c.output = out;
  c.image_resize = 8;
  c.image_crop = 8;
  c.image_widths = {4};
  c.context_hidden = {8};
  c.epochs = 2;
  c.batch_size = 8;
  c.lr_conv = 0.01;
  c.lr_fc = 0.05;
  c.folds = 2;
  return c;
}

int run_cli(const std::string& args) {
  int status = std::system((std::string(TAXOFUSE_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Synth, ByteIdenticalForSameSeed) {
  auto other = temp_dir("cmd_world_again");
  cmd_synth(tiny_world(), other);
  for (const char* f : {"observations.csv", "taxonomy.csv", "ground_truth.json", "satellite.rst"})
    EXPECT_EQ(slurp(world_dir() / f), slurp(other / f)) << f;
}

TEST(Cv, DeterministicReports) {
  auto a = temp_dir("cmd_cv_a"), b = temp_dir("cmd_cv_b");
  cmd_cv(tiny_experiment(a.string()));
  cmd_cv(tiny_experiment(b.string()));
  EXPECT_EQ(slurp(a / "metrics.txt"), slurp(b / "metrics.txt"));
  EXPECT_EQ(slurp(a / "metrics.json"), slurp(b / "metrics.json"));
  EXPECT_TRUE(fs::exists(a / "confusion.csv"));
  auto report = slurp(a / "metrics.txt");
  EXPECT_NE(report.find("mean.ancestor.phylum.top1="), std::string::npos);
  EXPECT_NE(report.find("fold1."), std::string::npos);
}

TEST(Cv, MoreFoldsThanMembersIsADataError) {
  auto cfg = tiny_experiment(temp_dir("cmd_cv_err").string());
  cfg.folds = 50;
  EXPECT_THROW(cmd_cv(cfg), DataError);
}

TEST(Train, EvalAndPredictRoundTrip) {
  auto out = temp_dir("cmd_train");
  auto cfg = tiny_experiment(out.string());
  cfg.fusion = FusionTag::separate;
  cmd_train(cfg);
  for (const char* f : {"model.ckpt", "model_taxonomy.csv", "unseen_observations.csv", "train_log.jsonl", "split.txt"})
    EXPECT_TRUE(fs::exists(out / f)) << f;

  EvalOptions e;
  e.checkpoint = (out / "model.ckpt").string();
  e.observations = cfg.observations;
  e.taxonomy = cfg.taxonomy;
  e.output = (out / "eval").string();
  e.per_level = true;
  e.unseen = true;
  e.confusion = true;
  e.rollup = Rollup::ancestor;
  auto r = cmd_eval(e);
  ASSERT_EQ(r.metrics.size(), 6u);
  for (std::size_t l = 1; l < 6; ++l) EXPECT_GE(r.metrics[l].accuracy, r.metrics[l - 1].accuracy);
  ASSERT_TRUE(r.unseen);
  EXPECT_FALSE(r.unseen->levels[0].accuracy);
  EXPECT_GT(r.unknown, 0u);
  EXPECT_EQ(r.confusion->total(), r.known);
  EXPECT_TRUE(fs::exists(out / "eval" / "unseen.txt"));

  PredictOptions p;
  p.checkpoint = e.checkpoint;
  p.taxonomy = cfg.taxonomy;
  p.image = "synth:0:77";
  p.world = (world_dir() / "ground_truth.json").string();
  auto image_only = cmd_predict(p);
  EXPECT_FALSE(image_only.used_context);
  EXPECT_EQ(image_only.top.size(), 4u);  // six species, two held out as unseen
  for (std::size_t i = 1; i < image_only.top.size(); ++i) EXPECT_LE(image_only.top[i].second, image_only.top[i - 1].second);
  EXPECT_EQ(image_only.lineage.species(), image_only.top[0].first);
  p.longitude = 8.0;
  p.latitude = 46.8;
  p.altitude = 500;
  p.day_of_year = 120;
  auto with_ctx = cmd_predict(p);
  EXPECT_TRUE(with_ctx.used_context);
  EXPECT_EQ(cmd_predict(p).top, with_ctx.top);
}

TEST(Predict, LateFusionNeedsMetadata) {
  auto out = temp_dir("cmd_train_late");
  auto cfg = tiny_experiment(out.string());
  cfg.epochs = 1;
  cmd_train(cfg);
  PredictOptions p;
  p.checkpoint = (out / "model.ckpt").string();
  p.taxonomy = cfg.taxonomy;
  p.image = "synth:0:1";
  p.world = (world_dir() / "ground_truth.json").string();
  try {
    cmd_predict(p);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("late"), std::string::npos);
  }
}

TEST(Eval, TaxonomyMismatchIsRejected) {
  auto out = temp_dir("cmd_mismatch");
  auto cfg = tiny_experiment(out.string());
  cfg.epochs = 1;
  cmd_train(cfg);
  auto recs = read_taxonomy_file(cfg.taxonomy);
  for (auto& r : recs)
    if (r.at(Level::genus) == recs[0].at(Level::genus)) r.names[1] = "Renamedgenus";
  {
    std::ofstream f(out / "other_taxonomy.csv");
    write_taxonomy_records(f, recs);
  }
  EvalOptions e;
  e.checkpoint = (out / "model.ckpt").string();
  e.observations = cfg.observations;
  e.taxonomy = (out / "other_taxonomy.csv").string();
  e.output = (out / "eval").string();
  try {
    cmd_eval(e);
    FAIL();
  } catch (const DataError& err) {
    EXPECT_NE(std::string(err.what()).find("fingerprint mismatch"), std::string::npos);
  }
}

TEST(Config, ValidationErrors) {
  auto cfg = tiny_experiment("unused");
  cfg.observations = "/nonexistent.csv";
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_experiment("unused");
  cfg.folds = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_experiment("unused");
  cfg.satellite = true;
  cfg.patch_extent = 100;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Cli, ExitCodesAndConfigEcho) {
  auto dir = temp_dir("cli");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("cv --observations " + (dir / "missing.csv").string() + " --taxonomy x"), 1);

  // Data error: an observation file without the species column.
  {
    std::ofstream f(dir / "bad.csv");
    f << "id,image_path,longitude,latitude,altitude,day_of_year\n";
  }
  std::string common = " --taxonomy " + (world_dir() / "taxonomy.csv").string() +
                       " --image_resize 8 --image_crop 8 --image_widths 4 --context_hidden 8 --epochs 1 --folds 2";
  EXPECT_EQ(run_cli("cv --observations " + (dir / "bad.csv").string() + common + " --output " + (dir / "bad").string()), 2);

  // A run's config echo reproduces the run.
  std::string first = (dir / "first").string();
  ASSERT_EQ(run_cli("cv --observations " + (world_dir() / "observations.csv").string() + common + " --output " + first), 0);
  ASSERT_TRUE(fs::exists(fs::path(first) / "config.ini"));
  std::string second = (dir / "second").string();
  ASSERT_EQ(run_cli("cv --config " + first + "/config.ini --output " + second), 0);
  EXPECT_EQ(slurp(fs::path(first) / "metrics.txt"), slurp(fs::path(second) / "metrics.txt"));

  {
    std::ofstream f(dir / "unknown.ini");
    f << "no_such_key=3\n";
  }
  EXPECT_EQ(run_cli("cv --config " + (dir / "unknown.ini").string()), 1);
}
