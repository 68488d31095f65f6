#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"
#include "taxofuse/synthetic.hpp"

using namespace taxofuse;
using namespace testing_support;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SyntheticConfig small_config() {
  SyntheticConfig c;
  c.branching = {3, 2, 2, 1, 1};
  c.ambiguity_pairs = 2;
  c.image_size = 8;
  c.raster_core = 32;
  c.raster_margin = 64;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(Synthetic, SameSeedGivesIdenticalFiles) {
  auto a = temp_dir("synth_a"), b = temp_dir("synth_b");
  generate_synthetic(small_config()).write(a);
  generate_synthetic(small_config()).write(b);
  for (const char* f : {"observations.csv", "taxonomy.csv", "satellite.rst", "ground_truth.json"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  auto c = small_config();
  c.seed = 6;
  auto d = temp_dir("synth_c");
  generate_synthetic(c).write(d);
  EXPECT_NE(slurp(a / "observations.csv"), slurp(d / "observations.csv"));
}

TEST(Synthetic, TaxonomyShape) {
  auto w = generate_synthetic(small_config());
  auto tree = TaxonomyTree::build(w.taxonomy_records());
  EXPECT_EQ(tree.cardinalities(), (std::array<std::size_t, 6>{12, 4, 2, 1, 1, 1}));
}

TEST(Synthetic, PosteriorNormalized) {
  auto w = generate_synthetic(small_config());
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> lon(6.0, 10.0), lat(45.8, 47.8), day(0, 365);
  for (int i = 0; i < 50; ++i) {
    auto p = w.true_posterior({lon(rng), lat(rng), 0, day(rng)});
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    for (double v : p) EXPECT_GE(v, 0.0);
  }
}

TEST(Synthetic, AmbiguityPairsShareLooksNotRanges) {
  auto cfg = small_config();
  auto w = generate_synthetic(cfg);
  ASSERT_EQ(w.ambiguity_pairs().size(), 2u);
  for (auto [a, b] : w.ambiguity_pairs()) {
    const auto& sa = w.species()[a];
    const auto& sb = w.species()[b];
    EXPECT_EQ(sa.genus, sb.genus);  // hierarchy-consistent pairs are congeners
    EXPECT_EQ(w.render(sa.prototype, 3), w.render(sb.prototype, 3));
    double dist = std::hypot(sa.u - sb.u, sa.v - sb.v);
    EXPECT_GE(dist, cfg.pair_separation * cfg.range_sigma - 1e-12);
  }
}

TEST(Synthetic, CountsFollowConfig) {
  auto cfg = small_config();
  cfg.power_law = 0.0;
  cfg.max_obs = 20;
  auto w = generate_synthetic(cfg);
  for (const auto& s : w.species()) EXPECT_EQ(s.count, 20u);
  EXPECT_EQ(w.observations().size(), 20u * 12);

  cfg.power_law = 1.0;
  cfg.unseen_per_genus = 1;
  auto u = generate_synthetic(cfg);
  std::size_t unseen = 0;
  for (const auto& s : u.species()) {
    if (s.unseen_candidate) {
      ++unseen;
      EXPECT_GE(s.count, cfg.unseen_min_obs);
      EXPECT_LE(s.count, cfg.unseen_max_obs);
    } else {
      EXPECT_GE(s.count, cfg.min_obs);
    }
  }
  EXPECT_EQ(unseen, 4u);
}

TEST(Synthetic, ObservationsInsideRegion) {
  auto cfg = small_config();
  auto w = generate_synthetic(cfg);
  for (const auto& o : w.observations()) {
    EXPECT_GE(o.context.longitude, cfg.lon_min);
    EXPECT_LE(o.context.longitude, cfg.lon_max);
    EXPECT_GE(o.context.latitude, cfg.lat_min);
    EXPECT_LE(o.context.latitude, cfg.lat_max);
    EXPECT_GE(o.context.day_of_year, 0.0);
    EXPECT_LT(o.context.day_of_year, 366.0);
  }
}

TEST(Synthetic, BackgroundRefsCarryLocation) {
  auto cfg = small_config();
  cfg.background_strength = 1.0;
  auto w = generate_synthetic(cfg);
  const auto& ref = w.observations().front().image_ref;
  ASSERT_NE(ref.find('@'), std::string::npos) << ref;
  auto img = w.render(ref);
  EXPECT_EQ(img.shape(), (nd::Shape{3, 8, 8}));
  EXPECT_EQ(img, w.render(ref));
  EXPECT_EQ(generate_synthetic(small_config()).observations().front().image_ref.find('@'), std::string::npos);
}

TEST(Synthetic, SidecarRebuildsTheWorld) {
  auto dir = temp_dir("synth_sidecar");
  auto w = generate_synthetic(small_config());
  w.write(dir);
  auto back = SyntheticWorld::from_sidecar(dir / "ground_truth.json");
  const auto& ref = w.observations()[3].image_ref;
  EXPECT_EQ(back.render(ref), w.render(ref));
  EXPECT_EQ(back.taxonomy_records(), w.taxonomy_records());
}

TEST(Synthetic, ImpossiblePairPlacementIsAnError) {
  auto cfg = small_config();
  cfg.ambiguity_pairs = 50;
  EXPECT_THROW(generate_synthetic(cfg), Error);
}
