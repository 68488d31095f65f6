#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"
#include "taxofuse/csv.hpp"
#include "taxofuse/taxonomy.hpp"

using namespace taxofuse;
using namespace testing_support;

TEST(Taxonomy, ToyCardinalities) {
  auto tree = toy_tree();
  EXPECT_EQ(tree.cardinalities(), (std::array<std::size_t, 6>{6, 3, 2, 1, 1, 1}));
}

TEST(Taxonomy, SingleRecordIsAChain) {
  std::vector<TaxonRecord> one{lineage("a", "b", "c", "d", "e", "f")};
  auto tree = TaxonomyTree::build(one);
  EXPECT_EQ(tree.cardinalities(), (std::array<std::size_t, 6>{1, 1, 1, 1, 1, 1}));
}

TEST(Taxonomy, PaperScaleCardinalities) {
  std::mt19937_64 rng(977);
  auto recs = random_records(rng, 977, {489, 121, 50, 8, 3});
  auto tree = TaxonomyTree::build(recs);
  EXPECT_EQ(tree.cardinalities(), (std::array<std::size_t, 6>{977, 489, 121, 50, 8, 3}));
}

TEST(Taxonomy, DepthFirstLexicographicOrder) {
  auto tree = toy_tree();
  std::vector<std::string> expected{"Cyanistes caeruleus", "Cyanistes teneriffae", "Parus major",
                                    "Parus minor", "Sitta europaea", "Sitta neumayer"};
  for (std::size_t s = 0; s < 6; ++s) EXPECT_EQ(tree.name(Level::species, s), expected[s]);
  EXPECT_EQ(tree.block_starts(Level::genus), (std::vector<std::size_t>{0, 2, 4, 6}));
  EXPECT_EQ(tree.block_starts(Level::family), (std::vector<std::size_t>{0, 4, 6}));
}

TEST(Taxonomy, OrderIndependentOfInput) {
  std::mt19937_64 rng(4);
  auto recs = random_records(rng, 150, {60, 20, 8, 4, 2});
  auto a = TaxonomyTree::build(recs);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(recs.begin(), recs.end(), rng);
    auto b = TaxonomyTree::build(recs);
    EXPECT_EQ(a.records(), b.records());
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
  }
}

TEST(Taxonomy, BuildErrors) {
  auto recs = toy_records();
  recs.push_back(recs[0]);
  EXPECT_THROW(TaxonomyTree::build(recs), DataError);

  recs = toy_records();
  recs[1].names[2] = "Sittidae";  // Parus now under two families
  try {
    TaxonomyTree::build(recs);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("Parus"), std::string::npos);
  }

  recs = toy_records();
  recs[0].names[3] = "";
  EXPECT_THROW(TaxonomyTree::build(recs), DataError);
  EXPECT_THROW(TaxonomyTree::build(std::vector<TaxonRecord>{}), DataError);
}

TEST(Taxonomy, ForestInvariants) {
  std::mt19937_64 rng(11);
  auto tree = TaxonomyTree::build(random_records(rng, 200, {80, 30, 10, 4, 2}));
  for (Level l : kAllLevels) {
    for (std::size_t id = 0; id < tree.size(l); ++id) {
      if (l == Level::phylum) {
        EXPECT_FALSE(tree.parent(l, id));
        continue;
      }
      auto p = *tree.parent(l, id);
      Level up = level_from_index(level_index(l) + 1);
      ASSERT_LT(p, tree.size(up));
      const auto& kids = tree.children(up, p);
      EXPECT_EQ(std::count(kids.begin(), kids.end(), id), 1);
    }
  }
  // Ancestor table equals stepwise parent walk.
  for (std::size_t s = 0; s < tree.num_species(); ++s) {
    std::size_t id = s;
    for (Level l : kAllLevels) {
      EXPECT_EQ(ancestor_at_level(tree, s, l), id);
      if (l != Level::phylum) id = *tree.parent(l, id);
    }
  }
  EXPECT_EQ(ancestor_at_level(tree, 17, Level::species), 17u);
}

TEST(Marginalise, HandExamples) {
  auto tree = toy_tree();
  ScoreDistribution one_hot{Level::species, {0, 0, 1, 0, 0, 0}};
  auto all = marginalise_all(tree, one_hot);
  ASSERT_EQ(all.size(), 6u);
  EXPECT_EQ(all[0].values, one_hot.values);
  for (Level l : kAllLevels) {
    const auto& v = all[level_index(l)].values;
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v[i], i == tree.ancestor(2, l) ? 1.0 : 0.0);
  }

  // Genus child counts (3, 2, 1).
  std::vector<TaxonRecord> recs{lineage("a1", "A", "F", "O", "C", "P"), lineage("a2", "A", "F", "O", "C", "P"),
                                lineage("a3", "A", "F", "O", "C", "P"), lineage("b1", "B", "F", "O", "C", "P"),
                                lineage("b2", "B", "G", "O", "C", "P"), lineage("c1", "C", "G", "O", "C", "P")};
  recs[4].names[2] = "F";
  recs[5].names[2] = "G";
  auto t2 = TaxonomyTree::build(recs);
  auto g = marginalise(t2, {Level::species, std::vector<double>(6, 1.0 / 6)});
  EXPECT_EQ(g.level, Level::genus);
  EXPECT_NEAR(g.values[0], 0.5, 1e-15);
  EXPECT_NEAR(g.values[1], 1.0 / 3, 1e-15);
  EXPECT_NEAR(g.values[2], 1.0 / 6, 1e-15);
  auto f = marginalise(t2, g);
  EXPECT_NEAR(f.values[0], 5.0 / 6, 1e-15);
  EXPECT_NEAR(f.values[1], 1.0 / 6, 1e-15);
}

TEST(Marginalise, RejectsBadInput) {
  auto tree = toy_tree();
  EXPECT_THROW(marginalise(tree, {Level::species, {1.0, 0.0}}), ConfigError);
  EXPECT_THROW(marginalise(tree, {Level::phylum, {1.0}}), ConfigError);
  EXPECT_THROW(marginalise_all(tree, {Level::genus, {1.0, 0.0, 0.0}}), ConfigError);
}

TEST(Marginalise, BruteForceOracleOnRandomTrees) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    std::size_t n = std::uniform_int_distribution<std::size_t>(1, 200)(rng);
    std::array<std::size_t, 5> coarse{};
    std::size_t below = n;
    for (auto& c : coarse) below = c = std::uniform_int_distribution<std::size_t>(1, below)(rng);
    auto tree = TaxonomyTree::build(random_records(rng, n, coarse));
    auto d = random_distribution(rng, n);
    auto all = marginalise_all(tree, {Level::species, d});
    for (int l = 1; l < kNumLevels; ++l) {
      Level up = level_from_index(l);
      auto oracle = brute_force_marginal(tree, d, up);
      ASSERT_EQ(all[l].values.size(), oracle.size());
      for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(all[l].values[i], oracle[i], 1e-12);
      double s = std::accumulate(all[l].values.begin(), all[l].values.end(), 0.0);
      EXPECT_LE(std::abs(s - 1.0), 1e-12 * n);
    }
  }
}

TEST(Marginalise, Linearity) {
  std::mt19937_64 rng(5);
  auto tree = TaxonomyTree::build(random_records(rng, 60, {25, 9, 4, 2, 1}));
  for (int trial = 0; trial < 20; ++trial) {
    auto d1 = random_distribution(rng, 60), d2 = random_distribution(rng, 60);
    double a = std::uniform_real_distribution<double>(0, 1)(rng), b = 1 - a;
    std::vector<double> mix(60);
    for (int i = 0; i < 60; ++i) mix[i] = a * d1[i] + b * d2[i];
    auto m = marginalise(tree, {Level::species, mix});
    auto m1 = marginalise(tree, {Level::species, d1});
    auto m2 = marginalise(tree, {Level::species, d2});
    for (std::size_t i = 0; i < m.values.size(); ++i)
      EXPECT_NEAR(m.values[i], a * m1.values[i] + b * m2.values[i], 1e-12);
  }
}

TEST(TaxonomyFile, RoundTripAndFingerprint) {
  auto tree = toy_tree();
  std::stringstream ss;
  auto recs = tree.records();
  write_taxonomy_records(ss, recs);
  auto back = TaxonomyTree::build(read_taxonomy_records(ss));
  EXPECT_EQ(back.records(), recs);
  EXPECT_EQ(back.fingerprint(), tree.fingerprint());

  auto other = toy_records();
  other[0].names[0] = "Parus maior";
  EXPECT_NE(TaxonomyTree::build(other).fingerprint(), tree.fingerprint());
}

TEST(TaxonomyFile, DelimitersQuotesAndMissingColumns) {
  std::istringstream tab("phylum\tclass\torder\tfamily\tgenus\tspecies\nP\tC\tO\tF\tG\tG one\n");
  auto recs = read_taxonomy_records(tab);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].species(), "G one");
  EXPECT_EQ(recs[0].at(Level::phylum), "P");

  std::istringstream quoted("species,genus,family,order,class,phylum\n\"A, b\",A,F,O,C,P\n");
  EXPECT_EQ(read_taxonomy_records(quoted)[0].species(), "A, b");

  std::istringstream missing("species,genus,family\na,b,c\n");
  EXPECT_THROW(read_taxonomy_records(missing), DataError);
}

TEST(Csv, SplitAndQuote) {
  EXPECT_EQ(csv::split_line("a,\"b,\"\"c\"\"\",d", ','), (std::vector<std::string>{"a", "b,\"c\"", "d"}));
  EXPECT_EQ(csv::quote_if_needed("x,y"), "\"x,y\"");
  EXPECT_EQ(csv::quote_if_needed("plain"), "plain");
  EXPECT_EQ(csv::sniff_delimiter("a;b;c"), ';');
}
