#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "runet/errors.hpp"
#include "runet/synth_scene.hpp"
#include "test_util.hpp"

using namespace runet;

namespace {

SynthConfig small_config(std::uint64_t seed = 11) {
  SynthConfig c;
  c.feature_dim = 16;
  c.num_train = 20;
  c.num_val = 5;
  c.num_test = 8;
  c.seed = seed;
  return c;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string s; std::getline(in, s);) lines.push_back(s);
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  for (const auto& s : lines) out << s << '\n';
}

}  // namespace

TEST(Generate, NoDropKeepsAllAnnotations) {
  SynthConfig c = small_config();
  c.annotation_drop_rate = 0.0;
  const Dataset ds = generate(c);
  for (const auto* split : {&ds.train, &ds.val, &ds.test})
    for (const auto& s : *split) EXPECT_EQ(s.rel_labels, s.rel_labels_full);
}

TEST(Generate, DroppedLabelsAreASubsetOfFullLabels) {
  SynthConfig c = small_config();
  c.annotation_drop_rate = 0.5;
  const Dataset ds = generate(c);
  std::size_t kept = 0;
  std::size_t total = 0;
  for (const auto& s : ds.train) {
    for (std::size_t k = 0; k < s.rel_labels.size(); ++k) {
      if (s.rel_labels[k] != 0) {
        EXPECT_EQ(s.rel_labels[k], s.rel_labels_full[k]);
      }
      if (s.rel_labels_full[k] != 0) {
        ++total;
        kept += s.rel_labels[k] != 0;
      }
    }
  }
  ASSERT_GT(total, 50u);
  EXPECT_LT(kept, total);
  EXPECT_GT(kept, 0u);
}

TEST(Generate, SameSeedIsBitIdentical) {
  const Dataset a = generate(small_config(5));
  const Dataset b = generate(small_config(5));
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == generate(small_config(6)));
}

TEST(Generate, ShapesAndLabelRanges) {
  const SynthConfig c = small_config();
  const Dataset ds = generate(c);
  EXPECT_EQ(ds.train.size(), c.num_train);
  EXPECT_EQ(ds.val.size(), c.num_val);
  EXPECT_EQ(ds.test.size(), c.num_test);
  for (const auto& s : ds.test) {
    const std::size_t n = s.num_nodes();
    EXPECT_GE(n, c.min_nodes);
    EXPECT_LE(n, c.max_nodes);
    EXPECT_EQ(s.node_features.rows(), n);
    EXPECT_EQ(s.node_features.cols(), c.feature_dim + c.num_object_cats + 4);
    EXPECT_EQ(s.union_features.rows(), n * n);
    EXPECT_EQ(s.union_features.cols(), c.feature_dim);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_LT(s.object_labels[i], c.num_object_cats);
      EXPECT_EQ(s.rel_full(i, i), 0u);
      for (std::size_t j = 0; j < n; ++j) EXPECT_LT(s.rel_full(i, j), c.num_rel_cats);
    }
  }
}

TEST(Generate, RelationshipFrequencyIsNonincreasingInClass) {
  SynthConfig c = small_config(3);
  c.num_rel_cats = 10;
  c.tail_exponent = 1.5;
  c.annotation_drop_rate = 0.0;
  c.num_train = 200;
  c.num_val = 0;
  c.num_test = 0;
  std::vector<std::size_t> counts(c.num_rel_cats, 0);
  std::size_t samples = 0;
  for (std::uint64_t seed = 3; samples < 10000; ++seed) {
    c.seed = seed;
    for (const auto& s : generate(c).train)
      for (std::size_t r : s.rel_labels_full)
        if (r != 0) {
          ++counts[r];
          ++samples;
        }
  }
  for (std::size_t r = 2; r < c.num_rel_cats; ++r)
    EXPECT_LE(counts[r], counts[r - 1]) << "class " << r << " of " << samples << " samples";
}

TEST(Generate, PlantedCategoriesAreRecoverable) {
  // Nearest category mean on the appearance block is Bayes-optimal for the
  // isotropic marginal with total σ² = spread² + noise².
  SynthConfig c = small_config(9);
  c.spurious_pair_rate = 0.0;
  c.annotation_drop_rate = 0.0;
  c.num_train = 400;
  const double sigma = std::sqrt(c.scene_spread * c.scene_spread + c.instance_noise * c.instance_noise);
  c.cluster_separation = 6.0 * sigma;
  const Dataset ds = generate(c);
  const SceneWorld world = SceneWorld::draw(c);
  std::size_t correct = 0;
  std::size_t total = 0;
  for (const auto& s : ds.train) {
    for (std::size_t i = 0; i < s.num_nodes(); ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c.num_object_cats; ++k) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < c.feature_dim; ++j) {
          const double diff = s.node_features(i, j) - world.category_means(k, j);
          d2 += diff * diff;
        }
        if (d2 < best_d) {
          best_d = d2;
          best = k;
        }
      }
      correct += best == s.object_labels[i];
      ++total;
    }
  }
  ASSERT_GT(total, 1000u);
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(total), 0.99);
}

TEST(Generate, SpuriousPairsInflateCrossCategoryAffinity) {
  auto cross_affinity = [](double rate) {
    SynthConfig c = small_config(4);
    c.spurious_pair_rate = rate;
    const Dataset ds = generate(c);
    const SceneWorld w = SceneWorld::draw(c);
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& s : ds.train) {
      const std::size_t n = s.num_nodes();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (i == j || s.object_labels[i] == s.object_labels[j]) continue;
          for (std::size_t t = 0; t < c.feature_dim; ++t) sum += s.union_features(i * n + j, t) * w.affinity_dir(0, t);
          ++count;
        }
    }
    return sum / static_cast<double>(count);
  };
  const double none = cross_affinity(0.0);
  const double all = cross_affinity(1.0);
  EXPECT_LT(none, 0.5);
  EXPECT_GT(all, SynthConfig{}.affinity_signal);
}

TEST(Generate, InvalidConfigIsParameterError) {
  SynthConfig c = small_config();
  c.spurious_pair_rate = 1.5;
  EXPECT_THROW(generate(c), ParameterError);
  c = small_config();
  c.num_object_cats = 1;
  EXPECT_THROW(generate(c), ParameterError);
  c = small_config();
  c.num_rel_cats = 1;
  EXPECT_THROW(generate(c), ParameterError);
  c = small_config();
  c.annotation_drop_rate = -0.1;
  EXPECT_THROW(generate(c), ParameterError);
}

TEST(SaveLoad, EmptyDatasetRoundTrips) {
  SynthConfig c = small_config();
  c.num_train = c.num_val = c.num_test = 0;
  const Dataset ds = generate(c);
  const std::string path = testutil::temp_path("empty.jsonl");
  save(ds, path);
  EXPECT_EQ(load(path), ds);
  std::remove(path.c_str());
}

TEST(SaveLoad, HundredScenesRoundTripBitExactly) {
  SynthConfig c = small_config(21);
  c.num_train = 70;
  c.num_val = 10;
  c.num_test = 20;
  const Dataset ds = generate(c);
  const std::string path = testutil::temp_path("hundred.jsonl");
  save(ds, path);
  const Dataset back = load(path);
  EXPECT_EQ(back, ds);
  EXPECT_EQ(read_lines(path).size(), 101u);
  std::remove(path.c_str());
}

TEST(SaveLoad, CorruptedLineReportsItsNumber) {
  const Dataset ds = generate(small_config());
  const std::string path = testutil::temp_path("corrupt.jsonl");
  save(ds, path);
  auto lines = read_lines(path);
  lines[4] = lines[4].substr(0, lines[4].size() / 2);
  write_lines(path, lines);
  try {
    load(path);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 5u);
    EXPECT_NE(std::string(e.what()).find("line 5"), std::string::npos);
  }
  std::remove(path.c_str());
}

TEST(SaveLoad, InconsistentSceneAndBadHeaderAreParseErrors) {
  const Dataset ds = generate(small_config());
  const std::string path = testutil::temp_path("bad.jsonl");
  save(ds, path);
  auto lines = read_lines(path);
  auto scene = nlohmann::json::parse(lines[2]);
  scene["n"] = scene["n"].get<std::size_t>() + 1;
  lines[2] = scene.dump();
  write_lines(path, lines);
  try {
    load(path);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  auto header = nlohmann::json::parse(lines[0]);
  header["version"] = 99;
  write_lines(path, {header.dump()});
  EXPECT_THROW(load(path), ParseError);
  std::remove(path.c_str());
}

TEST(SaveLoad, MissingFileIsIoError) {
  EXPECT_THROW(load(testutil::temp_path("does_not_exist.jsonl")), IoError);
}
