#pragma once

// Synthetic scene graphs with two planted defects: cross-category pairs whose
// union features look like strongly related pairs (spurious proximity), and
// long-tailed relationships with a fraction of annotations hidden.
//
// File format: JSON lines. The first line is a header
//   {"format": "runet.scenes", "version": 1, "config": {...}}
// followed by one scene per line:
//   {"split": "train", "id": 0, "n": 5, "x": [...], "u": [...],
//    "objects": [...], "rels": [...], "rels_full": [...]}
// where x is n × d_raw, u is n² × d (row i·n + j is u_ij) and rels are n × n,
// all row-major.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "runet/errors.hpp"
#include "runet/matrix.hpp"
#include "runet/random.hpp"

namespace runet {

inline constexpr int kSceneFormatVersion = 1;
inline constexpr const char* kSceneFormatName = "runet.scenes";

struct SynthConfig {
  std::size_t num_object_cats = 8;
  std::size_t num_rel_cats = 10;  // class 0 is "no relationship"
  std::size_t min_nodes = 4;
  std::size_t max_nodes = 8;
  std::size_t feature_dim = 64;
  double cluster_separation = 3.0;  // distance between category means
  double scene_spread = 1.0;        // σ of the per-scene offset shared by a category's instances
  double instance_noise = 0.3;      // σ of per-instance appearance noise
  double spurious_pair_rate = 0.3;
  double tail_exponent = 1.5;
  double annotation_drop_rate = 0.3;
  double relation_density = 0.35;    // chance an ordered cross-category pair is related
  double detector_strength = 1.0;    // logit boost of the true class in the detector probabilities
  double relation_signal = 1.0;      // norm of the relation embedding inside u_ij
  double affinity_signal = 2.0;      // norm of the same-category affinity inside u_ij
  double union_noise = 0.5;          // per-dimension σ of u_ij noise
  std::size_t num_train = 300;
  std::size_t num_val = 50;
  std::size_t num_test = 100;
  std::uint64_t seed = 7;

  std::size_t raw_dim() const { return feature_dim + num_object_cats + 4; }

  void validate() const {
    auto rate = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) throw ParameterError(std::string(name) + " must lie in [0, 1]");
    };
    rate(spurious_pair_rate, "spurious_pair_rate");
    rate(annotation_drop_rate, "annotation_drop_rate");
    rate(relation_density, "relation_density");
    if (num_object_cats < 2) throw ParameterError("num_object_cats must be >= 2");
    if (num_rel_cats < 2) throw ParameterError("num_rel_cats must be >= 2");
    if (min_nodes < 1 || max_nodes < min_nodes) throw ParameterError("node range must satisfy 1 <= min <= max");
    if (feature_dim < 1) throw ParameterError("feature_dim must be >= 1");
    if (!(cluster_separation >= 0.0)) throw ParameterError("cluster_separation must be >= 0");
    if (!(scene_spread >= 0.0)) throw ParameterError("scene_spread must be >= 0");
    if (!(instance_noise >= 0.0)) throw ParameterError("instance_noise must be >= 0");
    if (!(tail_exponent >= 0.0)) throw ParameterError("tail_exponent must be >= 0");
    if (!(union_noise >= 0.0)) throw ParameterError("union_noise must be >= 0");
  }

  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"num_object_cats", c.num_object_cats},
                     {"num_rel_cats", c.num_rel_cats},
                     {"min_nodes", c.min_nodes},
                     {"max_nodes", c.max_nodes},
                     {"feature_dim", c.feature_dim},
                     {"cluster_separation", c.cluster_separation},
                     {"scene_spread", c.scene_spread},
                     {"instance_noise", c.instance_noise},
                     {"spurious_pair_rate", c.spurious_pair_rate},
                     {"tail_exponent", c.tail_exponent},
                     {"annotation_drop_rate", c.annotation_drop_rate},
                     {"relation_density", c.relation_density},
                     {"detector_strength", c.detector_strength},
                     {"relation_signal", c.relation_signal},
                     {"affinity_signal", c.affinity_signal},
                     {"union_noise", c.union_noise},
                     {"num_train", c.num_train},
                     {"num_val", c.num_val},
                     {"num_test", c.num_test},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  j.at("num_object_cats").get_to(c.num_object_cats);
  j.at("num_rel_cats").get_to(c.num_rel_cats);
  j.at("min_nodes").get_to(c.min_nodes);
  j.at("max_nodes").get_to(c.max_nodes);
  j.at("feature_dim").get_to(c.feature_dim);
  j.at("cluster_separation").get_to(c.cluster_separation);
  j.at("scene_spread").get_to(c.scene_spread);
  j.at("instance_noise").get_to(c.instance_noise);
  j.at("spurious_pair_rate").get_to(c.spurious_pair_rate);
  j.at("tail_exponent").get_to(c.tail_exponent);
  j.at("annotation_drop_rate").get_to(c.annotation_drop_rate);
  j.at("relation_density").get_to(c.relation_density);
  j.at("detector_strength").get_to(c.detector_strength);
  j.at("relation_signal").get_to(c.relation_signal);
  j.at("affinity_signal").get_to(c.affinity_signal);
  j.at("union_noise").get_to(c.union_noise);
  j.at("num_train").get_to(c.num_train);
  j.at("num_val").get_to(c.num_val);
  j.at("num_test").get_to(c.num_test);
  j.at("seed").get_to(c.seed);
}

struct SceneGraphSample {
  std::size_t scene_id = 0;
  DenseMatrix node_features;   // n × d_raw: [appearance; detector probs; box]
  DenseMatrix union_features;  // n² × d, row i·n + j
  std::vector<std::size_t> object_labels;
  std::vector<std::size_t> rel_labels;       // n × n, 0 = none; annotated subset
  std::vector<std::size_t> rel_labels_full;  // n × n, before annotations were dropped

  std::size_t num_nodes() const { return object_labels.size(); }
  std::size_t rel(std::size_t i, std::size_t j) const { return rel_labels[i * num_nodes() + j]; }
  std::size_t rel_full(std::size_t i, std::size_t j) const { return rel_labels_full[i * num_nodes() + j]; }

  friend bool operator==(const SceneGraphSample&, const SceneGraphSample&) = default;
};

struct Dataset {
  SynthConfig config;
  std::vector<SceneGraphSample> train;
  std::vector<SceneGraphSample> val;
  std::vector<SceneGraphSample> test;

  const std::vector<SceneGraphSample>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ParameterError("unknown split '" + name + "'");
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Draws shared between splits: category means, relation embeddings and
/// per-category-pair relationship distributions.
struct SceneWorld {
  DenseMatrix category_means;    // O × d
  DenseMatrix relation_embed;    // R × d (row 0 unused)
  DenseMatrix affinity_dir;      // 1 × d, unit
  DenseMatrix relation_weights;  // (O·O) × R, column 0 unused

  static SceneWorld draw(const SynthConfig& c) {
    Rng rng = Rng::stream(c.seed, 0xC0FFEE);
    const std::size_t d = c.feature_dim;
    const std::size_t o = c.num_object_cats;
    SceneWorld w;
    // Means sit on scaled axes (random unit directions when O > d) so that
    // pairwise mean distances are cluster_separation.
    w.category_means = DenseMatrix(o, d);
    const double radius = c.cluster_separation / std::sqrt(2.0);
    for (std::size_t k = 0; k < o; ++k) {
      if (o <= d) {
        w.category_means(k, k) = radius;
      } else {
        auto dir = unit_vector(d, rng);
        for (std::size_t j = 0; j < d; ++j) w.category_means(k, j) = radius * dir[j];
      }
    }
    w.relation_embed = DenseMatrix(c.num_rel_cats, d);
    for (std::size_t r = 1; r < c.num_rel_cats; ++r) {
      auto dir = unit_vector(d, rng);
      for (std::size_t j = 0; j < d; ++j) w.relation_embed(r, j) = c.relation_signal * dir[j];
    }
    w.affinity_dir = DenseMatrix(1, d);
    {
      auto dir = unit_vector(d, rng);
      for (std::size_t j = 0; j < d; ++j) w.affinity_dir(0, j) = dir[j];
    }
    // Zipf base r^{-s} with a mild per-pair modulation; the global class
    // frequency stays nonincreasing in the class index.
    w.relation_weights = DenseMatrix(o * o, c.num_rel_cats);
    for (std::size_t k = 0; k < o * o; ++k)
      for (std::size_t r = 1; r < c.num_rel_cats; ++r)
        w.relation_weights(k, r) = std::pow(static_cast<double>(r), -c.tail_exponent) * std::exp(0.3 * rng.normal());
    return w;
  }

 private:
  static std::vector<double> unit_vector(std::size_t d, Rng& rng) {
    std::vector<double> v(d);
    double norm = 0.0;
    while (norm < 1e-12) {
      norm = 0.0;
      for (auto& x : v) {
        x = rng.normal();
        norm += x * x;
      }
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
  }
};

inline SceneGraphSample generate_scene(const SynthConfig& c, const SceneWorld& w, std::size_t scene_id, Rng& rng) {
  const std::size_t d = c.feature_dim;
  const std::size_t o = c.num_object_cats;
  const std::size_t n = c.min_nodes + rng.index(c.max_nodes - c.min_nodes + 1);
  SceneGraphSample s;
  s.scene_id = scene_id;

  // A handful of categories per scene, so most nodes share their category
  // with at least one other node.
  const std::size_t max_k = std::max<std::size_t>(2, std::min(o, (n + 1) / 2));
  const std::size_t k = std::min(n, 2 + rng.index(max_k - 1));
  std::vector<std::size_t> cats(o);
  for (std::size_t i = 0; i < o; ++i) cats[i] = i;
  rng.shuffle(cats);
  cats.resize(k);
  s.object_labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) s.object_labels[i] = i < k ? cats[i] : cats[rng.index(k)];
  rng.shuffle(s.object_labels);

  // Instances of one category in a scene share an appearance offset, so
  // they look alike while the category itself stays hard to name.
  DenseMatrix offsets(o, d);
  for (std::size_t cat : cats)
    for (std::size_t j = 0; j < d; ++j) offsets(cat, j) = c.scene_spread * rng.normal();

  s.node_features = DenseMatrix(n, c.raw_dim());
  std::vector<std::array<double, 2>> centers(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cat = s.object_labels[i];
    for (std::size_t j = 0; j < d; ++j)
      s.node_features(i, j) = w.category_means(cat, j) + offsets(cat, j) + c.instance_noise * rng.normal();
    std::vector<double> logits(o);
    double mx = -1e300;
    for (std::size_t j = 0; j < o; ++j) {
      logits[j] = rng.normal() + (j == cat ? c.detector_strength : 0.0);
      mx = std::max(mx, logits[j]);
    }
    double z = 0.0;
    for (auto& l : logits) z += (l = std::exp(l - mx));
    for (std::size_t j = 0; j < o; ++j) s.node_features(i, d + j) = logits[j] / z;
    centers[i] = {rng.uniform(), rng.uniform()};
    s.node_features(i, d + o + 0) = centers[i][0];
    s.node_features(i, d + o + 1) = centers[i][1];
    s.node_features(i, d + o + 2) = rng.uniform(0.1, 0.4);
    s.node_features(i, d + o + 3) = rng.uniform(0.1, 0.4);
  }

  s.rel_labels_full.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j || s.object_labels[i] == s.object_labels[j]) continue;
      if (!rng.bernoulli(c.relation_density)) continue;
      const std::size_t key = s.object_labels[i] * o + s.object_labels[j];
      std::vector<double> weights(c.num_rel_cats - 1);
      for (std::size_t r = 1; r < c.num_rel_cats; ++r) weights[r - 1] = w.relation_weights(key, r);
      s.rel_labels_full[i * n + j] = 1 + rng.categorical(weights);
    }
  s.rel_labels = s.rel_labels_full;
  for (auto& r : s.rel_labels)
    if (r != 0 && rng.bernoulli(c.annotation_drop_rate)) r = 0;

  // Union features: relation embedding plus same-category affinity, plus a
  // proximity term that swamps the affinity signal on spurious pairs.
  std::vector<double> proximity(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = centers[i][0] - centers[j][0];
      const double dy = centers[i][1] - centers[j][1];
      double prox = 0.25 * std::exp(-(dx * dx + dy * dy) / 0.02);
      if (s.object_labels[i] != s.object_labels[j] && rng.bernoulli(c.spurious_pair_rate)) {
        prox = c.affinity_signal * rng.uniform(1.0, 1.5);
      }
      proximity[i * n + j] = prox;
      proximity[j * n + i] = prox;
    }
  s.union_features = DenseMatrix(n * n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double same = s.object_labels[i] == s.object_labels[j] ? c.affinity_signal : 0.0;
      const std::size_t r = s.rel_labels_full[i * n + j];
      for (std::size_t t = 0; t < d; ++t) {
        s.union_features(i * n + j, t) = (same + proximity[i * n + j]) * w.affinity_dir(0, t) +
                                         w.relation_embed(r, t) + c.union_noise * rng.normal();
      }
    }
  return s;
}

inline Dataset generate(const SynthConfig& config) {
  config.validate();
  const SceneWorld world = SceneWorld::draw(config);
  Dataset ds;
  ds.config = config;
  std::size_t next_id = 0;
  auto fill = [&](std::vector<SceneGraphSample>& out, std::size_t count, std::uint64_t stream) {
    Rng rng = Rng::stream(config.seed, stream);
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(config, world, next_id++, rng));
  };
  fill(ds.train, config.num_train, 1);
  fill(ds.val, config.num_val, 2);
  fill(ds.test, config.num_test, 3);
  return ds;
}

namespace detail {

inline nlohmann::json scene_to_json(const SceneGraphSample& s, const char* split) {
  return nlohmann::json{{"split", split},
                        {"id", s.scene_id},
                        {"n", s.num_nodes()},
                        {"x", s.node_features.data()},
                        {"u", s.union_features.data()},
                        {"objects", s.object_labels},
                        {"rels", s.rel_labels},
                        {"rels_full", s.rel_labels_full}};
}

inline SceneGraphSample scene_from_json(const nlohmann::json& j, const SynthConfig& c, std::size_t line) {
  SceneGraphSample s;
  try {
    s.scene_id = j.at("id").get<std::size_t>();
    const auto n = j.at("n").get<std::size_t>();
    s.object_labels = j.at("objects").get<std::vector<std::size_t>>();
    s.rel_labels = j.at("rels").get<std::vector<std::size_t>>();
    s.rel_labels_full = j.at("rels_full").get<std::vector<std::size_t>>();
    auto x = j.at("x").get<std::vector<double>>();
    auto u = j.at("u").get<std::vector<double>>();
    if (s.object_labels.size() != n || s.rel_labels.size() != n * n || s.rel_labels_full.size() != n * n ||
        x.size() != n * c.raw_dim() || u.size() != n * n * c.feature_dim) {
      throw ParseError(line, "scene arrays inconsistent with n = " + std::to_string(n));
    }
    for (auto l : s.object_labels)
      if (l >= c.num_object_cats) throw ParseError(line, "object label out of range");
    for (auto r : s.rel_labels_full)
      if (r >= c.num_rel_cats) throw ParseError(line, "relationship label out of range");
    s.node_features = DenseMatrix(n, c.raw_dim(), std::move(x));
    s.union_features = DenseMatrix(n * n, c.feature_dim, std::move(u));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line, std::string("malformed scene: ") + e.what());
  }
  return s;
}

}  // namespace detail

inline void save(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  nlohmann::json header{{"format", kSceneFormatName}, {"version", kSceneFormatVersion}, {"config", ds.config}};
  out << header.dump() << '\n';
  for (const auto& s : ds.train) out << detail::scene_to_json(s, "train").dump() << '\n';
  for (const auto& s : ds.val) out << detail::scene_to_json(s, "val").dump() << '\n';
  for (const auto& s : ds.test) out << detail::scene_to_json(s, "test").dump() << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline Dataset load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  Dataset ds;
  std::string text;
  std::size_t line = 0;
  bool have_header = false;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line, std::string("invalid JSON: ") + e.what());
    }
    if (!have_header) {
      try {
        if (j.at("format").get<std::string>() != kSceneFormatName) throw ParseError(line, "not a scene file");
        const int version = j.at("version").get<int>();
        if (version != kSceneFormatVersion) {
          throw ParseError(line, "unsupported format version " + std::to_string(version));
        }
        ds.config = j.at("config").get<SynthConfig>();
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(line, std::string("malformed header: ") + e.what());
      }
      have_header = true;
      continue;
    }
    std::string split;
    try {
      split = j.at("split").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line, std::string("missing split: ") + e.what());
    }
    SceneGraphSample s = detail::scene_from_json(j, ds.config, line);
    if (split == "train") {
      ds.train.push_back(std::move(s));
    } else if (split == "val") {
      ds.val.push_back(std::move(s));
    } else if (split == "test") {
      ds.test.push_back(std::move(s));
    } else {
      throw ParseError(line, "unknown split '" + split + "'");
    }
  }
  if (!have_header) throw ParseError(line, "missing header line");
  return ds;
}

}  // namespace runet
