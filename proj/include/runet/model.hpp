#pragma once

// The full network: input projection and U-MP over the nodes, the node
// classifier, and fused relationship scoring with the frequency prior.

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "runet/autodiff.hpp"
#include "runet/diversity.hpp"
#include "runet/errors.hpp"
#include "runet/matrix.hpp"
#include "runet/random.hpp"
#include "runet/synth_scene.hpp"
#include "runet/unrolled_mp.hpp"

namespace runet {

struct ModelParams {
  UmpParams ump;
  FusionParams fusion;
  FrequencyBias bias;

  static ModelParams init(std::size_t d, std::size_t d_raw, std::size_t num_object_cats, std::size_t num_rel_cats,
                          FrequencyBias bias, Rng& rng) {
    ModelParams p;
    p.ump = UmpParams::init(d, d_raw, num_object_cats, rng);
    p.fusion = FusionParams::init(d, num_rel_cats, rng);
    p.bias = std::move(bias);
    return p;
  }

  std::size_t feature_dim() const { return ump.W_in.rows(); }
  std::size_t raw_dim() const { return ump.W_in.cols(); }
  std::size_t num_object_cats() const { return ump.W_t.rows(); }
  std::size_t num_rel_cats() const { return fusion.W_r.rows(); }

  /// Parameter blocks in a fixed order; the frequency table is last.
  std::vector<DenseMatrix*> blocks() {
    return {&ump.W_in, &ump.w_a, &ump.W_t, &fusion.W_x, &fusion.W_y, &fusion.W_r, &bias.table};
  }
  std::vector<const DenseMatrix*> blocks() const {
    return {&ump.W_in, &ump.w_a, &ump.W_t, &fusion.W_x, &fusion.W_y, &fusion.W_r, &bias.table};
  }
  static const std::vector<std::string>& block_names() {
    static const std::vector<std::string> names{"W_in", "w_a", "W_t", "W_x", "W_y", "W_r", "freq_bias"};
    return names;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    auto x = a.blocks();
    auto y = b.blocks();
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!(*x[i] == *y[i])) return false;
    return true;
  }
};

/// Counts annotated labels of every ordered pair i ≠ j, background included.
inline FrequencyBias count_frequency_bias(const std::vector<SceneGraphSample>& scenes, std::size_t num_object_cats,
                                          std::size_t num_rel_cats) {
  DenseMatrix counts(num_object_cats * num_object_cats, num_rel_cats);
  for (const auto& s : scenes) {
    const std::size_t n = s.num_nodes();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        counts(s.object_labels[i] * num_object_cats + s.object_labels[j], s.rel(i, j)) += 1.0;
      }
  }
  return FrequencyBias::from_counts(counts, num_object_cats, num_rel_cats);
}

struct ModelVars {
  UmpVars ump;
  FusionVars fusion;
  Var bias;

  /// All blocks as trainable leaves except the frequency table when
  /// `train_bias` is false.
  static ModelVars on(Tape& tape, const ModelParams& p, bool trainable, bool train_bias) {
    ModelVars v;
    v.ump = UmpVars::on(tape, p.ump, trainable);
    v.fusion = FusionVars::on(tape, p.fusion, trainable);
    v.bias = trainable && train_bias ? tape.variable(p.bias.table) : tape.constant(p.bias.table);
    return v;
  }

  /// Inverse of blocks().
  static ModelVars from_blocks(const std::vector<Var>& b) {
    if (b.size() != 7) throw ContractError("ModelVars::from_blocks: expected 7 blocks, got " + std::to_string(b.size()));
    ModelVars v;
    v.ump.W_in = b[0];
    v.ump.w_a = b[1];
    v.ump.W_t = b[2];
    v.fusion.W_x = b[3];
    v.fusion.W_y = b[4];
    v.fusion.W_r = b[5];
    v.bias = b[6];
    return v;
  }

  std::vector<Var> blocks() const {
    return {ump.W_in, ump.w_a, ump.W_t, fusion.W_x, fusion.W_y, fusion.W_r, bias};
  }
};

struct SceneForward {
  Var node_logits;  // n × O
  Var rel_logits;   // |pairs| × R, invalid when no pairs were requested
};

/// Node logits for the scene and relationship logits for `pairs`, with the
/// frequency prior looked up by `categories`.
inline SceneForward forward_scene(Tape& tape, const ModelVars& vars, const SceneGraphSample& scene,
                                  const std::vector<PairRef>& pairs, const std::vector<std::size_t>& categories,
                                  const UmpConfig& ump, const FrequencyBias& bias_shape) {
  const std::size_t n = scene.num_nodes();
  Var x = tape.constant(scene.node_features);
  Var u = tape.constant(scene.union_features);
  Var y_hat = run_ump(x, u, vars.ump, ump);
  SceneForward out;
  out.node_logits = linear(y_hat, vars.ump.W_t);
  if (pairs.empty()) return out;
  const std::size_t d = scene.union_features.cols();
  DenseMatrix union_pairs(pairs.size(), d);
  std::vector<std::size_t> bias_rows;
  bias_rows.reserve(pairs.size());
  for (std::size_t r = 0; r < pairs.size(); ++r) {
    const PairRef& p = pairs[r];
    if (p.subject >= n || p.object >= n || p.subject == p.object) {
      throw ContractError("forward_scene: invalid pair (" + std::to_string(p.subject) + ", " +
                          std::to_string(p.object) + ")");
    }
    auto src = scene.union_features.row(p.subject * n + p.object);
    std::copy(src.begin(), src.end(), union_pairs.row(r).begin());
    bias_rows.push_back(bias_shape.key(categories.at(p.subject), categories.at(p.object)));
  }
  out.rel_logits = relationship_logits(y_hat, tape.constant(std::move(union_pairs)), pairs, vars.fusion, vars.bias,
                                       bias_rows);
  return out;
}

/// Every ordered pair i ≠ j, row-major.
inline std::vector<PairRef> all_pairs(std::size_t n) {
  std::vector<PairRef> out;
  out.reserve(n * (n > 0 ? n - 1 : 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) out.push_back({i, j});
  return out;
}

/// All annotated foreground pairs plus up to ratio × max(1, #fg) background
/// pairs drawn without replacement.
inline std::vector<PairRef> sample_pairs(const SceneGraphSample& scene, std::size_t bg_ratio, Rng& rng) {
  std::vector<PairRef> fg;
  std::vector<PairRef> bg;
  for (const PairRef& p : all_pairs(scene.num_nodes())) (scene.rel(p.subject, p.object) != 0 ? fg : bg).push_back(p);
  rng.shuffle(bg);
  const std::size_t keep = std::min(bg.size(), bg_ratio * std::max<std::size_t>(1, fg.size()));
  bg.resize(keep);
  fg.insert(fg.end(), bg.begin(), bg.end());
  return fg;
}

inline nlohmann::json matrix_to_json(const DenseMatrix& m) {
  return nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline DenseMatrix matrix_from_json(const nlohmann::json& j) {
  return DenseMatrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                     j.at("data").get<std::vector<double>>());
}

inline nlohmann::json params_to_json(const ModelParams& p) {
  nlohmann::json j;
  const auto blocks = p.blocks();
  for (std::size_t i = 0; i < blocks.size(); ++i) j[ModelParams::block_names()[i]] = matrix_to_json(*blocks[i]);
  j["num_object_cats"] = p.bias.num_object_cats;
  j["num_rel_cats"] = p.bias.num_rel_cats;
  return j;
}

inline ModelParams params_from_json(const nlohmann::json& j) {
  ModelParams p;
  auto blocks = p.blocks();
  for (std::size_t i = 0; i < blocks.size(); ++i) *blocks[i] = matrix_from_json(j.at(ModelParams::block_names()[i]));
  p.bias.num_object_cats = j.at("num_object_cats").get<std::size_t>();
  p.bias.num_rel_cats = j.at("num_rel_cats").get<std::size_t>();
  return p;
}

}  // namespace runet
