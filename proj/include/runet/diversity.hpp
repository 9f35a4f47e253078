#pragma once

// Group diversity enhancement: fused relationship scoring with a frequency
// prior, grouping of scored pairs, the column-wise ℓ2,1 bonus and the losses.

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "runet/autodiff.hpp"
#include "runet/errors.hpp"
#include "runet/matrix.hpp"
#include "runet/random.hpp"
#include "runet/unrolled_mp.hpp"

namespace runet {

struct FusionParams {
  DenseMatrix W_x;  // d × d
  DenseMatrix W_y;  // d × d
  DenseMatrix W_r;  // R × d

  static FusionParams init(std::size_t d, std::size_t num_rel_cats, Rng& rng) {
    return {init_weight(d, d, rng), init_weight(d, d, rng), init_weight(num_rel_cats, d, rng)};
  }
};

struct FusionVars {
  Var W_x;
  Var W_y;
  Var W_r;

  static FusionVars on(Tape& tape, const FusionParams& p, bool trainable = true) {
    auto put = [&](const DenseMatrix& m) { return trainable ? tape.variable(m) : tape.constant(m); };
    return {put(p.W_x), put(p.W_y), put(p.W_r)};
  }
};

/// Log-frequency prior over relationship classes for each ordered
/// (subject category, object category) pair. Stored (O·O) × R, row s·O + o.
struct FrequencyBias {
  std::size_t num_object_cats = 0;
  std::size_t num_rel_cats = 0;
  DenseMatrix table;

  /// counts is (O·O) × R; add-one smoothing, then log-probabilities per row.
  static FrequencyBias from_counts(const DenseMatrix& counts, std::size_t num_object_cats, std::size_t num_rel_cats) {
    if (counts.rows() != num_object_cats * num_object_cats || counts.cols() != num_rel_cats) {
      throw DimensionError("FrequencyBias: counts " + counts.shape() + " for O=" + std::to_string(num_object_cats) +
                           ", R=" + std::to_string(num_rel_cats));
    }
    FrequencyBias b{num_object_cats, num_rel_cats, DenseMatrix(counts.rows(), counts.cols())};
    for (std::size_t k = 0; k < counts.rows(); ++k) {
      double total = 0.0;
      for (std::size_t r = 0; r < num_rel_cats; ++r) total += counts(k, r) + 1.0;
      for (std::size_t r = 0; r < num_rel_cats; ++r) b.table(k, r) = std::log((counts(k, r) + 1.0) / total);
    }
    return b;
  }

  static FrequencyBias zeros(std::size_t num_object_cats, std::size_t num_rel_cats) {
    return {num_object_cats, num_rel_cats, DenseMatrix(num_object_cats * num_object_cats, num_rel_cats)};
  }

  std::size_t key(std::size_t subject_cat, std::size_t object_cat) const {
    if (subject_cat >= num_object_cats || object_cat >= num_object_cats) {
      throw LookupError("frequency bias: category pair (" + std::to_string(subject_cat) + ", " +
                        std::to_string(object_cat) + ") outside " + std::to_string(num_object_cats) + " categories");
    }
    return subject_cat * num_object_cats + object_cat;
  }
};

/// Batched x * y = ReLU(W_x x + W_y y) − (W_x x − W_y y) ⊙ (W_x x − W_y y), one
/// pair of operands per row.
inline Var fuse(Var x, Var y, Var w_x, Var w_y) {
  if (!x.value().same_shape(y.value())) {
    throw DimensionError("fuse: operand shapes " + x.value().shape() + " vs " + y.value().shape());
  }
  Var a = linear(x, w_x);
  Var b = linear(y, w_y);
  Var diff = sub(a, b);
  return sub(relu(add(a, b)), hadamard(diff, diff));
}

inline DenseMatrix fuse(const DenseMatrix& x, const DenseMatrix& y, const FusionParams& params) {
  Tape t;
  return fuse(t.constant(x), t.constant(y), t.constant(params.W_x), t.constant(params.W_y)).value();
}

/// One scored (subject, object) node pair.
struct PairRef {
  std::size_t subject = 0;
  std::size_t object = 0;
  friend bool operator==(const PairRef&, const PairRef&) = default;
};

struct PredictionMatrix {
  DenseMatrix P;                    // N × R, rows sum to 1
  std::vector<PairRef> pair_index;  // row → node pair
  std::vector<std::pair<std::size_t, std::size_t>> group_key;  // (subject cat, object cat)
};

/// Relationship logits W_r((ŷ_s * ŷ_o) * u_so) + f_so for each pair. The fusion
/// is applied left to right with W_x, W_y shared by both applications.
/// `union_pairs` holds u_so for each pair (N × d); `bias_rows` the frequency
/// table row per pair.
inline Var relationship_logits(Var y_hat, Var union_pairs, const std::vector<PairRef>& pairs, const FusionVars& fusion,
                               Var bias_table, const std::vector<std::size_t>& bias_rows) {
  if (union_pairs.rows() != pairs.size() || bias_rows.size() != pairs.size()) {
    throw DimensionError("relationship_logits: " + std::to_string(pairs.size()) + " pairs but union features " +
                         union_pairs.value().shape() + " and " + std::to_string(bias_rows.size()) + " bias rows");
  }
  std::vector<std::size_t> subj;
  std::vector<std::size_t> obj;
  subj.reserve(pairs.size());
  obj.reserve(pairs.size());
  for (const PairRef& p : pairs) {
    subj.push_back(p.subject);
    obj.push_back(p.object);
  }
  Var ys = gather_rows(y_hat, std::move(subj));
  Var yo = gather_rows(y_hat, std::move(obj));
  Var fused = fuse(fuse(ys, yo, fusion.W_x, fusion.W_y), union_pairs, fusion.W_x, fusion.W_y);
  return add(linear(fused, fusion.W_r), gather_rows(bias_table, bias_rows));
}

/// Row-stochastic relationship scores for the given pairs; categories feed the
/// frequency lookup (ground truth or predicted, depending on protocol).
inline PredictionMatrix relationship_scores(const DenseMatrix& y_hat, const DenseMatrix& union_pairs,
                                            const std::vector<PairRef>& pairs,
                                            const std::vector<std::size_t>& categories, const FusionParams& fusion,
                                            const FrequencyBias& bias) {
  PredictionMatrix out;
  out.pair_index = pairs;
  std::vector<std::size_t> rows;
  for (const PairRef& p : pairs) {
    if (p.subject >= categories.size() || p.object >= categories.size()) {
      throw LookupError("relationship_scores: pair refers to a node without a category");
    }
    rows.push_back(bias.key(categories[p.subject], categories[p.object]));
    out.group_key.emplace_back(categories[p.subject], categories[p.object]);
  }
  if (pairs.empty()) {
    out.P = DenseMatrix(0, fusion.W_r.rows());
    return out;
  }
  Tape t;
  const FusionVars fv = FusionVars::on(t, fusion, false);
  Var logits = relationship_logits(t.constant(y_hat), t.constant(union_pairs), pairs, fv, t.constant(bias.table), rows);
  out.P = row_softmax(logits).value();
  return out;
}

/// ‖P‖_{2,1} = Σ_j sqrt(Σ_i P_ij²), column-wise.
inline double l21_norm(const DenseMatrix& p) {
  double total = 0.0;
  for (std::size_t j = 0; j < p.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.rows(); ++i) s += p(i, j) * p(i, j);
    total += std::sqrt(s);
  }
  return total;
}

enum class GroupingVariant {
  kPerImage,             // one group per image
  kBatchGroups,          // batch-wide groups by (subject cat, object cat)
  kBatchGroupsFiltered,  // as above, small groups removed
};

inline const char* to_string(GroupingVariant v) {
  switch (v) {
    case GroupingVariant::kPerImage: return "image";
    case GroupingVariant::kBatchGroups: return "batch_groups";
    case GroupingVariant::kBatchGroupsFiltered: return "batch_groups_filtered";
  }
  return "?";
}

inline GroupingVariant parse_grouping(const std::string& s) {
  if (s == "image") return GroupingVariant::kPerImage;
  if (s == "batch_groups") return GroupingVariant::kBatchGroups;
  if (s == "batch_groups_filtered") return GroupingVariant::kBatchGroupsFiltered;
  throw ParameterError("unknown grouping variant '" + s + "'");
}

/// Where a scored row came from, for grouping.
struct PairLabel {
  std::size_t image = 0;
  std::size_t subject_cat = 0;
  std::size_t object_cat = 0;
};

struct GroupPartition {
  struct Group {
    std::pair<std::size_t, std::size_t> key;  // (subject cat, object cat), or (image, 0) per image
    std::vector<std::size_t> rows;
  };
  std::vector<Group> groups;  // ordered by key
  std::size_t min_group_size = 3;
};

/// Groups batch rows. Groups are ordered by key and rows by index, so the
/// partition does not depend on traversal order.
inline GroupPartition partition_groups(const std::vector<PairLabel>& labels, GroupingVariant variant,
                                       std::size_t min_group_size = 3) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> buckets;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const auto key = variant == GroupingVariant::kPerImage ? std::make_pair(labels[r].image, std::size_t{0})
                                                           : std::make_pair(labels[r].subject_cat, labels[r].object_cat);
    buckets[key].push_back(r);
  }
  GroupPartition out;
  out.min_group_size = min_group_size;
  for (auto& [key, rows] : buckets) {
    if (variant == GroupingVariant::kBatchGroupsFiltered && rows.size() < min_group_size) continue;
    out.groups.push_back({key, std::move(rows)});
  }
  return out;
}

/// (1/M)·CE − (τ/B)·Σ_b ‖P_b‖_{2,1}/N_b on autodiff values. With no groups
/// left the bonus is zero.
inline Var diversity_loss(Var rel_logits, const GroupPartition& partition, double tau,
                          const std::vector<std::size_t>& rel_targets) {
  if (rel_logits.rows() == 0) throw ContractError("diversity_loss: empty batch");
  if (tau < 0.0) throw ParameterError("diversity_loss: tau must be >= 0");
  Var loss = scale(cross_entropy(rel_logits, rel_targets), 1.0 / static_cast<double>(rel_logits.rows()));
  if (tau == 0.0 || partition.groups.empty()) return loss;
  Var probs = row_softmax(rel_logits);
  const double weight = tau / static_cast<double>(partition.groups.size());
  for (const auto& g : partition.groups) {
    Var term = l21_norm(gather_rows(probs, g.rows));
    loss = sub(loss, scale(term, weight / static_cast<double>(g.rows.size())));
  }
  return loss;
}

/// Same loss evaluated on probabilities directly.
inline double diversity_loss(const DenseMatrix& probs, const GroupPartition& partition, double tau,
                             const std::vector<std::size_t>& rel_targets) {
  if (probs.rows() == 0) throw ContractError("diversity_loss: empty batch");
  if (tau < 0.0) throw ParameterError("diversity_loss: tau must be >= 0");
  if (rel_targets.size() != probs.rows()) throw DimensionError("diversity_loss: target count mismatch");
  double ce = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    if (rel_targets[i] >= probs.cols()) throw DimensionError("diversity_loss: target out of range");
    ce -= std::log(probs(i, rel_targets[i]));
  }
  double loss = ce / static_cast<double>(probs.rows());
  if (partition.groups.empty()) return loss;
  double bonus = 0.0;
  for (const auto& g : partition.groups) {
    DenseMatrix sub_p(g.rows.size(), probs.cols());
    for (std::size_t r = 0; r < g.rows.size(); ++r)
      for (std::size_t j = 0; j < probs.cols(); ++j) sub_p(r, j) = probs(g.rows[r], j);
    bonus += l21_norm(sub_p) / static_cast<double>(g.rows.size());
  }
  return loss - tau / static_cast<double>(partition.groups.size()) * bonus;
}

/// (1/n_b)·Σ node CE + relationship loss.
inline Var total_loss(Var node_logits, const std::vector<std::size_t>& node_targets, Var rel_loss, std::size_t n_b) {
  if (n_b == 0) throw ContractError("total_loss: n_b must be > 0");
  return add(scale(cross_entropy(node_logits, node_targets), 1.0 / static_cast<double>(n_b)), rel_loss);
}

inline double total_loss(const DenseMatrix& node_logits, const std::vector<std::size_t>& node_targets,
                         double rel_loss, std::size_t n_b) {
  Tape t;
  return total_loss(t.constant(node_logits), node_targets, t.constant(DenseMatrix(1, 1, rel_loss)), n_b).value()(0, 0);
}

/// Row-wise argmax; ties go to the lowest index.
inline std::vector<std::size_t> argmax_rows(const DenseMatrix& m) {
  std::vector<std::size_t> out(m.rows(), 0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 1; j < m.cols(); ++j)
      if (m(i, j) > m(i, out[i])) out[i] = j;
  return out;
}

struct Inference {
  std::vector<std::size_t> object_labels;
  std::vector<std::size_t> relationship_labels;
};

inline Inference infer(const DenseMatrix& node_probs, const DenseMatrix& rel_probs) {
  return {argmax_rows(node_probs), argmax_rows(rel_probs)};
}

}  // namespace runet
