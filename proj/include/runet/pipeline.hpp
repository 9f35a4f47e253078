#pragma once

// Training (SGD with momentum), evaluation protocols and Recall@K metrics,
// checkpoints and ablation sweeps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "runet/autodiff.hpp"
#include "runet/diversity.hpp"
#include "runet/errors.hpp"
#include "runet/model.hpp"
#include "runet/random.hpp"
#include "runet/synth_scene.hpp"
#include "runet/unrolled_mp.hpp"

namespace runet {

struct TrainConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::size_t batch_size = 6;
  std::size_t epochs = 10;
  double tau = 0.1;
  UmpConfig ump;
  std::uint64_t seed = 1;
  GroupingVariant grouping = GroupingVariant::kBatchGroupsFiltered;
  std::size_t min_group_size = 3;
  std::size_t bg_ratio = 3;  // background : foreground pairs per scene
  double clip_norm = 5.0;
  bool train_bias = true;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ParameterError("learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("momentum must lie in [0, 1)");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (!(tau >= 0.0)) throw ParameterError("tau must be >= 0");
    if (!(clip_norm > 0.0)) throw ParameterError("clip_norm must be > 0");
    ump.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"momentum", c.momentum},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"tau", c.tau},
                     {"layers", c.ump.num_layers},
                     {"variant", to_string(c.ump.variant)},
                     {"epsilon", c.ump.epsilon},
                     {"p", c.ump.p},
                     {"feature_dim", c.ump.feature_dim},
                     {"seed", c.seed},
                     {"grouping", to_string(c.grouping)},
                     {"min_group_size", c.min_group_size},
                     {"bg_ratio", c.bg_ratio},
                     {"clip_norm", c.clip_norm},
                     {"train_bias", c.train_bias}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("momentum").get_to(c.momentum);
  j.at("batch_size").get_to(c.batch_size);
  j.at("epochs").get_to(c.epochs);
  j.at("tau").get_to(c.tau);
  j.at("layers").get_to(c.ump.num_layers);
  c.ump.variant = parse_ump_variant(j.at("variant").get<std::string>());
  j.at("epsilon").get_to(c.ump.epsilon);
  j.at("p").get_to(c.ump.p);
  j.at("feature_dim").get_to(c.ump.feature_dim);
  j.at("seed").get_to(c.seed);
  c.grouping = parse_grouping(j.at("grouping").get<std::string>());
  j.at("min_group_size").get_to(c.min_group_size);
  j.at("bg_ratio").get_to(c.bg_ratio);
  j.at("clip_norm").get_to(c.clip_norm);
  j.at("train_bias").get_to(c.train_bias);
}

/// v ← μv − lr·g; θ ← θ + v.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(const std::vector<DenseMatrix*>& params, const std::vector<DenseMatrix>& grads) {
    if (velocity_.empty()) {
      for (const DenseMatrix* p : params) velocity_.emplace_back(p->rows(), p->cols());
    }
    if (velocity_.size() != params.size() || grads.size() != params.size()) {
      throw ContractError("SgdMomentum: parameter count changed between steps");
    }
    for (std::size_t b = 0; b < params.size(); ++b) {
      DenseMatrix& v = velocity_[b];
      DenseMatrix& theta = *params[b];
      const DenseMatrix& g = grads[b];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        v[i] = momentum_ * v[i] - lr_ * g[i];
        theta[i] += v[i];
      }
    }
  }

  std::vector<DenseMatrix>& velocity() { return velocity_; }
  const std::vector<DenseMatrix>& velocity() const { return velocity_; }

 private:
  double lr_;
  double momentum_;
  std::vector<DenseMatrix> velocity_;
};

struct TrainStep {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double object_loss = 0.0;    // (1/n_b)·Σ node CE
  double relation_loss = 0.0;  // CE mean minus the diversity bonus
  double grad_norm = 0.0;      // before clipping
  bool clipped = false;

  friend bool operator==(const TrainStep&, const TrainStep&) = default;
};

struct TrainState {
  ModelParams params;
  std::vector<DenseMatrix> velocity;
  std::size_t epochs_done = 0;
  std::size_t steps_done = 0;
};

struct TrainResult {
  TrainState state;
  std::vector<TrainStep> trace;
};

using EpochCallback = std::function<void(const TrainState&, const std::vector<TrainStep>&)>;

inline void check_dataset_matches(const ModelParams& p, const SynthConfig& c) {
  if (p.num_object_cats() != c.num_object_cats || p.num_rel_cats() != c.num_rel_cats ||
      p.raw_dim() != c.raw_dim() || p.feature_dim() != c.feature_dim) {
    throw ContractError("model shape (O=" + std::to_string(p.num_object_cats()) +
                        ", R=" + std::to_string(p.num_rel_cats()) + ", d=" + std::to_string(p.feature_dim()) +
                        ") does not match dataset (O=" + std::to_string(c.num_object_cats) +
                        ", R=" + std::to_string(c.num_rel_cats) + ", d=" + std::to_string(c.feature_dim) + ")");
  }
}

inline ModelParams initial_params(const Dataset& ds, const TrainConfig& config) {
  Rng rng = Rng::stream(config.seed, 0xA11CE);
  return ModelParams::init(ds.config.feature_dim, ds.config.raw_dim(), ds.config.num_object_cats,
                           ds.config.num_rel_cats,
                           count_frequency_bias(ds.train, ds.config.num_object_cats, ds.config.num_rel_cats), rng);
}

struct BatchLoss {
  Var loss;
  Var object_loss;
  Var relation_loss;
};

/// Training loss of one batch: (1/n_b)·Σ node CE plus the relationship loss
/// over the given pairs. Ground-truth labels drive the bias lookup and groups.
inline BatchLoss batch_loss(Tape& tape, const ModelVars& vars, const ModelParams& params,
                            const std::vector<const SceneGraphSample*>& scenes,
                            const std::vector<std::vector<PairRef>>& pairs, const TrainConfig& config) {
  std::vector<Var> node_logits;
  std::vector<Var> rel_logits;
  std::vector<std::size_t> node_targets;
  std::vector<std::size_t> rel_targets;
  std::vector<PairLabel> labels;
  for (std::size_t b = 0; b < scenes.size(); ++b) {
    const SceneGraphSample& s = *scenes[b];
    SceneForward f = forward_scene(tape, vars, s, pairs[b], s.object_labels, config.ump, params.bias);
    node_logits.push_back(f.node_logits);
    node_targets.insert(node_targets.end(), s.object_labels.begin(), s.object_labels.end());
    if (pairs[b].empty()) continue;
    rel_logits.push_back(f.rel_logits);
    for (const PairRef& p : pairs[b]) {
      rel_targets.push_back(s.rel(p.subject, p.object));
      labels.push_back({b, s.object_labels[p.subject], s.object_labels[p.object]});
    }
  }
  Var nodes = concat_rows(node_logits);
  Var object_loss = scale(cross_entropy(nodes, node_targets), 1.0 / static_cast<double>(node_targets.size()));
  Var relation_loss = tape.constant(DenseMatrix(1, 1, 0.0));
  if (!rel_logits.empty()) {
    const GroupPartition partition = partition_groups(labels, config.grouping, config.min_group_size);
    relation_loss = diversity_loss(concat_rows(rel_logits), partition, config.tau, rel_targets);
  }
  return {add(object_loss, relation_loss), object_loss, relation_loss};
}

/// Trains from `resume` (or a fresh initialisation) up to config.epochs. The
/// per-epoch random stream depends only on (seed, epoch), so resuming from an
/// epoch checkpoint reproduces an uninterrupted run.
inline TrainResult train(const Dataset& ds, const TrainConfig& config, const TrainState* resume = nullptr,
                         const EpochCallback& on_epoch = {}) {
  config.validate();
  if (ds.train.empty()) throw ContractError("train: empty train split");
  UmpConfig ump = config.ump;
  if (ump.feature_dim != ds.config.feature_dim) {
    throw ContractError("train: feature_dim " + std::to_string(ump.feature_dim) + " does not match dataset " +
                        std::to_string(ds.config.feature_dim));
  }

  TrainResult result;
  result.state = resume ? *resume : TrainState{initial_params(ds, config), {}, 0, 0};
  check_dataset_matches(result.state.params, ds.config);
  SgdMomentum opt(config.learning_rate, config.momentum);
  if (!result.state.velocity.empty()) opt.velocity() = result.state.velocity;

  double last_finite = 0.0;
  for (std::size_t epoch = result.state.epochs_done; epoch < config.epochs; ++epoch) {
    Rng rng = Rng::stream(config.seed, 1000 + epoch);
    std::vector<std::size_t> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const SceneGraphSample*> scenes;
      std::vector<std::vector<PairRef>> pairs;
      for (std::size_t k = start; k < end; ++k) {
        scenes.push_back(&ds.train[order[k]]);
        pairs.push_back(sample_pairs(*scenes.back(), config.bg_ratio, rng));
      }

      Tape tape;
      ModelParams& params = result.state.params;
      const ModelVars vars = ModelVars::on(tape, params, true, config.train_bias);
      const BatchLoss bl = batch_loss(tape, vars, params, scenes, pairs, config);
      const double loss = bl.loss.value()(0, 0);
      const std::size_t step = result.state.steps_done;
      if (!std::isfinite(loss)) throw NonFiniteLossError(step, last_finite);
      last_finite = loss;
      tape.backward(bl.loss);

      std::vector<DenseMatrix> grads;
      double sq = 0.0;
      for (const Var& v : vars.blocks()) {
        grads.push_back(v.grad());
        for (double g : grads.back().data()) sq += g * g;
      }
      const double norm = std::sqrt(sq);
      const bool clipped = norm > config.clip_norm;
      if (clipped) {
        const double f = config.clip_norm / norm;
        for (auto& g : grads)
          for (auto& x : g.data()) x *= f;
      }
      opt.step(params.blocks(), grads);

      result.trace.push_back({epoch, step, loss, bl.object_loss.value()(0, 0), bl.relation_loss.value()(0, 0), norm,
                              clipped});
      ++result.state.steps_done;
    }
    result.state.epochs_done = epoch + 1;
    result.state.velocity = opt.velocity();
    if (on_epoch) on_epoch(result.state, result.trace);
  }
  result.state.velocity = opt.velocity();
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class Protocol { kPredCls, kSgCls };

inline const char* to_string(Protocol p) { return p == Protocol::kPredCls ? "predcls" : "sgcls"; }

inline Protocol parse_protocol(const std::string& s) {
  if (s == "predcls") return Protocol::kPredCls;
  if (s == "sgcls") return Protocol::kSgCls;
  throw ParameterError("unknown protocol '" + s + "' (expected predcls or sgcls)");
}

/// A ranked prediction: one triplet per ordered node pair.
struct TripletPrediction {
  std::size_t subject = 0;
  std::size_t object = 0;
  std::size_t subject_label = 0;
  std::size_t object_label = 0;
  std::size_t relation = 0;
  double score = 0.0;
};

/// Per-class ground-truth and hit counts for one scene at one K.
struct SceneHits {
  std::map<std::size_t, std::size_t> gt;
  std::map<std::size_t, std::size_t> hit;
};

/// Sorts by score descending, then by input position.
inline void rank_triplets(std::vector<TripletPrediction>& preds) {
  std::stable_sort(preds.begin(), preds.end(),
                   [](const TripletPrediction& a, const TripletPrediction& b) { return a.score > b.score; });
}

/// Matches the top-k of ranked predictions against the full ground truth.
inline SceneHits match_triplets(const std::vector<TripletPrediction>& ranked, const SceneGraphSample& truth,
                                std::size_t k) {
  SceneHits out;
  const std::size_t n = truth.num_nodes();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && truth.rel_full(i, j) != 0) ++out.gt[truth.rel_full(i, j)];
  const std::size_t top = std::min(k, ranked.size());
  for (std::size_t r = 0; r < top; ++r) {
    const TripletPrediction& t = ranked[r];
    const std::size_t gt_rel = truth.rel_full(t.subject, t.object);
    if (gt_rel != 0 && t.relation == gt_rel && t.subject_label == truth.object_labels[t.subject] &&
        t.object_label == truth.object_labels[t.object]) {
      ++out.hit[gt_rel];
    }
  }
  return out;
}

struct EvalReport {
  Protocol protocol = Protocol::kPredCls;
  std::vector<std::size_t> ks;
  std::map<std::size_t, double> recall_at;
  std::map<std::size_t, double> mean_recall_at;
  std::map<std::size_t, std::vector<double>> per_class_recall;  // K → per class (index 0 unused, NaN if absent)
  double object_accuracy = 0.0;
  double column_mass_entropy = 0.0;
  std::size_t num_scenes = 0;
};

/// R@K averages per-scene recall over scenes with ground truth; per-class
/// recall averages per-scene class recall over scenes containing the class;
/// mR@K is the unweighted mean over classes present in the split.
inline void aggregate_recall(const std::vector<std::vector<SceneHits>>& hits_by_k, const std::vector<std::size_t>& ks,
                             std::size_t num_rel_cats, EvalReport& report) {
  for (std::size_t ki = 0; ki < ks.size(); ++ki) {
    const std::size_t k = ks[ki];
    double recall_sum = 0.0;
    std::size_t recall_scenes = 0;
    std::vector<double> class_sum(num_rel_cats, 0.0);
    std::vector<std::size_t> class_scenes(num_rel_cats, 0);
    for (const SceneHits& h : hits_by_k[ki]) {
      std::size_t gt_total = 0;
      std::size_t hit_total = 0;
      for (const auto& [cls, count] : h.gt) {
        const auto it = h.hit.find(cls);
        const std::size_t hits = it == h.hit.end() ? 0 : it->second;
        gt_total += count;
        hit_total += hits;
        class_sum[cls] += static_cast<double>(hits) / static_cast<double>(count);
        ++class_scenes[cls];
      }
      if (gt_total == 0) continue;
      recall_sum += static_cast<double>(hit_total) / static_cast<double>(gt_total);
      ++recall_scenes;
    }
    report.recall_at[k] = recall_scenes == 0 ? 0.0 : recall_sum / static_cast<double>(recall_scenes);
    std::vector<double> per_class(num_rel_cats, std::nan(""));
    double mean_sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 1; c < num_rel_cats; ++c) {
      if (class_scenes[c] == 0) continue;
      per_class[c] = class_sum[c] / static_cast<double>(class_scenes[c]);
      mean_sum += per_class[c];
      ++present;
    }
    report.per_class_recall[k] = std::move(per_class);
    report.mean_recall_at[k] = present == 0 ? 0.0 : mean_sum / static_cast<double>(present);
  }
}

/// Runs fn(i) for i in [0, count) on up to `threads` workers, contiguous chunks.
inline void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (count + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t * chunk; i < std::min(count, (t + 1) * chunk); ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct ScenePrediction {
  DenseMatrix node_probs;                  // n × O
  std::vector<std::size_t> labels;         // labels used for scoring
  std::vector<TripletPrediction> ranked;   // one per ordered pair, ranked
  DenseMatrix rel_probs;                   // n(n−1) × R
};

/// Scores every ordered pair. PREDCLS-like uses ground-truth labels with
/// object confidence 1; SGCLS-like uses predicted labels and their
/// probabilities. Triplet score = subject prob × relation prob × object prob,
/// with the relation taken as the best non-background class.
inline ScenePrediction predict_scene(const ModelParams& params, const SceneGraphSample& scene, const UmpConfig& ump,
                                     Protocol protocol) {
  Tape tape;
  const ModelVars vars = ModelVars::on(tape, params, false, false);
  ScenePrediction out;
  SceneForward nodes = forward_scene(tape, vars, scene, {}, scene.object_labels, ump, params.bias);
  out.node_probs = row_softmax(nodes.node_logits).value();
  const std::vector<std::size_t> predicted = argmax_rows(out.node_probs);
  out.labels = protocol == Protocol::kPredCls ? scene.object_labels : predicted;
  const std::vector<PairRef> pairs = all_pairs(scene.num_nodes());
  if (pairs.empty()) return out;
  // Second pass reuses the tape; the node part is recomputed, which is cheap.
  SceneForward f = forward_scene(tape, vars, scene, pairs, out.labels, ump, params.bias);
  out.rel_probs = row_softmax(f.rel_logits).value();
  out.ranked.reserve(pairs.size());
  for (std::size_t r = 0; r < pairs.size(); ++r) {
    std::size_t best = 1;
    for (std::size_t c = 2; c < out.rel_probs.cols(); ++c)
      if (out.rel_probs(r, c) > out.rel_probs(r, best)) best = c;
    const std::size_t s = pairs[r].subject;
    const std::size_t o = pairs[r].object;
    double score = out.rel_probs(r, best);
    if (protocol == Protocol::kSgCls) score *= out.node_probs(s, out.labels[s]) * out.node_probs(o, out.labels[o]);
    out.ranked.push_back({s, o, out.labels[s], out.labels[o], best, score});
  }
  rank_triplets(out.ranked);
  return out;
}

inline EvalReport evaluate(const ModelParams& params, const SynthConfig& data_config,
                           const std::vector<SceneGraphSample>& scenes, const UmpConfig& ump, Protocol protocol,
                           std::vector<std::size_t> ks = {20, 50, 100}, std::size_t threads = 1) {
  check_dataset_matches(params, data_config);
  if (ks.empty()) throw ParameterError("evaluate: empty K list");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());

  std::vector<ScenePrediction> preds(scenes.size());
  parallel_for(scenes.size(), threads, [&](std::size_t i) { preds[i] = predict_scene(params, scenes[i], ump, protocol); });

  EvalReport report;
  report.protocol = protocol;
  report.ks = ks;
  report.num_scenes = scenes.size();
  std::vector<std::vector<SceneHits>> hits(ks.size());
  std::size_t correct = 0;
  std::size_t total_nodes = 0;
  std::vector<double> mass(data_config.num_rel_cats, 0.0);
  double mass_total = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::vector<std::size_t> predicted = argmax_rows(preds[i].node_probs);
    for (std::size_t v = 0; v < predicted.size(); ++v) correct += predicted[v] == scenes[i].object_labels[v] ? 1 : 0;
    total_nodes += predicted.size();
    for (std::size_t ki = 0; ki < ks.size(); ++ki) hits[ki].push_back(match_triplets(preds[i].ranked, scenes[i], ks[ki]));
    const DenseMatrix& p = preds[i].rel_probs;
    for (std::size_t r = 0; r < p.rows(); ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) {
        mass[c] += p(r, c);
        mass_total += p(r, c);
      }
  }
  report.object_accuracy = total_nodes == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total_nodes);
  for (double m : mass) {
    if (m <= 0.0) continue;
    const double q = m / mass_total;
    report.column_mass_entropy -= q * std::log(q);
  }
  aggregate_recall(hits, ks, data_config.num_rel_cats, report);
  return report;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["protocol"] = to_string(r.protocol);
  j["num_scenes"] = r.num_scenes;
  j["object_accuracy"] = r.object_accuracy;
  j["column_mass_entropy"] = r.column_mass_entropy;
  for (std::size_t k : r.ks) {
    const std::string key = std::to_string(k);
    j["recall_at"][key] = r.recall_at.at(k);
    j["mean_recall_at"][key] = r.mean_recall_at.at(k);
    nlohmann::json per = nlohmann::json::array();
    const auto& pc = r.per_class_recall.at(k);
    for (std::size_t c = 1; c < pc.size(); ++c) per.push_back(std::isnan(pc[c]) ? nlohmann::json() : nlohmann::json(pc[c]));
    j["per_class_recall"][key] = per;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON lines, header then one state line.

inline constexpr const char* kCheckpointFormatName = "runet.checkpoint";
inline constexpr int kCheckpointFormatVersion = 1;

inline void save_checkpoint(const TrainState& state, const TrainConfig& config, const SynthConfig& data_config,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  nlohmann::json header{{"format", kCheckpointFormatName},
                        {"version", kCheckpointFormatVersion},
                        {"train_config", config},
                        {"data_config", data_config},
                        {"epochs_done", state.epochs_done},
                        {"steps_done", state.steps_done}};
  nlohmann::json body;
  body["params"] = params_to_json(state.params);
  body["velocity"] = nlohmann::json::array();
  for (const auto& v : state.velocity) body["velocity"].push_back(matrix_to_json(v));
  out << header.dump() << '\n' << body.dump() << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

struct Checkpoint {
  TrainState state;
  TrainConfig config;
  SynthConfig data_config;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string header_line;
  std::string body_line;
  if (!std::getline(in, header_line)) throw ParseError(1, "empty checkpoint");
  if (!std::getline(in, body_line)) throw ParseError(2, "checkpoint body missing");
  Checkpoint ck;
  std::size_t line = 1;
  try {
    const auto header = nlohmann::json::parse(header_line);
    if (header.at("format").get<std::string>() != kCheckpointFormatName) throw ParseError(1, "not a checkpoint");
    if (header.at("version").get<int>() != kCheckpointFormatVersion) throw ParseError(1, "unsupported version");
    ck.config = header.at("train_config").get<TrainConfig>();
    ck.data_config = header.at("data_config").get<SynthConfig>();
    ck.state.epochs_done = header.at("epochs_done").get<std::size_t>();
    ck.state.steps_done = header.at("steps_done").get<std::size_t>();
    line = 2;
    const auto body = nlohmann::json::parse(body_line);
    ck.state.params = params_from_json(body.at("params"));
    for (const auto& v : body.at("velocity")) ck.state.velocity.push_back(matrix_from_json(v));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line, std::string("malformed checkpoint: ") + e.what());
  } catch (const DimensionError& e) {
    throw ParseError(line, e.what());
  }
  return ck;
}

inline void write_trace_csv(const std::vector<TrainStep>& trace, const std::string& path, const std::string& echo) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "# " << echo << '\n';
  out << "epoch,step,loss,object_loss,relation_loss,grad_norm,clipped\n";
  char buf[256];
  for (const auto& s : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%d\n", s.epoch, s.step, s.loss, s.object_loss,
                  s.relation_loss, s.grad_norm, s.clipped ? 1 : 0);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Ablation

enum class AblationAxis { kP, kLayers, kTau, kGrouping, kModule };

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "p") return AblationAxis::kP;
  if (s == "K" || s == "layers") return AblationAxis::kLayers;
  if (s == "tau") return AblationAxis::kTau;
  if (s == "grouping") return AblationAxis::kGrouping;
  if (s == "module") return AblationAxis::kModule;
  throw ParameterError("unknown ablation axis '" + s + "'");
}

inline const char* to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::kP: return "p";
    case AblationAxis::kLayers: return "layers";
    case AblationAxis::kTau: return "tau";
    case AblationAxis::kGrouping: return "grouping";
    case AblationAxis::kModule: return "module";
  }
  return "?";
}

/// Applies one axis value to a config. Module values: none, ump, gde, both
/// (U-MP on = unrolled_reweighted, off = gmp_baseline; GDE off = τ 0).
inline TrainConfig apply_axis(TrainConfig c, AblationAxis axis, const std::string& value) {
  try {
    switch (axis) {
      case AblationAxis::kP: c.ump.p = std::stod(value); break;
      case AblationAxis::kLayers: c.ump.num_layers = std::stoul(value); break;
      case AblationAxis::kTau: c.tau = std::stod(value); break;
      case AblationAxis::kGrouping: c.grouping = parse_grouping(value); break;
      case AblationAxis::kModule: {
        const bool ump = value == "ump" || value == "both";
        const bool gde = value == "gde" || value == "both";
        if (!ump && !gde && value != "none") throw ParameterError("unknown module setting '" + value + "'");
        c.ump.variant = ump ? UmpVariant::kUnrolledReweighted : UmpVariant::kGmpBaseline;
        if (!gde) c.tau = 0.0;
        break;
      }
    }
  } catch (const std::logic_error&) {
    throw ParameterError(std::string("bad value '") + value + "' for axis " + to_string(axis));
  }
  c.validate();
  return c;
}

struct AblationRow {
  std::string axis;
  std::string value;
  std::uint64_t seed = 0;
  EvalReport report;
};

/// One train + evaluate per (value, seed); rows ordered by value then seed.
inline std::vector<AblationRow> ablate(const Dataset& ds, const TrainConfig& base, AblationAxis axis,
                                       const std::vector<std::string>& values, const std::vector<std::uint64_t>& seeds,
                                       Protocol protocol, const std::string& split = "test",
                                       std::vector<std::size_t> ks = {20, 50, 100}, std::size_t threads = 1) {
  if (values.empty() || seeds.empty()) throw ParameterError("ablate: need at least one value and one seed");
  std::vector<AblationRow> rows(values.size() * seeds.size());
  std::vector<TrainConfig> configs;
  for (const auto& v : values) configs.push_back(apply_axis(base, axis, v));
  parallel_for(rows.size(), threads, [&](std::size_t i) {
    const std::size_t vi = i / seeds.size();
    TrainConfig c = configs[vi];
    c.seed = seeds[i % seeds.size()];
    TrainResult r = train(ds, c);
    rows[i] = {to_string(axis), values[vi], c.seed, evaluate(r.state.params, ds.config, ds.split(split), c.ump, protocol, ks)};
  });
  return rows;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path, const std::string& echo) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "# " << echo << '\n';
  if (rows.empty()) return;
  out << "axis,value,seed,protocol,object_accuracy,column_mass_entropy";
  for (std::size_t k : rows.front().report.ks) out << ",R@" << k << ",mR@" << k;
  out << '\n';
  char buf[64];
  for (const auto& r : rows) {
    out << r.axis << ',' << r.value << ',' << r.seed << ',' << to_string(r.report.protocol);
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g", r.report.object_accuracy, r.report.column_mass_entropy);
    out << buf;
    for (std::size_t k : r.report.ks) {
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g", r.report.recall_at.at(k), r.report.mean_recall_at.at(k));
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace runet
