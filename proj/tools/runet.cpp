// runet: generate synthetic scene graphs, train and evaluate the model, run
// ablations, self-checks, and solver convergence traces.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "runet/checks.hpp"
#include "runet/config.hpp"
#include "runet/convergence.hpp"
#include "runet/pipeline.hpp"
#include "runet/synth_scene.hpp"

namespace fs = std::filesystem;
using namespace runet;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau;
  std::optional<double> p;
  std::optional<std::size_t> layers;
  std::optional<std::string> variant;
  std::optional<std::size_t> epochs;
  std::size_t threads = 1;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Run configuration file (key = value); defaults when omitted");
  cmd->add_option("--threads", o.threads, "Worker thread cap")->capture_default_str();
}

void add_model_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Training seed (overrides `seed`)");
  cmd->add_option("--tau", o.tau, "Diversity weight τ (default 0.1)");
  cmd->add_option("--p", o.p, "ℓp exponent of the reweighting (default 0.1)");
  cmd->add_option("--layers", o.layers, "Number of U-MP layers K (default 5)");
  cmd->add_option("--variant", o.variant, "gmp_baseline | unrolled | unrolled_reweighted (default)");
  cmd->add_option("--epochs", o.epochs, "Training epochs (default 10)");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.tau) c.train.tau = *o.tau;
  if (o.p) c.train.ump.p = *o.p;
  if (o.layers) c.train.ump.num_layers = *o.layers;
  if (o.variant) c.train.ump.variant = parse_ump_variant(*o.variant);
  if (o.epochs) c.train.epochs = *o.epochs;
  validate(c);
  return c;
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ParameterError("bad list entry '" + item + "' in '" + text + "'");
    }
  }
  if (out.empty()) throw ParameterError("empty list '" + text + "'");
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(item);
  if (out.empty()) throw ParameterError("empty list '" + text + "'");
  return out;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
}

std::size_t count_triplets(const std::vector<SceneGraphSample>& scenes, bool full) {
  std::size_t n = 0;
  for (const auto& s : scenes)
    for (std::size_t r : full ? s.rel_labels_full : s.rel_labels) n += r != 0 ? 1 : 0;
  return n;
}

int cmd_gen(const Overrides& o, const std::string& out_path) {
  RunConfig c = resolve(o);
  if (o.seed) c.data.seed = *o.seed;
  const Dataset ds = generate(c.data);
  save(ds, out_path);
  for (const char* split : {"train", "val", "test"}) {
    const auto& s = ds.split(split);
    std::printf("%-5s scenes %zu triplets %zu (annotated %zu)\n", split, s.size(), count_triplets(s, true),
                count_triplets(s, false));
  }
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

int cmd_train(const Overrides& o, const std::string& data_path, const std::string& out_dir, const std::string& resume) {
  RunConfig c = resolve(o);
  if (o.seed) c.train.seed = *o.seed;
  const Dataset ds = load(data_path);
  c.data = ds.config;
  c.train.ump.feature_dim = ds.config.feature_dim;
  ensure_dir(out_dir);

  std::optional<TrainState> start;
  if (!resume.empty()) {
    Checkpoint ck = load_checkpoint(resume);
    if (!(ck.data_config == ds.config)) throw ContractError("checkpoint was trained on a different dataset");
    start = std::move(ck.state);
  }
  const std::string echo = config_echo(c).dump();
  std::vector<TrainStep> before;
  if (start && fs::exists(out_dir + "/loss.csv")) {
    // Continuing in place: keep the earlier rows of the trace.
    std::ifstream in(out_dir + "/loss.csv");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#' || line.rfind("epoch", 0) == 0) continue;
      TrainStep s;
      int clipped = 0;
      if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf,%lf,%lf,%d", &s.epoch, &s.step, &s.loss, &s.object_loss,
                      &s.relation_loss, &s.grad_norm, &clipped) != 7) {
        throw ParseError(0, "bad row in " + out_dir + "/loss.csv");
      }
      s.clipped = clipped != 0;
      if (s.step < start->steps_done) before.push_back(s);
    }
  }

  auto on_epoch = [&](const TrainState& state, const std::vector<TrainStep>& trace) {
    save_checkpoint(state, c.train, c.data, out_dir + "/checkpoint_epoch" + std::to_string(state.epochs_done) + ".jsonl");
    std::vector<TrainStep> all = before;
    all.insert(all.end(), trace.begin(), trace.end());
    write_trace_csv(all, out_dir + "/loss.csv", echo);
    std::printf("epoch %zu loss %.6f\n", state.epochs_done, trace.empty() ? 0.0 : trace.back().loss);
  };
  const TrainResult r = train(ds, c.train, start ? &*start : nullptr, on_epoch);
  save_checkpoint(r.state, c.train, c.data, out_dir + "/checkpoint.jsonl");
  std::size_t clipped = 0;
  for (const auto& s : r.trace) clipped += s.clipped ? 1 : 0;
  std::printf("steps %zu, clipped %zu, wrote %s/checkpoint.jsonl and %s/loss.csv\n", r.state.steps_done, clipped,
              out_dir.c_str(), out_dir.c_str());
  return 0;
}

void print_report(const EvalReport& r) {
  std::printf("protocol %s, scenes %zu, object accuracy %.4f, column-mass entropy %.4f\n", to_string(r.protocol),
              r.num_scenes, r.object_accuracy, r.column_mass_entropy);
  for (std::size_t k : r.ks) std::printf("R@%-4zu %.4f   mR@%-4zu %.4f\n", k, r.recall_at.at(k), k, r.mean_recall_at.at(k));
}

int cmd_eval(const Overrides& o, const std::string& ckpt_path, const std::string& data_path, const std::string& protocol,
             const std::string& k_list, const std::string& split, const std::string& out_dir) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const Dataset ds = load(data_path);
  if (!(ck.data_config == ds.config)) throw ContractError("checkpoint was trained on a different dataset");
  const EvalReport r = evaluate(ck.state.params, ds.config, ds.split(split), ck.config.ump, parse_protocol(protocol),
                                parse_size_list(k_list), o.threads);
  print_report(r);
  if (out_dir.empty()) return 0;
  ensure_dir(out_dir);
  RunConfig echo;
  echo.data = ck.data_config;
  echo.train = ck.config;
  nlohmann::json j = report_to_json(r);
  j["split"] = split;
  j["checkpoint"] = ckpt_path;
  j["config"] = config_echo(echo);
  const std::string stem = out_dir + "/report_" + protocol;
  write_json(j, stem + ".json");

  std::ofstream csv(stem + "_per_class.csv");
  if (!csv) throw IoError("cannot open '" + stem + "_per_class.csv' for writing");
  csv << "# " << config_echo(echo).dump() << '\n' << "class";
  for (std::size_t k : r.ks) csv << ",R@" << k;
  csv << '\n';
  for (std::size_t cls = 1; cls < ds.config.num_rel_cats; ++cls) {
    csv << cls;
    for (std::size_t k : r.ks) {
      const double v = r.per_class_recall.at(k)[cls];
      csv << ',';
      if (!std::isnan(v)) csv << v;
    }
    csv << '\n';
  }
  std::printf("wrote %s.json and %s_per_class.csv\n", stem.c_str(), stem.c_str());
  return 0;
}

int cmd_ablate(const Overrides& o, const std::string& data_path, const std::string& axis, const std::string& values,
               const std::string& seeds, const std::string& protocol, const std::string& k_list,
               const std::string& out_path) {
  RunConfig c = resolve(o);
  const Dataset ds = data_path.empty() ? generate(c.data) : load(data_path);
  c.data = ds.config;
  c.train.ump.feature_dim = ds.config.feature_dim;
  std::vector<std::uint64_t> seed_list;
  for (std::size_t s : parse_size_list(seeds)) seed_list.push_back(s);
  const auto rows = ablate(ds, c.train, parse_axis(axis), split_list(values), seed_list, parse_protocol(protocol), "test",
                           parse_size_list(k_list), o.threads);
  nlohmann::json echo = config_echo(c);
  echo["axis"] = axis;
  echo["values"] = split_list(values);
  echo["seeds"] = seed_list;
  write_ablation_csv(rows, out_path, echo.dump());
  for (const auto& r : rows) {
    const std::size_t k = r.report.ks.back();
    std::printf("%s=%s seed %llu: object acc %.4f R@%zu %.4f mR@%zu %.4f\n", r.axis.c_str(), r.value.c_str(),
                static_cast<unsigned long long>(r.seed), r.report.object_accuracy, k, r.report.recall_at.at(k), k,
                r.report.mean_recall_at.at(k));
  }
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

int cmd_check(const std::string& suite, const std::string& inject) {
  CheckOptions opt;
  if (!inject.empty()) opt.sign_flip = parse_op_kind(inject);
  const auto results = run_checks(suite, opt);
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::printf("%-4s %-5s %-32s max error %.3e  tolerance %.0e\n", r.passed() ? "PASS" : "FAIL", r.suite.c_str(),
                r.name.c_str(), r.max_error, r.tolerance);
    failed += r.passed() ? 0 : 1;
  }
  std::printf("%zu of %zu checks passed\n", results.size() - failed, results.size());
  return failed == 0 ? 0 : 1;
}

int cmd_denoise(const Overrides& o, const std::string& out_path) {
  RunConfig c = resolve(o);
  if (o.seed) c.denoise.seed = *o.seed;
  const GldProblem prob =
      make_denoise_problem(c.denoise.nodes, c.denoise.dim, c.denoise.seed, c.train.ump.epsilon, c.train.ump.p);
  const ConvergenceTrace t = denoise_convergence(prob, c.denoise.iterations);
  std::ofstream out(out_path);
  if (!out) throw IoError("cannot open '" + out_path + "' for writing");
  out << "# " << config_echo(c).dump() << '\n' << "iteration";
  for (const auto& s : t.solvers) out << ',' << s;
  out << '\n';
  char buf[32];
  for (std::size_t k = 0; k < t.error.size(); ++k) {
    out << k;
    for (double e : t.error[k]) {
      std::snprintf(buf, sizeof buf, ",%.17g", e);
      out << buf;
    }
    out << '\n';
  }
  std::printf("final ‖Y_k − Y*‖_F / ‖X‖_F:");
  for (std::size_t s = 0; s < t.solvers.size(); ++s)
    std::printf(" %s %.3e", t.solvers[s].c_str(), t.error.back()[s] / t.x_norm);
  std::printf("\nwrote %s\n", out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"runet: regularized unrolling for scene-graph generation on synthetic data"};
  app.require_subcommand(1);
  Overrides o;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset (train/val/test in one file)");
  std::string gen_out = "scenes.jsonl";
  add_common(gen, o);
  gen->add_option("--seed", o.seed, "Data seed (overrides `data_seed`)");
  gen->add_option("--out", gen_out, "Dataset path")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Train on a dataset; writes per-epoch checkpoints and loss.csv");
  std::string data_path;
  std::string train_out = "run";
  std::string resume;
  add_common(tr, o);
  add_model_flags(tr, o);
  tr->add_option("--data", data_path, "Dataset path")->required();
  tr->add_option("--out", train_out, "Output directory")->capture_default_str();
  tr->add_option("--resume", resume, "Checkpoint to continue from");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ckpt;
  std::string protocol = "sgcls";
  std::string k_list = "20,50,100";
  std::string split = "test";
  std::string eval_out;
  add_common(ev, o);
  ev->add_option("--checkpoint", ckpt, "Checkpoint path")->required();
  ev->add_option("--data", data_path, "Dataset path")->required();
  ev->add_option("--protocol", protocol, "predcls | sgcls")->capture_default_str();
  ev->add_option("--k-list", k_list, "Comma-separated K values")->capture_default_str();
  ev->add_option("--split", split, "train | val | test")->capture_default_str();
  ev->add_option("--out", eval_out, "Directory for report JSON and per-class CSV");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate over one axis and a seed list; writes a CSV table");
  std::string axis = "p";
  std::string values = "0.1,2";
  std::string seeds = "1,2,3";
  std::string ablate_out = "ablation.csv";
  add_common(ab, o);
  add_model_flags(ab, o);
  ab->add_option("--data", data_path, "Dataset path (generated from the config when omitted)");
  ab->add_option("--axis", axis, "p | K | tau | grouping | module")->capture_default_str();
  ab->add_option("--values", values, "Comma-separated axis values")->capture_default_str();
  ab->add_option("--seeds", seeds, "Comma-separated training seeds")->capture_default_str();
  ab->add_option("--protocol", protocol, "predcls | sgcls")->capture_default_str();
  ab->add_option("--k-list", k_list, "Comma-separated K values")->capture_default_str();
  ab->add_option("--out", ablate_out, "CSV path")->capture_default_str();

  auto* ck = app.add_subcommand("check", "Run numerical self-checks");
  std::string suite = "all";
  std::string inject;
  ck->add_option("suite", suite, "grad | gld | mm | l21 | all")->capture_default_str();
  ck->add_option("--inject-sign-flip", inject, "Negate one backward rule (e.g. matmul) to see the checks fail");

  auto* dn = app.add_subcommand("denoise", "Write solver convergence ‖Y_k − Y*‖_F per iteration as CSV");
  std::string denoise_out = "denoise.csv";
  add_common(dn, o);
  dn->add_option("--seed", o.seed, "Instance seed (overrides `denoise_seed`)");
  dn->add_option("--p", o.p, "ℓp exponent for the reweighted solver (default 0.1)");
  dn->add_option("--out", denoise_out, "CSV path")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen(o, gen_out);
    if (*tr) return cmd_train(o, data_path, train_out, resume);
    if (*ev) return cmd_eval(o, ckpt, data_path, protocol, k_list, split, eval_out);
    if (*ab) return cmd_ablate(o, data_path, axis, values, seeds, protocol, k_list, ablate_out);
    if (*ck) return cmd_check(suite, inject);
    if (*dn) return cmd_denoise(o, denoise_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
