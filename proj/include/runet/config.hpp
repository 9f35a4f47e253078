#pragma once

// Flat `key = value` run configuration covering data generation, the model
// and training. '#' starts a comment. Unknown keys are rejected.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "runet/errors.hpp"
#include "runet/pipeline.hpp"
#include "runet/synth_scene.hpp"

namespace runet {

/// Settings for the `denoise` convergence experiment.
struct DenoiseConfig {
  std::size_t nodes = 12;
  std::size_t dim = 4;
  std::size_t iterations = 60;
  std::uint64_t seed = 3;

  friend bool operator==(const DenoiseConfig&, const DenoiseConfig&) = default;
};

struct RunConfig {
  SynthConfig data;
  TrainConfig train;
  DenoiseConfig denoise;

  RunConfig() { train.ump.feature_dim = data.feature_dim; }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T out{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) throw ParameterError("bad value '" + text + "' for key '" + key + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ParameterError("bad value '" + text + "' for key '" + key + "' (expected true or false)");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
  auto sz = [](auto get) {
    return Setter([get](RunConfig& c, const std::string& k, const std::string& v) {
      get(c) = parse_number<std::size_t>(k, v);
    });
  };
  auto u64 = [](auto get) {
    return Setter([get](RunConfig& c, const std::string& k, const std::string& v) {
      get(c) = parse_number<std::uint64_t>(k, v);
    });
  };
  auto real = [](auto get) {
    return Setter([get](RunConfig& c, const std::string& k, const std::string& v) {
      get(c) = parse_number<double>(k, v);
    });
  };
  static const std::map<std::string, Setter> table{
      {"num_object_cats", sz([](RunConfig& c) -> auto& { return c.data.num_object_cats; })},
      {"num_rel_cats", sz([](RunConfig& c) -> auto& { return c.data.num_rel_cats; })},
      {"min_nodes", sz([](RunConfig& c) -> auto& { return c.data.min_nodes; })},
      {"max_nodes", sz([](RunConfig& c) -> auto& { return c.data.max_nodes; })},
      {"feature_dim",
       Setter([](RunConfig& c, const std::string& k, const std::string& v) {
         c.data.feature_dim = parse_number<std::size_t>(k, v);
         c.train.ump.feature_dim = c.data.feature_dim;
       })},
      {"cluster_separation", real([](RunConfig& c) -> auto& { return c.data.cluster_separation; })},
      {"scene_spread", real([](RunConfig& c) -> auto& { return c.data.scene_spread; })},
      {"instance_noise", real([](RunConfig& c) -> auto& { return c.data.instance_noise; })},
      {"spurious_pair_rate", real([](RunConfig& c) -> auto& { return c.data.spurious_pair_rate; })},
      {"tail_exponent", real([](RunConfig& c) -> auto& { return c.data.tail_exponent; })},
      {"annotation_drop_rate", real([](RunConfig& c) -> auto& { return c.data.annotation_drop_rate; })},
      {"relation_density", real([](RunConfig& c) -> auto& { return c.data.relation_density; })},
      {"detector_strength", real([](RunConfig& c) -> auto& { return c.data.detector_strength; })},
      {"relation_signal", real([](RunConfig& c) -> auto& { return c.data.relation_signal; })},
      {"affinity_signal", real([](RunConfig& c) -> auto& { return c.data.affinity_signal; })},
      {"union_noise", real([](RunConfig& c) -> auto& { return c.data.union_noise; })},
      {"num_train", sz([](RunConfig& c) -> auto& { return c.data.num_train; })},
      {"num_val", sz([](RunConfig& c) -> auto& { return c.data.num_val; })},
      {"num_test", sz([](RunConfig& c) -> auto& { return c.data.num_test; })},
      {"data_seed", u64([](RunConfig& c) -> auto& { return c.data.seed; })},
      {"learning_rate", real([](RunConfig& c) -> auto& { return c.train.learning_rate; })},
      {"momentum", real([](RunConfig& c) -> auto& { return c.train.momentum; })},
      {"batch_size", sz([](RunConfig& c) -> auto& { return c.train.batch_size; })},
      {"epochs", sz([](RunConfig& c) -> auto& { return c.train.epochs; })},
      {"tau", real([](RunConfig& c) -> auto& { return c.train.tau; })},
      {"seed", u64([](RunConfig& c) -> auto& { return c.train.seed; })},
      {"min_group_size", sz([](RunConfig& c) -> auto& { return c.train.min_group_size; })},
      {"bg_ratio", sz([](RunConfig& c) -> auto& { return c.train.bg_ratio; })},
      {"clip_norm", real([](RunConfig& c) -> auto& { return c.train.clip_norm; })},
      {"layers", sz([](RunConfig& c) -> auto& { return c.train.ump.num_layers; })},
      {"epsilon", real([](RunConfig& c) -> auto& { return c.train.ump.epsilon; })},
      {"p", real([](RunConfig& c) -> auto& { return c.train.ump.p; })},
      {"variant",
       Setter([](RunConfig& c, const std::string&, const std::string& v) { c.train.ump.variant = parse_ump_variant(v); })},
      {"grouping",
       Setter([](RunConfig& c, const std::string&, const std::string& v) { c.train.grouping = parse_grouping(v); })},
      {"train_bias",
       Setter([](RunConfig& c, const std::string& k, const std::string& v) { c.train.train_bias = parse_bool(k, v); })},
      {"denoise_nodes", sz([](RunConfig& c) -> auto& { return c.denoise.nodes; })},
      {"denoise_dim", sz([](RunConfig& c) -> auto& { return c.denoise.dim; })},
      {"denoise_iterations", sz([](RunConfig& c) -> auto& { return c.denoise.iterations; })},
      {"denoise_seed", u64([](RunConfig& c) -> auto& { return c.denoise.seed; })},
  };
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::setters()) keys.push_back(k);
  return keys;
}

/// Applies one key; throws ParameterError naming an unknown key.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& table = detail::setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ParameterError("unknown config key '" + key + "'");
  it->second(c, key, value);
}

inline void validate(const RunConfig& c) {
  c.data.validate();
  c.train.validate();
  if (c.denoise.nodes < 2 || c.denoise.dim < 1 || c.denoise.iterations < 1) {
    throw ParameterError("denoise_nodes must be >= 2, denoise_dim and denoise_iterations >= 1");
  }
}

inline RunConfig parse_config(std::istream& in, const std::string& source = "<config>") {
  RunConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(lineno, source + ": expected 'key = value'");
    set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  validate(c);
  return c;
}

inline RunConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  return parse_config(in, path);
}

inline nlohmann::json config_echo(const RunConfig& c) {
  return nlohmann::json{{"data", c.data},
                        {"train", c.train},
                        {"denoise",
                         {{"nodes", c.denoise.nodes},
                          {"dim", c.denoise.dim},
                          {"iterations", c.denoise.iterations},
                          {"seed", c.denoise.seed}}}};
}

}  // namespace runet
