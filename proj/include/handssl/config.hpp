#pragma once

#include <json.hpp>

#include <stdexcept>
#include <string>

#include "handssl/synthetic.hpp"
#include "handssl/trainer.hpp"

namespace handssl {

// Config or command-line problems map to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Full declarative run configuration: dataset paths and split, model, train
// and generator settings. Serialized as a JSON tree; unknown keys anywhere
// are rejected with their path.
struct RunConfig {
  uint64_t seed = 1;
  std::string out;

  std::string data_dir;
  std::string test_dir;
  double label_fraction = 0.05;
  double unlabeled_fraction = 1.0;
  uint64_t split_seed = 1;
  int out_size = 128;

  ModelConfig model;
  TrainConfig train;

  int generate_n = 2000;
  double generate_noise_std_mm = 1.5;
  double generate_cube_mm = 250.0;
  int generate_raw_size = 128;
};

inline nlohmann::json run_config_defaults() {
  const RunConfig c;
  nlohmann::json j;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["data"] = {{"dir", c.data_dir},
               {"test_dir", c.test_dir},
               {"label_fraction", c.label_fraction},
               {"unlabeled_fraction", c.unlabeled_fraction},
               {"split_seed", c.split_seed},
               {"out_size", c.out_size}};
  j["model"] = c.model;
  nlohmann::json t = c.train;
  t.erase("seed");  // the root seed is the single source of randomness
  j["train"] = t;
  j["generate"] = {{"n", c.generate_n},
                   {"noise_std_mm", c.generate_noise_std_mm},
                   {"cube_mm", c.generate_cube_mm},
                   {"raw_size", c.generate_raw_size}};
  return j;
}

// Overlays user JSON onto the defaults tree; any key not present in the
// defaults is unknown and rejected.
inline void merge_config(nlohmann::json& base, const nlohmann::json& user,
                         const std::string& path = "") {
  if (!user.is_object()) throw UsageError("config: expected an object at '" + path + "'");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw UsageError("config: unknown key '" + p + "'");
    if (base[it.key()].is_object() && it.value().is_object())
      merge_config(base[it.key()], it.value(), p);
    else
      base[it.key()] = it.value();
  }
}

// Applies one dotted-path override, e.g. "train.m_r=0.25".
inline void apply_override(nlohmann::json& base, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw UsageError("override '" + assignment + "' is not of the form key.path=value");
  const std::string key = assignment.substr(0, eq);
  const std::string val = assignment.substr(eq + 1);

  nlohmann::json* node = &base;
  size_t pos = 0;
  std::string walked;
  for (;;) {
    const size_t dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
    walked = walked.empty() ? part : walked + "." + part;
    if (!node->contains(part)) throw UsageError("config: unknown key '" + walked + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  const auto parsed = nlohmann::json::parse(val, nullptr, false);
  *node = parsed.is_discarded() ? nlohmann::json(val) : parsed;
}

inline RunConfig run_config_from_json(const nlohmann::json& j, uint64_t* explicit_seed = nullptr) {
  RunConfig c;
  try {
    c.seed = j.at("seed").get<uint64_t>();
    if (explicit_seed) c.seed = *explicit_seed;
    c.out = j.at("out").get<std::string>();
    const auto& d = j.at("data");
    c.data_dir = d.at("dir").get<std::string>();
    c.test_dir = d.at("test_dir").get<std::string>();
    c.label_fraction = d.at("label_fraction").get<double>();
    c.unlabeled_fraction = d.at("unlabeled_fraction").get<double>();
    c.split_seed = d.at("split_seed").get<uint64_t>();
    c.out_size = d.at("out_size").get<int>();
    c.model = j.at("model").get<ModelConfig>();
    nlohmann::json t = j.at("train");
    t["seed"] = c.seed;
    c.train = t.get<TrainConfig>();
    const auto& g = j.at("generate");
    c.generate_n = g.at("n").get<int>();
    c.generate_noise_std_mm = g.at("noise_std_mm").get<double>();
    c.generate_cube_mm = g.at("cube_mm").get<double>();
    c.generate_raw_size = g.at("raw_size").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  if (c.model.in_size != c.out_size)
    c.model.in_size = c.out_size;  // the crop resolution is the network input
  try {
    c.model.validate();
    c.train.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return c;
}

}  // namespace handssl
