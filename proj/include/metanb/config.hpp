#pragma once

// Run configuration: one JSON file, every key validated before any
// computation touches data, unknown keys rejected outright. The parsed
// struct can be re-serialized in canonical form; output files embed that
// echo so any result can be reproduced from its own metrics file.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "metanb/common.hpp"

namespace metanb {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataConfig {
  std::string source = "spirals";  // "spirals" or "file"
  // spirals
  std::size_t n_per_class = 500;
  double noise_std = 0.1;
  double turns = 2.0;
  // file
  std::string path;
  std::vector<std::size_t> label_columns;
  std::string delimiter = ",";  // single character, or "tab"
  bool detect_header = true;
  // shared
  bool normalize = true;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::size_t folds = 0;  // 0 = single split; >= 2 = cross-validation
};

struct ModelConfig {
  std::vector<std::size_t> extractor;    // layer dims incl. input; empty = none
  std::vector<std::size_t> head_hidden;  // hidden widths; empty = linear head
  std::string output = "dot";            // "dot" or "cosine"
  double tau_init = 10.0;
  std::size_t dict_size = 200;
  double gamma = 5.0;
  std::string metric = "euclidean";
  std::string value_mode;  // empty = by task: soft_label / raw
  std::string value_init;  // empty = by task: "gaussian" / "uniform_label_range"
  std::size_t inner_steps = 1;
  std::string alpha_mode = "scalar";  // "scalar" or "diagonal"
  double alpha_init = 0.1;
  double lambda = 0.0;
};

struct OptimConfig {
  std::string kind = "adamw";  // "adamw" or "sgd"
  double lr = 1e-3;
  double weight_decay = 7.5e-5;
  double momentum = 0.0;
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  std::size_t lr_drop_epoch = 0;
  std::size_t early_stop_patience = 0;
  bool decay_dict_values = false;
  bool decay_alpha = false;
};

struct RunConfig {
  std::string task = "classification";
  std::uint64_t seed = 0;
  bool vanilla = false;
  DataConfig data;
  ModelConfig model;
  OptimConfig optim;

  TaskKind task_kind() const { return task_from_string(task); }

  // Task-dependent defaults resolved at parse time when left empty.
  std::string effective_value_mode() const {
    if (!model.value_mode.empty()) return model.value_mode;
    return task_kind() == TaskKind::classification ? "soft_label" : "raw";
  }
  std::string effective_value_init() const {
    if (!model.value_init.empty()) return model.value_init;
    return task_kind() == TaskKind::classification ? "gaussian" : "uniform_label_range";
  }
  char delimiter_char() const {
    return data.delimiter == "tab" ? '\t' : data.delimiter[0];
  }
};

namespace detail {

using nlohmann::json;

inline void cfg_reject_unknown(const json& j, std::initializer_list<const char*> allowed,
                               const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) known = true;
    if (!known)
      throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
inline void cfg_get(const json& j, const char* key, T& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;  // keep the documented default
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value for '" + where + "." + key + "'");
  }
}

inline void cfg_get_uint(const json& j, const char* key, std::size_t& out,
                         const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_number_integer() || it->get<long long>() < 0)
    throw ConfigError("config: '" + where + "." + key + "' must be a nonnegative integer");
  out = std::size_t(it->get<long long>());
}

inline void cfg_get_uints(const json& j, const char* key, std::vector<std::size_t>& out,
                          const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_array())
    throw ConfigError("config: '" + where + "." + key + "' must be an array of integers");
  out.clear();
  for (const auto& v : *it) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw ConfigError("config: '" + where + "." + key + "' must hold nonnegative integers");
    out.push_back(std::size_t(v.get<long long>()));
  }
}

}  // namespace detail

inline RunConfig parse_config(const std::string& text) {
  using detail::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  detail::cfg_reject_unknown(j, {"task", "seed", "vanilla", "data", "model", "optim"}, "top level");

  RunConfig c;
  detail::cfg_get(j, "task", c.task, "top level");
  task_from_string(c.task);  // validates
  if (auto it = j.find("seed"); it != j.end()) {
    if (!it->is_number_integer() || it->get<long long>() < 0)
      throw ConfigError("config: 'seed' must be a nonnegative integer");
    c.seed = std::uint64_t(it->get<long long>());
  }
  detail::cfg_get(j, "vanilla", c.vanilla, "top level");

  if (auto it = j.find("data"); it != j.end()) {
    const json& d = *it;
    detail::cfg_reject_unknown(d,
                               {"source", "n_per_class", "noise_std", "turns", "path",
                                "label_columns", "delimiter", "detect_header", "normalize",
                                "val_fraction", "test_fraction", "folds"},
                               "data");
    detail::cfg_get(d, "source", c.data.source, "data");
    detail::cfg_get_uint(d, "n_per_class", c.data.n_per_class, "data");
    detail::cfg_get(d, "noise_std", c.data.noise_std, "data");
    detail::cfg_get(d, "turns", c.data.turns, "data");
    detail::cfg_get(d, "path", c.data.path, "data");
    detail::cfg_get_uints(d, "label_columns", c.data.label_columns, "data");
    detail::cfg_get(d, "delimiter", c.data.delimiter, "data");
    detail::cfg_get(d, "detect_header", c.data.detect_header, "data");
    detail::cfg_get(d, "normalize", c.data.normalize, "data");
    detail::cfg_get(d, "val_fraction", c.data.val_fraction, "data");
    detail::cfg_get(d, "test_fraction", c.data.test_fraction, "data");
    detail::cfg_get_uint(d, "folds", c.data.folds, "data");
  }

  if (auto it = j.find("model"); it != j.end()) {
    const json& m = *it;
    detail::cfg_reject_unknown(m,
                               {"extractor", "head_hidden", "output", "tau_init", "dict_size",
                                "gamma", "metric", "value_mode", "value_init", "inner_steps",
                                "alpha_mode", "alpha_init", "lambda"},
                               "model");
    detail::cfg_get_uints(m, "extractor", c.model.extractor, "model");
    detail::cfg_get_uints(m, "head_hidden", c.model.head_hidden, "model");
    detail::cfg_get(m, "output", c.model.output, "model");
    detail::cfg_get(m, "tau_init", c.model.tau_init, "model");
    detail::cfg_get_uint(m, "dict_size", c.model.dict_size, "model");
    detail::cfg_get(m, "gamma", c.model.gamma, "model");
    detail::cfg_get(m, "metric", c.model.metric, "model");
    detail::cfg_get(m, "value_mode", c.model.value_mode, "model");
    detail::cfg_get(m, "value_init", c.model.value_init, "model");
    detail::cfg_get_uint(m, "inner_steps", c.model.inner_steps, "model");
    detail::cfg_get(m, "alpha_mode", c.model.alpha_mode, "model");
    detail::cfg_get(m, "alpha_init", c.model.alpha_init, "model");
    detail::cfg_get(m, "lambda", c.model.lambda, "model");
  }

  if (auto it = j.find("optim"); it != j.end()) {
    const json& o = *it;
    detail::cfg_reject_unknown(o,
                               {"kind", "lr", "weight_decay", "momentum", "epochs", "batch_size",
                                "lr_drop_epoch", "early_stop_patience", "decay_dict_values",
                                "decay_alpha"},
                               "optim");
    detail::cfg_get(o, "kind", c.optim.kind, "optim");
    detail::cfg_get(o, "lr", c.optim.lr, "optim");
    detail::cfg_get(o, "weight_decay", c.optim.weight_decay, "optim");
    detail::cfg_get(o, "momentum", c.optim.momentum, "optim");
    detail::cfg_get_uint(o, "epochs", c.optim.epochs, "optim");
    detail::cfg_get_uint(o, "batch_size", c.optim.batch_size, "optim");
    detail::cfg_get_uint(o, "lr_drop_epoch", c.optim.lr_drop_epoch, "optim");
    detail::cfg_get_uint(o, "early_stop_patience", c.optim.early_stop_patience, "optim");
    detail::cfg_get(o, "decay_dict_values", c.optim.decay_dict_values, "optim");
    detail::cfg_get(o, "decay_alpha", c.optim.decay_alpha, "optim");
  }

  // field-level validation, before any data is read
  auto bad = [](const std::string& what) { return ConfigError("config: " + what); };
  if (c.data.source != "spirals" && c.data.source != "file")
    throw bad("data.source must be 'spirals' or 'file', got '" + c.data.source + "'");
  if (c.data.source == "spirals" && c.data.n_per_class < 1)
    throw bad("data.n_per_class must be at least 1");
  if (c.data.source == "spirals" && c.data.noise_std < 0.0)
    throw bad("data.noise_std must be nonnegative");
  if (c.data.source == "file") {
    if (c.data.path.empty()) throw bad("data.path is required when data.source is 'file'");
    if (c.data.label_columns.empty())
      throw bad("data.label_columns is required when data.source is 'file'");
  }
  if (c.data.delimiter != "tab" && c.data.delimiter.size() != 1)
    throw bad("data.delimiter must be one character or 'tab'");
  if (!(c.data.val_fraction > 0.0 && c.data.val_fraction < 1.0))
    throw bad("data.val_fraction must be in (0, 1)");
  if (!(c.data.test_fraction > 0.0 && c.data.test_fraction < 1.0))
    throw bad("data.test_fraction must be in (0, 1)");
  if (c.data.folds == 1) throw bad("data.folds must be 0 (single split) or at least 2");

  if (c.model.output != "dot" && c.model.output != "cosine")
    throw bad("model.output must be 'dot' or 'cosine', got '" + c.model.output + "'");
  if (c.model.tau_init <= 0.0) throw bad("model.tau_init must be positive");
  if (c.model.dict_size < 1) throw bad("model.dict_size must be at least 1");
  if (c.model.gamma <= 0.0) throw bad("model.gamma must be positive");
  metric_from_string(c.model.metric);  // validates
  if (!c.model.value_mode.empty() && c.model.value_mode != "soft_label" &&
      c.model.value_mode != "raw")
    throw bad("model.value_mode must be 'soft_label' or 'raw'");
  if (!c.model.value_init.empty() && c.model.value_init != "gaussian" &&
      c.model.value_init != "uniform_label_range")
    throw bad("model.value_init must be 'gaussian' or 'uniform_label_range'");
  if (c.effective_value_init() == "uniform_label_range" &&
      c.task_kind() == TaskKind::classification)
    throw bad("model.value_init 'uniform_label_range' needs a regression task");
  if (c.model.inner_steps < 1) throw bad("model.inner_steps must be at least 1");
  if (c.model.alpha_mode != "scalar" && c.model.alpha_mode != "diagonal")
    throw bad("model.alpha_mode must be 'scalar' or 'diagonal'");
  if (c.model.lambda < 0.0) throw bad("model.lambda must be nonnegative");
  for (std::size_t w : c.model.extractor)
    if (w == 0) throw bad("model.extractor layer widths must be positive");
  if (c.model.extractor.size() == 1)
    throw bad("model.extractor needs at least two dims (input, output) or none");
  for (std::size_t w : c.model.head_hidden)
    if (w == 0) throw bad("model.head_hidden widths must be positive");

  if (c.optim.kind != "adamw" && c.optim.kind != "sgd")
    throw bad("optim.kind must be 'adamw' or 'sgd', got '" + c.optim.kind + "'");
  if (c.optim.lr <= 0.0) throw bad("optim.lr must be positive");
  if (c.optim.weight_decay < 0.0) throw bad("optim.weight_decay must be nonnegative");
  if (c.optim.momentum < 0.0 || c.optim.momentum >= 1.0)
    throw bad("optim.momentum must be in [0, 1)");
  if (c.optim.batch_size < 1) throw bad("optim.batch_size must be at least 1");
  return c;
}

// Canonical echo with every field explicit; parse_config(config_to_json(c))
// reproduces c.
inline nlohmann::json config_to_json(const RunConfig& c) {
  using nlohmann::json;
  json j;
  j["task"] = c.task;
  j["seed"] = c.seed;
  j["vanilla"] = c.vanilla;
  j["data"] = json{{"source", c.data.source},
                   {"n_per_class", c.data.n_per_class},
                   {"noise_std", c.data.noise_std},
                   {"turns", c.data.turns},
                   {"path", c.data.path},
                   {"label_columns", c.data.label_columns},
                   {"delimiter", c.data.delimiter},
                   {"detect_header", c.data.detect_header},
                   {"normalize", c.data.normalize},
                   {"val_fraction", c.data.val_fraction},
                   {"test_fraction", c.data.test_fraction},
                   {"folds", c.data.folds}};
  j["model"] = json{{"extractor", c.model.extractor},
                    {"head_hidden", c.model.head_hidden},
                    {"output", c.model.output},
                    {"tau_init", c.model.tau_init},
                    {"dict_size", c.model.dict_size},
                    {"gamma", c.model.gamma},
                    {"metric", c.model.metric},
                    {"value_mode", c.effective_value_mode()},
                    {"value_init", c.effective_value_init()},
                    {"inner_steps", c.model.inner_steps},
                    {"alpha_mode", c.model.alpha_mode},
                    {"alpha_init", c.model.alpha_init},
                    {"lambda", c.model.lambda}};
  j["optim"] = json{{"kind", c.optim.kind},
                    {"lr", c.optim.lr},
                    {"weight_decay", c.optim.weight_decay},
                    {"momentum", c.optim.momentum},
                    {"epochs", c.optim.epochs},
                    {"batch_size", c.optim.batch_size},
                    {"lr_drop_epoch", c.optim.lr_drop_epoch},
                    {"early_stop_patience", c.optim.early_stop_patience},
                    {"decay_dict_values", c.optim.decay_dict_values},
                    {"decay_alpha", c.optim.decay_alpha}};
  return j;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

}  // namespace metanb
