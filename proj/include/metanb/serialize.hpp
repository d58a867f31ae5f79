#pragma once

// Model artifact: one JSON file holding every parameter group, the
// dictionary, and the hyperparameters that affect inference. The writer is
// canonical (sorted keys, shortest round-trip doubles), so save -> load ->
// save reproduces the file byte for byte; tests rely on that to prove
// evaluation never mutates a model.

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "metanb/common.hpp"
#include "metanb/dictionary.hpp"
#include "metanb/estimator.hpp"
#include "metanb/meta.hpp"
#include "metanb/tensor.hpp"

namespace metanb {

struct ArtifactError : std::runtime_error {
  explicit ArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

constexpr int kModelFormatVersion = 1;

namespace detail {

using nlohmann::json;

// Write-then-rename so readers never observe a half-written file.
inline void write_atomic(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    out << content;
    if (!out.flush()) throw std::runtime_error("write to '" + tmp + "' failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw std::runtime_error("cannot rename '" + tmp + "' to '" + path + "'");
  }
}

inline json tensor_to_json(const Tensor& t, const std::string& what) {
  for (double v : t.data())
    if (!std::isfinite(v))
      throw NumericError("save_model: non-finite value in " + what);
  return json{{"shape", t.shape()}, {"data", t.data()}};
}

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  if (!j.is_object()) throw ArtifactError("artifact: " + where + " is not an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) known = true;
    if (!known) throw ArtifactError("artifact: unknown key '" + it.key() + "' in " + where);
  }
}

inline const json& need(const json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw ArtifactError("artifact: missing key '" + std::string(key) + "' in " + where);
  return *it;
}

inline Tensor tensor_from_json(const json& j, const std::string& where, bool trainable) {
  if (!j.is_object()) throw ArtifactError("artifact: " + where + " is not a tensor object");
  reject_unknown_keys(j, {"shape", "data"}, where);
  Shape shape = need(j, "shape", where).get<Shape>();
  std::vector<double> data = need(j, "data", where).get<std::vector<double>>();
  if (data.size() != shape_numel(shape))
    throw ArtifactError("artifact: " + where + " has " + std::to_string(data.size()) +
                        " values for shape " + shape_str(shape));
  for (double v : data)
    if (!std::isfinite(v)) throw ArtifactError("artifact: non-finite value in " + where);
  return trainable ? Tensor::param(shape, std::move(data))
                   : Tensor::from_data(shape, std::move(data));
}

inline json mlp_to_json(const MLPParams& m) {
  json layers = json::array();
  for (std::size_t l = 0; l < m.layer_count(); ++l)
    layers.push_back(json{{"w", tensor_to_json(m.weights[l], "mlp weight")},
                          {"b", tensor_to_json(m.biases[l], "mlp bias")}});
  return json{{"final_relu", m.final_relu}, {"layers", layers}};
}

inline MLPParams mlp_from_json(const json& j, const std::string& where) {
  reject_unknown_keys(j, {"final_relu", "layers"}, where);
  MLPParams m;
  m.final_relu = need(j, "final_relu", where).get<bool>();
  const json& layers = need(j, "layers", where);
  if (!layers.is_array()) throw ArtifactError("artifact: " + where + ".layers is not an array");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const json& layer = layers[l];
    std::string lw = where + ".layers[" + std::to_string(l) + "]";
    reject_unknown_keys(layer, {"w", "b"}, lw);
    Tensor w = tensor_from_json(need(layer, "w", lw), lw + ".w", true);
    Tensor b = tensor_from_json(need(layer, "b", lw), lw + ".b", true);
    if (w.rank() != 2 || b.rank() != 1 || b.numel() != w.rows())
      throw ArtifactError("artifact: inconsistent layer shapes in " + lw);
    if (l > 0 && w.cols() != m.weights.back().rows())
      throw ArtifactError("artifact: layer width mismatch in " + lw);
    m.weights.push_back(w);
    m.biases.push_back(b);
  }
  return m;
}

inline json head_to_json(const Head& h) {
  json j{{"mlp", mlp_to_json(h.mlp)}};
  if (h.output == Head::Output::dot) {
    j["output"] = "dot";
    j["w"] = tensor_to_json(h.dot.w, "dot head weight");
    j["b"] = tensor_to_json(h.dot.b, "dot head bias");
  } else {
    j["output"] = "cosine";
    j["w"] = tensor_to_json(h.cosine.w, "cosine head weight");
    j["tau"] = tensor_to_json(h.cosine.tau, "cosine head tau");
  }
  return j;
}

inline Head head_from_json(const json& j, const std::string& where) {
  std::string kind = need(j, "output", where).get<std::string>();
  Head h;
  h.mlp = mlp_from_json(need(j, "mlp", where), where + ".mlp");
  if (kind == "dot") {
    reject_unknown_keys(j, {"output", "mlp", "w", "b"}, where);
    h.output = Head::Output::dot;
    h.dot.w = tensor_from_json(need(j, "w", where), where + ".w", true);
    h.dot.b = tensor_from_json(need(j, "b", where), where + ".b", true);
    if (h.dot.w.rank() != 2 || h.dot.b.rank() != 1 || h.dot.b.numel() != h.dot.w.rows())
      throw ArtifactError("artifact: inconsistent dot head shapes in " + where);
  } else if (kind == "cosine") {
    reject_unknown_keys(j, {"output", "mlp", "w", "tau"}, where);
    h.output = Head::Output::cosine;
    h.cosine.w = tensor_from_json(need(j, "w", where), where + ".w", true);
    h.cosine.tau = tensor_from_json(need(j, "tau", where), where + ".tau", true);
    if (h.cosine.w.rank() != 2 || h.cosine.tau.numel() != 1)
      throw ArtifactError("artifact: inconsistent cosine head shapes in " + where);
  } else {
    throw ArtifactError("artifact: unknown head output '" + kind + "' in " + where);
  }
  if (h.mlp.layer_count() > 0) {
    std::size_t w_in = h.output == Head::Output::dot ? h.dot.w.cols() : h.cosine.w.cols();
    if (h.mlp.out_dim() != w_in)
      throw ArtifactError("artifact: head trunk/output width mismatch in " + where);
  }
  return h;
}

}  // namespace detail

inline std::string model_to_string(const MetaModel& m) {
  using detail::json;
  json j;
  j["format_version"] = kModelFormatVersion;
  j["kind"] = "metanb-model";
  j["task"] = to_string(m.task);
  j["lambda"] = m.lambda;
  j["inner_steps"] = m.inner_steps;
  j["theta"] = detail::mlp_to_json(m.theta);
  j["phi"] = detail::head_to_json(m.phi);
  j["xi"] = m.xi ? detail::head_to_json(*m.xi) : json(nullptr);
  j["dict"] = json{{"metric", to_string(m.dict.metric)},
                   {"gamma", m.dict.gamma},
                   {"value_mode", to_string(m.dict.value_mode)},
                   {"keys", detail::tensor_to_json(m.dict.keys, "dictionary keys")},
                   {"values", detail::tensor_to_json(m.dict.values, "dictionary values")}};
  json alphas = json::array();
  for (const auto& t : m.alpha.values) alphas.push_back(detail::tensor_to_json(t, "alpha"));
  j["alpha"] = json{
      {"mode", m.alpha.mode == InnerLearningRate::Mode::scalar ? "scalar" : "diagonal"},
      {"values", alphas}};
  return j.dump(2) + "\n";
}

inline MetaModel model_from_string(const std::string& text) {
  using detail::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ArtifactError(std::string("artifact: not valid JSON: ") + e.what());
  }
  detail::reject_unknown_keys(j, {"format_version", "kind", "task", "lambda", "inner_steps",
                                  "theta", "phi", "xi", "dict", "alpha"},
                              "model");
  int version = detail::need(j, "format_version", "model").get<int>();
  if (version != kModelFormatVersion)
    throw ArtifactError("artifact: unsupported format_version " + std::to_string(version) +
                        " (this build reads " + std::to_string(kModelFormatVersion) + ")");
  if (detail::need(j, "kind", "model").get<std::string>() != "metanb-model")
    throw ArtifactError("artifact: not a model file (kind mismatch)");

  MetaModel m;
  m.task = task_from_string(detail::need(j, "task", "model").get<std::string>());
  m.lambda = detail::need(j, "lambda", "model").get<double>();
  m.inner_steps = detail::need(j, "inner_steps", "model").get<std::size_t>();
  m.theta = detail::mlp_from_json(detail::need(j, "theta", "model"), "theta");
  m.phi = detail::head_from_json(detail::need(j, "phi", "model"), "phi");
  const json& xi = detail::need(j, "xi", "model");
  if (!xi.is_null()) m.xi = detail::head_from_json(xi, "xi");

  const json& dj = detail::need(j, "dict", "model");
  detail::reject_unknown_keys(dj, {"metric", "gamma", "value_mode", "keys", "values"}, "dict");
  m.dict.metric = metric_from_string(detail::need(dj, "metric", "dict").get<std::string>());
  m.dict.gamma = detail::need(dj, "gamma", "dict").get<double>();
  if (m.dict.gamma <= 0.0) throw ArtifactError("artifact: dict.gamma must be positive");
  m.dict.value_mode =
      value_mode_from_string(detail::need(dj, "value_mode", "dict").get<std::string>());
  m.dict.keys = detail::tensor_from_json(detail::need(dj, "keys", "dict"), "dict.keys", true);
  m.dict.values =
      detail::tensor_from_json(detail::need(dj, "values", "dict"), "dict.values", true);
  if (m.dict.keys.rank() != 2 || m.dict.values.rank() != 2 ||
      m.dict.keys.rows() != m.dict.values.rows())
    throw ArtifactError("artifact: dictionary keys and values disagree on entry count");

  const json& aj = detail::need(j, "alpha", "model");
  detail::reject_unknown_keys(aj, {"mode", "values"}, "alpha");
  std::string mode = detail::need(aj, "mode", "alpha").get<std::string>();
  const json& av = detail::need(aj, "values", "alpha");
  if (!av.is_array() || av.empty())
    throw ArtifactError("artifact: alpha.values must be a nonempty array");
  m.alpha.values.clear();
  for (std::size_t i = 0; i < av.size(); ++i)
    m.alpha.values.push_back(
        detail::tensor_from_json(av[i], "alpha.values[" + std::to_string(i) + "]", true));
  if (mode == "scalar") {
    m.alpha.mode = InnerLearningRate::Mode::scalar;
    if (m.alpha.values.size() != 1 || m.alpha.values[0].numel() != 1)
      throw ArtifactError("artifact: scalar alpha must be a single one-element tensor");
  } else if (mode == "diagonal") {
    m.alpha.mode = InnerLearningRate::Mode::diagonal;
    auto phi_params = m.phi.params();
    if (m.alpha.values.size() != phi_params.size())
      throw ArtifactError("artifact: diagonal alpha count does not match head parameters");
    for (std::size_t t = 0; t < phi_params.size(); ++t)
      if (m.alpha.values[t].shape() != phi_params[t].shape())
        throw ArtifactError("artifact: diagonal alpha shape mismatch at tensor " +
                            std::to_string(t));
  } else {
    throw ArtifactError("artifact: unknown alpha mode '" + mode + "'");
  }

  // cross-checks that make a loaded model actually runnable
  std::size_t n_z = m.phi.mlp.layer_count() > 0
                        ? m.phi.mlp.in_dim()
                        : (m.phi.output == Head::Output::dot ? m.phi.dot.w.cols()
                                                             : m.phi.cosine.w.cols());
  if (m.dict.key_dim() != n_z)
    throw ArtifactError("artifact: dictionary key width " + std::to_string(m.dict.key_dim()) +
                        " does not match head input width " + std::to_string(n_z));
  if (m.theta.layer_count() > 0 && m.theta.out_dim() != n_z)
    throw ArtifactError("artifact: extractor output width does not match head input width");
  return m;
}

inline void save_model(const MetaModel& m, const std::string& path) {
  detail::write_atomic(path, model_to_string(m));
}

inline MetaModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("artifact: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return model_from_string(buf.str());
}

}  // namespace metanb
