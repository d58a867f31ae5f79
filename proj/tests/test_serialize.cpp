#include "metanb/serialize.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>
#include <string>

#include "metanb/meta.hpp"
#include "oracle.hpp"

using namespace metanb;

namespace {

MetaModel sample_classifier() {
  MetaModel m;
  m.task = TaskKind::classification;
  m.theta = MLPParams::create({2, 5, 3}, /*final_relu=*/false, 1);
  m.phi = Head::create({3, 4, 3}, Head::Output::cosine, 2);
  m.xi = Head::create({3, 4, 3}, Head::Output::cosine, 3);
  m.dict = init_dictionary(6, 3, 3, 4, Metric::cosine, 5.0);
  m.alpha = InnerLearningRate::diagonal(m.phi.params(), 0.1);
  m.lambda = 1.0;
  m.inner_steps = 2;
  return m;
}

MetaModel sample_regressor() {
  MetaModel m;
  m.task = TaskKind::regression;
  m.theta = MLPParams::create({4}, false, 0);
  m.phi = Head::create({4, 8, 2}, Head::Output::dot, 5);
  m.dict = init_dictionary(10, 4, 2, 6, Metric::euclidean, 10.0, ValueMode::raw);
  m.alpha = InnerLearningRate::scalar(0.1);
  return m;
}

struct TempPath {
  std::string path;
  explicit TempPath(const std::string& name) : path("/tmp/metanb_test_" + name) {}
  ~TempPath() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("model artifact: save -> load -> save is byte-stable") {
  for (bool regression : {false, true}) {
    CAPTURE(regression);
    MetaModel m = regression ? sample_regressor() : sample_classifier();
    std::string first = model_to_string(m);
    MetaModel loaded = model_from_string(first);
    std::string second = model_to_string(loaded);
    CHECK(first == second);
  }
}

TEST_CASE("loaded model predicts identically and is still trainable") {
  MetaModel m = sample_regressor();
  std::vector<double> x{0.3, -1.2, 0.7, 2.0, -0.4, 0.1, 1.1, -0.9};
  Tensor inputs = Tensor::from_data({2, 4}, x);
  Tensor before = predict(m, inputs);

  MetaModel loaded = model_from_string(model_to_string(m));
  Tensor after = predict(loaded, inputs);
  CHECK(before.data() == after.data());

  // gradients still flow into the reloaded leaves
  Tensor targets = Tensor::from_data({2, 2}, {0.1, 0.2, 0.3, 0.4});
  TaskBatch batch{inputs, targets};
  std::vector<Tensor> phi = loaded.phi.params();
  std::vector<Tensor> g = gradient(outer_loss(loaded, batch), phi);
  double total = 0.0;
  for (const auto& t : g)
    for (double v : t.data()) total += std::abs(v);
  CHECK(total > 0.0);
}

TEST_CASE("artifact files: atomic write, no stray temp file, load from disk") {
  TempPath p("model.json");
  MetaModel m = sample_classifier();
  save_model(m, p.path);

  std::ifstream tmp(p.path + ".tmp");
  CHECK(!tmp.good());

  MetaModel loaded = load_model(p.path);
  CHECK(model_to_string(loaded) == model_to_string(m));

  CHECK_THROWS_AS(load_model("/tmp/metanb_no_such_file.json"), ArtifactError);
}

TEST_CASE("artifact rejects structural damage with specific messages") {
  MetaModel m = sample_regressor();
  std::string good = model_to_string(m);

  SECTION("not JSON at all") {
    CHECK_THROWS_AS(model_from_string("not json {"), ArtifactError);
  }
  SECTION("future format version") {
    auto j = nlohmann::json::parse(good);
    j["format_version"] = 99;
    CHECK_THROWS_WITH(model_from_string(j.dump()),
                      Catch::Matchers::ContainsSubstring("format_version 99"));
  }
  SECTION("wrong kind") {
    auto j = nlohmann::json::parse(good);
    j["kind"] = "metanb-metrics";
    CHECK_THROWS_AS(model_from_string(j.dump()), ArtifactError);
  }
  SECTION("unknown top-level key") {
    auto j = nlohmann::json::parse(good);
    j["extra"] = 1;
    CHECK_THROWS_WITH(model_from_string(j.dump()),
                      Catch::Matchers::ContainsSubstring("unknown key 'extra'"));
  }
  SECTION("tensor data/shape mismatch") {
    auto j = nlohmann::json::parse(good);
    j["dict"]["keys"]["data"].push_back(0.5);
    CHECK_THROWS_AS(model_from_string(j.dump()), ArtifactError);
  }
  SECTION("dictionary width disagrees with the head") {
    auto j = nlohmann::json::parse(good);
    j["dict"]["keys"]["shape"] = {10, 3};
    j["dict"]["keys"]["data"] = std::vector<double>(30, 0.1);
    CHECK_THROWS_WITH(model_from_string(j.dump()),
                      Catch::Matchers::ContainsSubstring("key width"));
  }
  SECTION("diagonal alpha with wrong tensor count") {
    MetaModel c = sample_classifier();
    auto j = nlohmann::json::parse(model_to_string(c));
    j["alpha"]["values"].erase(0);
    CHECK_THROWS_AS(model_from_string(j.dump()), ArtifactError);
  }
  SECTION("missing required key") {
    auto j = nlohmann::json::parse(good);
    j.erase("dict");
    CHECK_THROWS_WITH(model_from_string(j.dump()),
                      Catch::Matchers::ContainsSubstring("missing key 'dict'"));
  }
}

TEST_CASE("saving a model with non-finite parameters is refused") {
  MetaModel m = sample_regressor();
  std::vector<double> k = m.dict.keys.data();
  k[0] = std::numeric_limits<double>::infinity();
  m.dict.keys.set_data(k);
  CHECK_THROWS_AS(model_to_string(m), NumericError);
}
