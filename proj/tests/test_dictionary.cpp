#include "metanb/dictionary.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "metanb/tensor.hpp"
#include "oracle.hpp"

using namespace metanb;

TEST_CASE("init_dictionary shapes, determinism, and moments") {
  auto d = init_dictionary(5000, 64, 10, /*seed=*/0);
  CHECK(d.keys.shape() == Shape{5000, 64});
  CHECK(d.values.shape() == Shape{5000, 10});

  auto d2 = init_dictionary(5000, 64, 10, 0);
  CHECK(d.keys.data() == d2.keys.data());
  CHECK(d.values.data() == d2.values.data());
  auto d3 = init_dictionary(5000, 64, 10, 1);
  CHECK(d.keys.data() != d3.keys.data());

  // ~1.3M draws: sample mean within 0 +- 0.001, sample std within 0.1 +- 0.001
  auto big = init_dictionary(10000, 100, 30, 7);
  double n = 0, s = 0, ss = 0;
  for (const Tensor* t : {&big.keys, &big.values})
    for (double x : t->data()) {
      n += 1;
      s += x;
      ss += x * x;
    }
  double mean = s / n;
  double stddev = std::sqrt(ss / n - mean * mean);
  CHECK(std::abs(mean) < 0.001);
  CHECK(std::abs(stddev - 0.1) < 0.001);

  CHECK_THROWS_AS(init_dictionary(0, 2, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(init_dictionary(2, 2, 2, 0, Metric::cosine, 0.0), std::invalid_argument);
}

TEST_CASE("uniform value reinit covers the requested range") {
  auto d = init_dictionary(1000, 2, 1, 3, Metric::euclidean, 10.0, ValueMode::raw);
  reinit_values_uniform(d, -2.0, 5.0, 11);
  double lo = 1e9, hi = -1e9;
  for (double v : d.values.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo >= -2.0);
  CHECK(hi <= 5.0);
  CHECK(lo < -1.8);  // actually spreads over the range
  CHECK(hi > 4.8);
}

TEST_CASE("attend: two-entry euclidean hand value") {
  // distances 1 and 2 at gamma=1: weights [e^-1, e^-2] normalized
  NeighborDictionary d;
  d.keys = Tensor::param({2, 1}, {1.0, -2.0});
  d.values = Tensor::param({2, 1}, {0.0, 0.0});
  d.metric = Metric::euclidean;
  d.gamma = 1.0;
  Tensor w = attend(Tensor::from_data({1}, {0.0}), d);
  CHECK(w.at(0) == Catch::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(w.at(1) == Catch::Approx(0.2689414213699951).epsilon(1e-12));
}

TEST_CASE("attend: identical keys give uniform weights") {
  NeighborDictionary d;
  d.keys = Tensor::param({4, 2}, {1, 2, 1, 2, 1, 2, 1, 2});
  d.values = Tensor::param({4, 1}, {0, 0, 0, 0});
  d.metric = Metric::euclidean;
  d.gamma = 3.0;
  Tensor w = attend(Tensor::from_data({2}, {0.5, -0.5}), d);
  for (std::size_t j = 0; j < 4; ++j) CHECK(w.at(j) == Catch::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("attend: large gamma concentrates on the matching key") {
  NeighborDictionary d;
  d.keys = Tensor::param({3, 2}, {1, 0, -1, 5, 4, -3});
  d.values = Tensor::param({3, 1}, {0, 0, 0});
  d.metric = Metric::euclidean;
  d.gamma = 100.0;
  Tensor w = attend(Tensor::from_data({2}, {1.0, 0.0}), d);
  CHECK(w.at(0) > 0.999);
}

TEST_CASE("attend: weights are a distribution and permute with entries") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  std::size_t S = 50, m = 4;
  std::vector<double> keys(S * m);
  for (auto& x : keys) x = g(rng);
  std::vector<double> q(m);
  for (auto& x : q) x = g(rng);

  for (Metric metric : {Metric::euclidean, Metric::cosine}) {
    NeighborDictionary d;
    d.keys = Tensor::param({S, m}, keys);
    d.values = Tensor::param({S, 1}, std::vector<double>(S, 0.0));
    d.metric = metric;
    d.gamma = 2.0;
    Tensor w = attend(Tensor::from_data({m}, q), d);

    double total = 0.0;
    for (std::size_t j = 0; j < S; ++j) {
      CHECK(w.at(j) >= 0.0);
      CHECK(w.at(j) <= 1.0);
      total += w.at(j);
    }
    CHECK(std::abs(total - 1.0) < 1e-9);

    // reversed entry order reverses the weights
    std::vector<double> rev(S * m);
    for (std::size_t j = 0; j < S; ++j)
      std::copy_n(keys.begin() + (S - 1 - j) * m, m, rev.begin() + j * m);
    NeighborDictionary dr = d;
    dr.keys = Tensor::param({S, m}, rev);
    Tensor wr = attend(Tensor::from_data({m}, q), dr);
    for (std::size_t j = 0; j < S; ++j)
      CHECK(w.at(j) == Catch::Approx(wr.at(S - 1 - j)).epsilon(1e-12));
  }
}

TEST_CASE("attend: cosine weights ignore positive rescaling") {
  NeighborDictionary d;
  d.keys = Tensor::param({3, 2}, {1, 0.5, -0.5, 1, 2, -1});
  d.values = Tensor::param({3, 1}, {0, 0, 0});
  d.metric = Metric::cosine;
  d.gamma = 4.0;
  Tensor w1 = attend(Tensor::from_data({2}, {0.3, 0.7}), d);
  Tensor w2 = attend(Tensor::from_data({2}, {3.0, 7.0}), d);  // query x10
  NeighborDictionary ds = d;
  ds.keys = Tensor::param({3, 2}, {5, 2.5, -0.5, 1, 2, -1});  // key 0 x5
  Tensor w3 = attend(Tensor::from_data({2}, {0.3, 0.7}), ds);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(w1.at(j) == Catch::Approx(w2.at(j)).epsilon(1e-12));
    CHECK(w1.at(j) == Catch::Approx(w3.at(j)).epsilon(1e-12));
  }
}

TEST_CASE("attend: increasing gamma never decreases the max weight") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> keys(20 * 3), q(3);
  for (auto& x : keys) x = g(rng);
  for (auto& x : q) x = g(rng);
  for (Metric metric : {Metric::euclidean, Metric::cosine}) {
    double prev_max = -1.0;
    for (double gamma : {0.1, 0.5, 1.0, 2.0, 5.0, 20.0, 80.0}) {
      NeighborDictionary d;
      d.keys = Tensor::param({20, 3}, keys);
      d.values = Tensor::param({20, 1}, std::vector<double>(20, 0.0));
      d.metric = metric;
      d.gamma = gamma;
      Tensor w = attend(Tensor::from_data({3}, q), d);
      double mx = *std::max_element(w.data().begin(), w.data().end());
      CHECK(mx >= prev_max - 1e-12);
      prev_max = mx;
    }
  }
}

TEST_CASE("attend: cosine metric rejects zero norms") {
  NeighborDictionary d;
  d.keys = Tensor::param({2, 2}, {1, 0, 0, 1});
  d.values = Tensor::param({2, 1}, {0, 0});
  d.metric = Metric::cosine;
  CHECK_THROWS_AS(attend(Tensor::from_data({2}, {0.0, 0.0}), d), NumericError);
  d.keys = Tensor::param({2, 2}, {1, 0, 0, 0});
  CHECK_THROWS_AS(attend(Tensor::from_data({2}, {1.0, 1.0}), d), NumericError);
}

TEST_CASE("attend: dimension mismatch is a shape error") {
  auto d = init_dictionary(3, 4, 2, 0);
  CHECK_THROWS_AS(attend(Tensor::from_data({3}, {1, 2, 3}), d), ShapeError);
}

TEST_CASE("attention weights are differentiable in queries and keys") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> kv(6 * 3), qv(2 * 3);
  for (auto& x : kv) x = g(rng);
  for (auto& x : qv) x = g(rng);
  Tensor keys = Tensor::param({6, 3}, kv);
  Tensor queries = Tensor::param({2, 3}, qv);

  for (Metric metric : {Metric::euclidean, Metric::cosine}) {
    auto build = [&] {
      Tensor w = attention_weights(queries, keys, metric, 1.7);
      // scalar probe mixing all weights unevenly
      Tensor mix = Tensor::from_data({6, 1}, {1, -2, 3, -4, 5, -6});
      return sum(mul(matmul(w, mix), Tensor::from_data({2, 1}, {1.0, 0.5})));
    };
    Tensor loss = build();
    auto analytic = gradient(loss, {queries, keys});
    auto numeric = testutil::fd_gradient([&] { return build().item(); }, {queries, keys});
    auto r = testutil::compare_grads(analytic, numeric, 1e-6, 1e-8);
    INFO(to_string(metric) << ": " << r.detail);
    CHECK(r.ok);
  }
}

TEST_CASE("soft-label values form probability rows") {
  auto d = init_dictionary(40, 3, 5, 13);
  Tensor v = d.effective_values();
  for (std::size_t i = 0; i < 40; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(v.at(i, c) >= 0.0);
      s += v.at(i, c);
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  // raw mode passes through
  auto dr = init_dictionary(4, 3, 2, 13, Metric::euclidean, 1.0, ValueMode::raw);
  CHECK(dr.effective_values().data() == dr.values.data());
}

TEST_CASE("nearest_dataset_points") {
  NeighborDictionary d;
  d.keys = Tensor::param({2, 2}, {1.0, 0.0, 0.0, 1.0});
  d.values = Tensor::param({2, 1}, {0, 0});

  SECTION("a dataset row equal to the key ranks first") {
    Tensor data = Tensor::from_data({3, 2}, {0.5, 0.5, 1.0, 0.0, -1.0, 0.2});
    auto idx = nearest_dataset_points(d, 0, data, 3);
    CHECK(idx[0] == 1);
    CHECK(idx.size() == 3);
  }
  SECTION("k = N returns a permutation") {
    Tensor data = Tensor::from_data({4, 2}, {0.5, 0.5, 1.0, 0.0, -1.0, 0.2, 0.3, -0.9});
    auto idx = nearest_dataset_points(d, 1, data, 4);
    std::vector<std::size_t> sorted = idx;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3});
  }
  SECTION("hand-computed ordering with a tie") {
    // key (1,0): cos sims: row0 = 1/sqrt(2), row1 = 1/sqrt(2) (tie -> lower
    // index first), row2 = 0
    Tensor data = Tensor::from_data({3, 2}, {1.0, 1.0, 1.0, -1.0, 0.0, 1.0});
    auto idx = nearest_dataset_points(d, 0, data, 3);
    CHECK(idx == std::vector<std::size_t>{0, 1, 2});
  }
  SECTION("errors") {
    Tensor data = Tensor::from_data({2, 2}, {1.0, 1.0, 1.0, -1.0});
    CHECK_THROWS_AS(nearest_dataset_points(d, 5, data, 1), std::invalid_argument);
    CHECK_THROWS_AS(nearest_dataset_points(d, 0, data, 3), std::invalid_argument);
    Tensor zero = Tensor::from_data({2, 2}, {0.0, 0.0, 1.0, 1.0});
    CHECK_THROWS_AS(nearest_dataset_points(d, 0, zero, 1), NumericError);
  }
}
