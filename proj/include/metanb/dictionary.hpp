#pragma once

// The learnable neighbor dictionary: S key/value pairs retrieved by soft
// attention. Keys live in input or feature space; values are either free
// logits turned into soft labels at loss time (classification) or raw
// regression targets. Everything here is differentiable, so dictionary
// entries are trained through the meta objective like any other parameter.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "metanb/common.hpp"
#include "metanb/tensor.hpp"

namespace metanb {

enum class ValueMode { soft_label, raw };

inline std::string to_string(ValueMode v) { return v == ValueMode::soft_label ? "soft_label" : "raw"; }
inline ValueMode value_mode_from_string(const std::string& s) {
  if (s == "soft_label") return ValueMode::soft_label;
  if (s == "raw") return ValueMode::raw;
  throw std::invalid_argument("unknown value_mode '" + s + "' (expected soft_label or raw)");
}

struct NeighborDictionary {
  Tensor keys;    // [S, m] leaf
  Tensor values;  // [S, n_o] leaf
  Metric metric = Metric::cosine;
  double gamma = 5.0;
  ValueMode value_mode = ValueMode::soft_label;

  std::size_t size() const { return keys.rows(); }
  std::size_t key_dim() const { return keys.cols(); }
  std::size_t value_dim() const { return values.cols(); }

  // Values as used by the loss: soft labels are a row softmax over the
  // stored logits, raw values pass through.
  Tensor effective_values() const {
    return value_mode == ValueMode::soft_label ? softmax_rows(values) : values;
  }

  NeighborDictionary with_entries(Tensor k, Tensor v) const {
    NeighborDictionary d = *this;
    d.keys = std::move(k);
    d.values = std::move(v);
    return d;
  }
};

// Keys and values drawn i.i.d. Gaussian(0, 0.1); deterministic given seed.
inline NeighborDictionary init_dictionary(std::size_t S, std::size_t m, std::size_t n_o,
                                          std::uint64_t seed, Metric metric = Metric::cosine,
                                          double gamma = 5.0,
                                          ValueMode value_mode = ValueMode::soft_label) {
  if (S < 1 || m < 1 || n_o < 1)
    throw std::invalid_argument("init_dictionary: S, m, n_o must all be at least 1");
  if (gamma <= 0.0) throw std::invalid_argument("init_dictionary: gamma must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 0.1);
  std::vector<double> k(S * m), v(S * n_o);
  for (auto& x : k) x = gauss(rng);
  for (auto& x : v) x = gauss(rng);
  NeighborDictionary d;
  d.keys = Tensor::param({S, m}, std::move(k));
  d.values = Tensor::param({S, n_o}, std::move(v));
  d.metric = metric;
  d.gamma = gamma;
  d.value_mode = value_mode;
  return d;
}

// Regression variant: values drawn uniformly over the observed label range so
// early retrievals are plausible targets rather than near-zero noise.
inline void reinit_values_uniform(NeighborDictionary& d, double lo, double hi,
                                  std::uint64_t seed) {
  if (!(lo <= hi)) throw std::invalid_argument("reinit_values_uniform: lo > hi");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(d.values.numel());
  for (auto& x : v) x = u(rng);
  d.values.set_data(v);
}

namespace detail {

inline void require_nonzero_rows(const Tensor& t, const char* what) {
  std::size_t r = t.rows(), c = t.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double ssq = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      double x = t.data()[i * c + j];
      ssq += x * x;
    }
    if (ssq < 1e-30)
      throw NumericError(std::string("attend: zero-norm ") + what + " (row " + std::to_string(i) +
                         ") under cosine metric");
  }
}

}  // namespace detail

// Attention weights of a batch of queries over a key matrix, [B,S] with rows
// summing to 1. Euclidean: softmax over -gamma * ||q - k_j||; cosine: softmax
// over gamma * cos(q, k_j). Differentiable in queries and keys.
inline Tensor attention_weights(const Tensor& queries, const Tensor& keys, Metric metric,
                                double gamma) {
  if (queries.rank() != 2 || keys.rank() != 2 || queries.cols() != keys.cols())
    throw ShapeError("attend: query shape " + shape_str(queries.shape()) +
                     " does not match key shape " + shape_str(keys.shape()));
  if (metric == Metric::euclidean) {
    Tensor qq = sum_dim1(mul(queries, queries));        // [B,1]
    Tensor kk = transpose(sum_dim1(mul(keys, keys)));   // [1,S]
    Tensor cross = mul_scalar(matmul(queries, keys, false, true), -2.0);
    Tensor sq = add(add(qq, kk), cross);
    // clamp absorbs tiny negative round-off and keeps sqrt finite-gradient
    // when a query sits exactly on a key
    Tensor dist = sqrt(clamp_min(sq, 1e-24));
    return softmax_rows(mul_scalar(dist, -gamma));
  }
  detail::require_nonzero_rows(queries, "query");
  detail::require_nonzero_rows(keys, "key");
  Tensor qn = div(queries, row_norms(queries));
  Tensor kn = div(keys, row_norms(keys));
  return softmax_rows(mul_scalar(matmul(qn, kn, false, true), gamma));
}

// Single-query convenience form: S weights summing to 1.
inline Tensor attend(const Tensor& query, const NeighborDictionary& dict) {
  if (query.rank() != 1)
    throw ShapeError("attend: query must be 1-d, got " + shape_str(query.shape()));
  Tensor w = attention_weights(reshape(query, {1, query.numel()}), dict.keys, dict.metric,
                               dict.gamma);
  return reshape(w, {dict.size()});
}

inline Tensor attend_batch(const Tensor& queries, const NeighborDictionary& dict) {
  return attention_weights(queries, dict.keys, dict.metric, dict.gamma);
}

// Dataset rows most similar (cosine, descending, ties by lower index) to a
// dictionary key. Analysis helper for inspecting what a trained entry means;
// not differentiable and not part of any loss.
inline std::vector<std::size_t> nearest_dataset_points(const NeighborDictionary& dict,
                                                       std::size_t entry_index,
                                                       const Tensor& dataset_features,
                                                       std::size_t k) {
  if (entry_index >= dict.size())
    throw std::invalid_argument("nearest_dataset_points: entry " + std::to_string(entry_index) +
                                " out of range (S=" + std::to_string(dict.size()) + ")");
  std::size_t n = dataset_features.rows(), d = dataset_features.cols();
  if (n == 0) throw std::invalid_argument("nearest_dataset_points: empty dataset");
  if (k > n)
    throw std::invalid_argument("nearest_dataset_points: k=" + std::to_string(k) + " but N=" +
                                std::to_string(n));
  if (d != dict.key_dim())
    throw ShapeError("nearest_dataset_points: dataset dim " + std::to_string(d) +
                     " vs key dim " + std::to_string(dict.key_dim()));
  const double* key = dict.keys.data().data() + entry_index * d;
  double kn = 0.0;
  for (std::size_t j = 0; j < d; ++j) kn += key[j] * key[j];
  if (kn < 1e-30) throw NumericError("nearest_dataset_points: zero-norm dictionary key");
  kn = std::sqrt(kn);

  std::vector<std::pair<double, std::size_t>> scored(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = dataset_features.data().data() + i * d;
    double dot = 0.0, rn = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += row[j] * key[j];
      rn += row[j] * row[j];
    }
    if (rn < 1e-30)
      throw NumericError("nearest_dataset_points: zero-norm dataset row " + std::to_string(i));
    // negate similarity so pair ordering gives descending similarity, ties by
    // lower index
    scored[i] = {-dot / (std::sqrt(rn) * kn), i};
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = scored[i].second;
  return out;
}

}  // namespace metanb
