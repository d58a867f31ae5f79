#pragma once

// Exact k-nearest-neighbor baseline, plus the constant-estimator view of it:
// the constant C minimizing mean squared loss over a neighborhood's labels is
// the label mean, which is exactly the kNN prediction. Brute-force search; at
// the scales this library targets a spatial index would be noise.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "metanb/common.hpp"
#include "metanb/tensor.hpp"

namespace metanb {

// Neighbors of one query, sorted by ascending distance (ties broken by lower
// training index). Features and labels are stored row-per-neighbor.
struct Neighborhood {
  std::vector<std::size_t> indices;
  std::vector<double> distances;
  std::vector<double> features;  // k * dim, row-major
  std::vector<double> labels;    // k * n_out, row-major
  std::size_t dim = 0;
  std::size_t n_out = 0;

  std::size_t size() const { return indices.size(); }
};

namespace detail {

inline double euclidean_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double t = a[i] - b[i];
    s += t * t;
  }
  return std::sqrt(s);
}

// 1 - cosine similarity, so that "smaller is nearer" holds for both metrics.
inline double cosine_dist(const double* a, const double* b, std::size_t d) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0)
    throw NumericError("knn_search: cosine distance undefined for zero-norm vector");
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

// Exact k nearest training points to `query`. Training points elementwise
// equal to the query are excluded (a query drawn from the training set never
// retrieves itself). X is [N,d], Y is [N,n_out].
inline Neighborhood knn_search(const std::vector<double>& query, const Tensor& X, const Tensor& Y,
                               std::size_t k, Metric metric) {
  std::size_t n = X.rows(), d = X.cols();
  if (query.size() != d)
    throw ShapeError("knn_search: query has " + std::to_string(query.size()) +
                     " features, training set has " + std::to_string(d));
  if (Y.rows() != n)
    throw ShapeError("knn_search: X has " + std::to_string(n) + " rows, Y has " +
                     std::to_string(Y.rows()));
  if (k == 0) throw std::invalid_argument("knn_search: k must be at least 1");

  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = X.data().data() + i * d;
    if (std::equal(row, row + d, query.data())) continue;  // the query itself
    double dist = metric == Metric::euclidean ? detail::euclidean_dist(query.data(), row, d)
                                              : detail::cosine_dist(query.data(), row, d);
    cand.emplace_back(dist, i);
  }
  if (k > cand.size())
    throw std::invalid_argument("knn_search: k=" + std::to_string(k) + " but only " +
                                std::to_string(cand.size()) + " candidate points");
  std::sort(cand.begin(), cand.end());  // pair ordering = distance, then index

  Neighborhood nb;
  nb.dim = X.cols();
  nb.n_out = Y.cols();
  nb.indices.reserve(k);
  nb.distances.reserve(k);
  nb.features.reserve(k * nb.dim);
  nb.labels.reserve(k * nb.n_out);
  for (std::size_t j = 0; j < k; ++j) {
    nb.indices.push_back(cand[j].second);
    nb.distances.push_back(cand[j].first);
    const double* feat = X.data().data() + cand[j].second * nb.dim;
    nb.features.insert(nb.features.end(), feat, feat + nb.dim);
    const double* lab = Y.data().data() + cand[j].second * nb.n_out;
    nb.labels.insert(nb.labels.end(), lab, lab + nb.n_out);
  }
  return nb;
}

// Mean of the neighborhood labels. For regression this is the kNN estimate;
// for classification it is the neighbor label distribution (argmax of it is
// the majority vote).
inline std::vector<double> knn_predict(const Neighborhood& nb, TaskKind /*task*/) {
  if (nb.size() == 0) throw std::invalid_argument("knn_predict: empty neighborhood");
  std::vector<double> mean(nb.n_out, 0.0);
  for (std::size_t j = 0; j < nb.size(); ++j)
    for (std::size_t o = 0; o < nb.n_out; ++o) mean[o] += nb.labels[j * nb.n_out + o];
  for (double& m : mean) m /= double(nb.size());
  return mean;
}

// The constant estimator fitted to a neighborhood: argmin_C (1/k) Σ_j (C - ζ_j)²
// is the label mean. Computed with the same accumulation order as knn_predict
// so the two agree bit for bit.
inline std::vector<double> constant_estimator_solution(const Neighborhood& nb) {
  if (nb.size() == 0) throw std::invalid_argument("constant_estimator_solution: empty neighborhood");
  std::vector<double> c(nb.n_out, 0.0);
  for (std::size_t j = 0; j < nb.size(); ++j)
    for (std::size_t o = 0; o < nb.n_out; ++o) c[o] += nb.labels[j * nb.n_out + o];
  for (double& m : c) m /= double(nb.size());
  return c;
}

}  // namespace metanb
