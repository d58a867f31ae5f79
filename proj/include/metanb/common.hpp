#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace metanb {

enum class Metric { euclidean, cosine };
enum class TaskKind { classification, regression };

inline std::string to_string(Metric m) { return m == Metric::euclidean ? "euclidean" : "cosine"; }
inline std::string to_string(TaskKind t) {
  return t == TaskKind::classification ? "classification" : "regression";
}

inline Metric metric_from_string(const std::string& s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "cosine") return Metric::cosine;
  throw std::invalid_argument("unknown metric '" + s + "' (expected euclidean or cosine)");
}

inline TaskKind task_from_string(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "regression") return TaskKind::regression;
  throw std::invalid_argument("unknown task '" + s + "' (expected classification or regression)");
}

// Index of the largest element; first one wins on ties.
inline std::size_t argmax(const double* v, std::size_t n) {
  if (n == 0) throw std::invalid_argument("argmax: empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::size_t argmax(const std::vector<double>& v) { return argmax(v.data(), v.size()); }

}  // namespace metanb
