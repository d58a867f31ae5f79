#pragma once

// Dataset plumbing: synthetic spirals, delimited-file ingestion, train-stat
// normalization, and fold/split management. Inputs and labels are stored as
// plain (non-differentiable) tensors; the training loop slices rows out of
// them per batch.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "metanb/common.hpp"
#include "metanb/tensor.hpp"

namespace metanb {

// Raised for unreadable or malformed input files; message carries the line
// number of the offending row where applicable.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Dataset {
  Tensor inputs;  // [N, d]
  Tensor labels;  // [N, n_o]
  TaskKind task = TaskKind::classification;

  // Standardization stats, filled by normalize(); label stats only for
  // regression. Empty vectors mean "not normalized".
  std::vector<double> x_mean, x_std;
  std::vector<double> y_mean, y_std;

  // Row splits; populated by the split helpers, empty until then.
  std::vector<std::size_t> train_rows, val_rows, test_rows;

  std::size_t size() const { return inputs.rows(); }
  std::size_t dim() const { return inputs.cols(); }
  std::size_t label_dim() const { return labels.cols(); }
  bool normalized() const { return !x_mean.empty(); }
};

// Two interleaved spirals, one per class. Point i of a class sits at angle
// turns*2*pi*f (f = i/(n-1)) with radius growing linearly 0.2 -> 2.0; class 1
// is rotated by pi. Gaussian noise perturbs the radius only, so the class
// structure (radius monotone in angle) survives any seed. Labels one-hot.
inline Dataset generate_spirals(std::size_t n_per_class, double noise_std = 0.1,
                                double turns = 2.0, std::uint64_t seed = 0) {
  if (n_per_class < 1) throw std::invalid_argument("generate_spirals: n_per_class must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, noise_std);
  const double r_lo = 0.2, r_hi = 2.0;
  std::size_t n = 2 * n_per_class;
  std::vector<double> x(n * 2), y(n * 4, 0.0);
  std::size_t row = 0;
  for (int cls = 0; cls < 2; ++cls) {
    for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
      double f = n_per_class == 1 ? 0.0 : double(i) / double(n_per_class - 1);
      double angle = turns * 2.0 * 3.14159265358979323846 * f + (cls == 1 ? 3.14159265358979323846 : 0.0);
      double r = r_lo + (r_hi - r_lo) * f + (noise_std > 0.0 ? noise(rng) : 0.0);
      x[row * 2 + 0] = r * std::cos(angle);
      x[row * 2 + 1] = r * std::sin(angle);
      y[row * 2 + cls] = 1.0;
    }
  }
  y.resize(n * 2);
  Dataset ds;
  ds.inputs = Tensor::from_data({n, 2}, std::move(x));
  ds.labels = Tensor::from_data({n, 2}, std::move(y));
  ds.task = TaskKind::classification;
  return ds;
}

namespace detail {

inline double parse_cell(const std::string& cell, std::size_t line_no, std::size_t col) {
  const char* b = cell.data();
  const char* e = b + cell.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\t' || e[-1] == '\r')) --e;
  if (b == e)
    throw DataError("line " + std::to_string(line_no) + ": empty cell in column " +
                    std::to_string(col + 1));
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || ptr != e)
    throw DataError("line " + std::to_string(line_no) + ": non-numeric cell '" +
                    std::string(b, e) + "' in column " + std::to_string(col + 1));
  return v;
}

inline bool numeric_row(const std::vector<std::string>& cells) {
  for (const auto& c : cells) {
    double v;
    const char* b = c.data();
    const char* e = b + c.size();
    while (b < e && (*b == ' ' || *b == '\t')) ++b;
    while (e > b && (e[-1] == ' ' || e[-1] == '\t' || e[-1] == '\r')) --e;
    if (b == e) return false;
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc{} || ptr != e) return false;
  }
  return true;
}

inline std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(delim, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

// Strict numeric table reader. Every row must be rectangular; label_columns
// (0-based) are pulled into the label matrix, the rest become inputs. With
// detect_header, a non-numeric first line is skipped; every other defect is
// an error naming the line. Classification expects a single integer label
// column, expanded to one-hot.
inline Dataset load_delimited(const std::string& path, const std::vector<std::size_t>& label_columns,
                              TaskKind task, char delimiter = ',', bool detect_header = true) {
  if (label_columns.empty()) throw std::invalid_argument("load_delimited: no label columns given");
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");

  std::vector<double> cells;
  std::size_t cols = 0, rows = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto parts = detail::split_line(line, delimiter);
    if (rows == 0 && cols == 0) {
      if (detect_header && !detail::numeric_row(parts)) continue;  // header line
      cols = parts.size();
    }
    if (parts.size() != cols)
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(cols) +
                      " columns, found " + std::to_string(parts.size()));
    for (std::size_t c = 0; c < cols; ++c) cells.push_back(detail::parse_cell(parts[c], line_no, c));
    ++rows;
  }
  if (rows == 0) throw DataError("'" + path + "' contains no data rows");
  for (std::size_t c : label_columns)
    if (c >= cols)
      throw std::invalid_argument("load_delimited: label column " + std::to_string(c) +
                                  " out of range (file has " + std::to_string(cols) + ")");

  std::vector<bool> is_label(cols, false);
  for (std::size_t c : label_columns) is_label[c] = true;
  std::size_t d = cols - label_columns.size();

  std::vector<double> xs(rows * d), raw_labels(rows * label_columns.size());
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t xi = 0, yi = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      double v = cells[r * cols + c];
      if (is_label[c])
        raw_labels[r * label_columns.size() + yi++] = v;
      else
        xs[r * d + xi++] = v;
    }
  }

  Dataset ds;
  ds.task = task;
  ds.inputs = Tensor::from_data({rows, d}, std::move(xs));
  if (task == TaskKind::regression) {
    ds.labels = Tensor::from_data({rows, label_columns.size()}, std::move(raw_labels));
    return ds;
  }
  if (label_columns.size() != 1)
    throw std::invalid_argument("load_delimited: classification expects one label column");
  long max_cls = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double v = raw_labels[r];
    if (v != std::floor(v) || v < 0)
      throw DataError("row " + std::to_string(r + 1) + ": class label " + std::to_string(v) +
                      " is not a nonnegative integer");
    max_cls = std::max(max_cls, long(v));
  }
  std::vector<double> onehot(rows * std::size_t(max_cls + 1), 0.0);
  for (std::size_t r = 0; r < rows; ++r) onehot[r * (max_cls + 1) + std::size_t(raw_labels[r])] = 1.0;
  ds.labels = Tensor::from_data({rows, std::size_t(max_cls + 1)}, std::move(onehot));
  return ds;
}

// Standardizes inputs (and labels too, for regression) to zero mean / unit
// variance per dimension, with stats computed over train_rows only and
// applied everywhere. Constant dimensions are centered but left unscaled.
// Regression labels are standardized as well so reported MSE magnitudes are
// comparable across datasets; this is a deliberate, documented choice.
inline Dataset normalize(const Dataset& ds, const std::vector<std::size_t>& train_rows) {
  if (train_rows.empty()) throw std::invalid_argument("normalize: no training rows");
  auto stats = [&](const Tensor& t) {
    std::size_t c = t.cols();
    std::vector<double> mean(c, 0.0), std(c, 0.0);
    for (std::size_t r : train_rows)
      for (std::size_t j = 0; j < c; ++j) mean[j] += t.at(r, j);
    for (double& m : mean) m /= double(train_rows.size());
    for (std::size_t r : train_rows)
      for (std::size_t j = 0; j < c; ++j) {
        double dv = t.at(r, j) - mean[j];
        std[j] += dv * dv;
      }
    for (double& s : std) {
      s = std::sqrt(s / double(train_rows.size()));
      if (s < 1e-12) s = 1.0;  // constant dimension
    }
    return std::pair(mean, std);
  };
  auto apply = [](const Tensor& t, const std::vector<double>& mean,
                  const std::vector<double>& std) {
    std::vector<double> v = t.data();
    std::size_t c = t.cols();
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t j = 0; j < c; ++j) v[r * c + j] = (v[r * c + j] - mean[j]) / std[j];
    return Tensor::from_data(t.shape(), std::move(v));
  };

  Dataset out = ds;
  auto [xm, xs] = stats(ds.inputs);
  out.inputs = apply(ds.inputs, xm, xs);
  out.x_mean = std::move(xm);
  out.x_std = std::move(xs);
  if (ds.task == TaskKind::regression) {
    auto [ym, ys] = stats(ds.labels);
    out.labels = apply(ds.labels, ym, ys);
    out.y_mean = std::move(ym);
    out.y_std = std::move(ys);
  }
  return out;
}

// Inverse of normalize(), using the stats stored on the dataset.
inline Dataset denormalize(const Dataset& ds) {
  if (!ds.normalized()) throw std::invalid_argument("denormalize: dataset is not normalized");
  auto invert = [](const Tensor& t, const std::vector<double>& mean,
                   const std::vector<double>& std) {
    std::vector<double> v = t.data();
    std::size_t c = t.cols();
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t j = 0; j < c; ++j) v[r * c + j] = v[r * c + j] * std[j] + mean[j];
    return Tensor::from_data(t.shape(), std::move(v));
  };
  Dataset out = ds;
  out.inputs = invert(ds.inputs, ds.x_mean, ds.x_std);
  out.x_mean.clear();
  out.x_std.clear();
  if (!ds.y_mean.empty()) {
    out.labels = invert(ds.labels, ds.y_mean, ds.y_std);
    out.y_mean.clear();
    out.y_std.clear();
  }
  return out;
}

// Row-gather. Stats and task carry over; split bookkeeping does not.
inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& rows) {
  std::size_t d = ds.dim(), no = ds.label_dim();
  std::vector<double> x(rows.size() * d), y(rows.size() * no);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= ds.size())
      throw std::invalid_argument("subset: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(ds.inputs.data().begin() + rows[i] * d, d, x.begin() + i * d);
    std::copy_n(ds.labels.data().begin() + rows[i] * no, no, y.begin() + i * no);
  }
  Dataset out;
  out.inputs = Tensor::from_data({rows.size(), d}, std::move(x));
  out.labels = Tensor::from_data({rows.size(), no}, std::move(y));
  out.task = ds.task;
  out.x_mean = ds.x_mean;
  out.x_std = ds.x_std;
  out.y_mean = ds.y_mean;
  out.y_std = ds.y_std;
  return out;
}

struct Fold {
  std::vector<std::size_t> train, test;
};

// Disjoint covering folds with sizes differing by at most 1, from a seeded
// shuffle of row indices.
inline std::vector<Fold> kfold(std::size_t n, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("kfold: need at least 2 folds");
  if (folds > n)
    throw std::invalid_argument("kfold: " + std::to_string(folds) + " folds for " +
                                std::to_string(n) + " rows");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);

  std::vector<Fold> out(folds);
  std::size_t base = n / folds, extra = n % folds, pos = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    std::size_t len = base + (f < extra ? 1 : 0);
    out[f].test.assign(idx.begin() + pos, idx.begin() + pos + len);
    out[f].train.reserve(n - len);
    out[f].train.insert(out[f].train.end(), idx.begin(), idx.begin() + pos);
    out[f].train.insert(out[f].train.end(), idx.begin() + pos + len, idx.end());
    pos += len;
  }
  return out;
}

inline std::vector<Fold> kfold(const Dataset& ds, std::size_t folds, std::uint64_t seed) {
  return kfold(ds.size(), folds, seed);
}

// Seeded train/validation split of [0, n); the validation side gets
// round(frac*n), at least 1 row.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(
    std::size_t n, double frac, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("split_validation: need at least 2 rows");
  if (frac <= 0.0 || frac >= 1.0)
    throw std::invalid_argument("split_validation: frac must be in (0,1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t nval = std::max<std::size_t>(1, std::size_t(std::llround(frac * double(n))));
  if (nval >= n) nval = n - 1;
  std::vector<std::size_t> val(idx.begin(), idx.begin() + nval);
  std::vector<std::size_t> train(idx.begin() + nval, idx.end());
  return {train, val};
}

}  // namespace metanb
