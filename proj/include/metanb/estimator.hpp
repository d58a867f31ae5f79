#pragma once

// Parametric estimators: MLP feature extractor, and the per-query tunable
// output heads (dot-product and cosine-similarity). Heads expose their
// parameters as an ordered flat list plus a with_params() rebind, which is
// what lets the inner loop run the same forward pass with adapted weights
// that are themselves graph nodes.

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

namespace detail {
void cosine_head_check(const Tensor& z, const Tensor& w);
}

// Fully connected stack with ReLU between layers. final_relu controls the
// activation after the last layer: a cosine head needs an unrestricted
// feature sign, so extractors feeding one set it false.
struct MLPParams {
  std::vector<Tensor> weights;  // each [out, in]
  std::vector<Tensor> biases;   // each [out]
  bool final_relu = false;

  static MLPParams create(const std::vector<std::size_t>& dims, bool final_relu,
                          std::uint64_t seed) {
    if (dims.size() < 1) throw std::invalid_argument("mlp: need at least an input dimension");
    for (std::size_t d : dims)
      if (d == 0) throw std::invalid_argument("mlp: zero-width layer");
    MLPParams m;
    m.final_relu = final_relu;
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      std::size_t in = dims[l], out = dims[l + 1];
      std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / double(in)));
      std::vector<double> w(out * in);
      for (auto& x : w) x = gauss(rng);
      m.weights.push_back(Tensor::param({out, in}, std::move(w)));
      m.biases.push_back(Tensor::param({out}, std::vector<double>(out, 0.0)));
    }
    return m;
  }

  std::size_t layer_count() const { return weights.size(); }
  std::size_t in_dim() const { return weights.empty() ? 0 : weights.front().cols(); }
  std::size_t out_dim() const { return weights.empty() ? 0 : weights.back().rows(); }

  // x: [B, in] -> [B, out]. Zero layers is the identity.
  Tensor forward(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (h.cols() != weights[l].cols())
        throw ShapeError("mlp: layer " + std::to_string(l) + " expects " +
                         std::to_string(weights[l].cols()) + " inputs, got " +
                         std::to_string(h.cols()));
      h = add(matmul(h, weights[l], false, true), reshape(biases[l], {1, biases[l].numel()}));
      if (l + 1 < weights.size() || final_relu) h = relu(h);
    }
    return h;
  }

  std::vector<Tensor> params() const {
    std::vector<Tensor> p;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      p.push_back(weights[l]);
      p.push_back(biases[l]);
    }
    return p;
  }

  MLPParams with_params(const std::vector<Tensor>& p) const {
    if (p.size() != 2 * weights.size())
      throw std::invalid_argument("mlp: with_params expects " + std::to_string(2 * weights.size()) +
                                  " tensors, got " + std::to_string(p.size()));
    MLPParams m = *this;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      m.weights[l] = p[2 * l];
      m.biases[l] = p[2 * l + 1];
    }
    return m;
  }
};

// z_i = mu_theta(x_i). Thin named wrapper so call sites read like the model.
inline Tensor extract_features(const MLPParams& theta, const Tensor& x) {
  if (x.rank() == 1) {
    Tensor z = theta.forward(reshape(x, {1, x.numel()}));
    return reshape(z, {z.cols()});
  }
  return theta.forward(x);
}

// Linear output layer: logits = z w^T + b.
struct DotHead {
  Tensor w;  // [n_o, n_z]
  Tensor b;  // [n_o]

  static DotHead create(std::size_t n_z, std::size_t n_o, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, std::sqrt(1.0 / double(n_z)));
    std::vector<double> w(n_o * n_z);
    for (auto& x : w) x = gauss(rng);
    DotHead h;
    h.w = Tensor::param({n_o, n_z}, std::move(w));
    h.b = Tensor::param({n_o}, std::vector<double>(n_o, 0.0));
    return h;
  }

  Tensor forward(const Tensor& z) const {
    return add(matmul(z, w, false, true), reshape(b, {1, b.numel()}));
  }

  std::vector<Tensor> params() const { return {w, b}; }
  DotHead with_params(const std::vector<Tensor>& p) const {
    if (p.size() != 2) throw std::invalid_argument("dot head: with_params expects 2 tensors");
    DotHead h = *this;
    h.w = p[0];
    h.b = p[1];
    return h;
  }
};

// Cosine-similarity output layer: r_j = z.w_j/(|z||w_j|) in [-1,1], scaled by
// a learnable temperature tau before the softmax. Removing the magnitude
// dependence keeps per-query tuning from just inflating logits.
struct CosineHead {
  Tensor w;    // [n_o, n_z]
  Tensor tau;  // scalar, learnable

  static CosineHead create(std::size_t n_z, std::size_t n_o, std::uint64_t seed,
                           double tau_init = 10.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, std::sqrt(1.0 / double(n_z)));
    std::vector<double> w(n_o * n_z);
    for (auto& x : w) x = gauss(rng);
    CosineHead h;
    h.w = Tensor::param({n_o, n_z}, std::move(w));
    h.tau = Tensor::param({}, {tau_init});
    return h;
  }

  // Raw similarities r, before tau scaling.
  Tensor similarities(const Tensor& z) const {
    detail::cosine_head_check(z, w);
    Tensor zn = div(z, row_norms(z));
    Tensor wn = div(w, row_norms(w));
    return matmul(zn, wn, false, true);
  }

  Tensor forward(const Tensor& z) const { return mul(similarities(z), tau); }

  std::vector<Tensor> params() const { return {w, tau}; }
  CosineHead with_params(const std::vector<Tensor>& p) const {
    if (p.size() != 2) throw std::invalid_argument("cosine head: with_params expects 2 tensors");
    CosineHead h = *this;
    h.w = p[0];
    h.tau = p[1];
    return h;
  }
};

namespace detail {
inline void cosine_head_check(const Tensor& z, const Tensor& w) {
  auto scan = [](const Tensor& t, const char* what) {
    std::size_t r = t.rows(), c = t.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double ssq = 0.0;
      for (std::size_t j = 0; j < c; ++j) ssq += t.data()[i * c + j] * t.data()[i * c + j];
      if (ssq < 1e-30)
        throw NumericError(std::string("cosine_logits: zero-norm ") + what + " (row " +
                           std::to_string(i) + ")");
    }
  };
  scan(z, "feature vector");
  scan(w, "class weight");
}
}  // namespace detail

// The tunable estimator f_phi: an optional hidden MLP stack followed by a dot
// or cosine output layer. Classification forward() yields logits; regression
// yields predicted values directly.
struct Head {
  enum class Output { dot, cosine };

  MLPParams mlp;  // hidden layers; zero layers means the output layer sees z directly
  Output output = Output::dot;
  DotHead dot;
  CosineHead cosine;

  // dims: {n_z, hidden..., n_o}. The last dimension becomes the output layer.
  // A cosine output compares directions, so the features feeding it keep
  // their sign: the trunk skips its final relu in that case.
  static Head create(const std::vector<std::size_t>& dims, Output output, std::uint64_t seed,
                     double tau_init = 10.0) {
    if (dims.size() < 2) throw std::invalid_argument("head: dims needs at least {in, out}");
    Head h;
    h.output = output;
    std::vector<std::size_t> hidden(dims.begin(), dims.end() - 1);
    h.mlp = MLPParams::create(hidden, /*final_relu=*/output == Output::dot, seed);
    std::size_t n_z = hidden.back(), n_o = dims.back();
    if (output == Output::dot)
      h.dot = DotHead::create(n_z, n_o, seed + 1);
    else
      h.cosine = CosineHead::create(n_z, n_o, seed + 1, tau_init);
    return h;
  }

  Tensor forward(const Tensor& z) const {
    Tensor h = mlp.forward(z);
    return output == Output::dot ? dot.forward(h) : cosine.forward(h);
  }

  std::size_t out_dim() const {
    return output == Output::dot ? dot.w.rows() : cosine.w.rows();
  }

  std::vector<Tensor> params() const {
    std::vector<Tensor> p = mlp.params();
    auto o = output == Output::dot ? dot.params() : cosine.params();
    p.insert(p.end(), o.begin(), o.end());
    return p;
  }

  Head with_params(const std::vector<Tensor>& p) const {
    std::size_t nm = 2 * mlp.layer_count();
    if (p.size() != nm + 2)
      throw std::invalid_argument("head: with_params expects " + std::to_string(nm + 2) +
                                  " tensors, got " + std::to_string(p.size()));
    Head h = *this;
    h.mlp = mlp.with_params({p.begin(), p.begin() + nm});
    if (output == Output::dot)
      h.dot = dot.with_params({p.begin() + nm, p.end()});
    else
      h.cosine = cosine.with_params({p.begin() + nm, p.end()});
    return h;
  }
};

// Free-function form of the cosine similarities, matching the written spec of
// the layer: r_j = z.w_j / (|z| |w_j|).
inline Tensor cosine_logits(const CosineHead& head, const Tensor& z) {
  if (z.rank() == 1)
    return reshape(cosine_logits(head, reshape(z, {1, z.numel()})), {head.w.rows()});
  return head.similarities(z);
}

// Per-row supervised loss, [B,1]. Classification: cross-entropy of predicted
// probabilities against (possibly soft) target distributions, probabilities
// clamped at 1e-12 before the log. Regression: squared error, averaged over
// output dimensions so multi-output losses stay comparable to single-output
// ones.
inline Tensor supervised_loss_rows(const Tensor& prediction, const Tensor& target,
                                   TaskKind task) {
  if (prediction.rank() != 2 || target.rank() != 2 ||
      prediction.shape() != target.shape())
    throw ShapeError("supervised_loss: prediction " + shape_str(prediction.shape()) +
                     " vs target " + shape_str(target.shape()));
  if (task == TaskKind::classification)
    return neg(sum_dim1(mul(target, log(clamp_min(prediction, 1e-12)))));
  Tensor diff = sub(prediction, target);
  return mul_scalar(sum_dim1(mul(diff, diff)), 1.0 / double(prediction.cols()));
}

// Mean over the batch.
inline Tensor supervised_loss(const Tensor& prediction, const Tensor& target, TaskKind task) {
  return mean(supervised_loss_rows(prediction, target, task));
}

}  // namespace metanb
