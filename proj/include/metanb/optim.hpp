#pragma once

// Outer-loop optimizers. AdamW is the workhorse: dictionary entries receive
// hard, sparse updates (only attended entries get meaningful gradient), so
// per-element adaptive learning rates matter. SGD is kept for baseline parity.
//
// Optimizers mutate leaf tensors in place via set_data; the computation graph
// is rebuilt from the leaves on every training iteration.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "metanb/tensor.hpp"

namespace metanb {

// A leaf parameter registered with an optimizer. Decay-exempt parameters skip
// decoupled weight decay (dictionary values and inner learning rates by
// default: shrinking soft-label logits or step sizes toward zero is not
// regularization anyone asked for).
struct OptimParam {
  Tensor value;
  bool decay_exempt = false;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  AdamW(AdamWConfig cfg, std::vector<OptimParam> params)
      : cfg_(cfg), params_(std::move(params)) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p.value.numel(), 0.0);
      v_.emplace_back(p.value.numel(), 0.0);
    }
  }

  // One update from gradients aligned with the registered parameters.
  // p <- p - lr * mhat/(sqrt(vhat)+eps) - lr * wd * p   (decay decoupled)
  void step(const std::vector<Tensor>& grads) {
    check_grads(grads, "adamw_step");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      std::vector<double> p = params_[i].value.data();
      const auto& g = grads[i].data();
      double wd = params_[i].decay_exempt ? 0.0 : cfg_.weight_decay;
      for (std::size_t j = 0; j < p.size(); ++j) {
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        double mhat = m_[i][j] / bc1;
        double vhat = v_[i][j] / bc2;
        p[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.lr * wd * p[j];
      }
      params_[i].value.set_data(p);
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  std::size_t steps() const { return t_; }

 private:
  void check_grads(const std::vector<Tensor>& grads, const char* who) const {
    if (grads.size() != params_.size())
      throw std::invalid_argument(std::string(who) + ": " + std::to_string(grads.size()) +
                                  " gradients for " + std::to_string(params_.size()) +
                                  " parameters");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (grads[i].shape() != params_[i].value.shape())
        throw ShapeError(std::string(who) + ": gradient " + std::to_string(i) + " has shape " +
                         shape_str(grads[i].shape()) + ", parameter has " +
                         shape_str(params_[i].value.shape()));
      for (double g : grads[i].data())
        if (!std::isfinite(g))
          throw NumericError(std::string(who) + ": non-finite gradient in parameter " +
                             std::to_string(i));
    }
  }

  AdamWConfig cfg_;
  std::vector<OptimParam> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct SGDConfig {
  double lr = 1e-2;
  double momentum = 0.0;
};

class SGD {
 public:
  SGD(SGDConfig cfg, std::vector<OptimParam> params) : cfg_(cfg), params_(std::move(params)) {
    if (cfg_.lr <= 0.0) throw std::invalid_argument("sgd: learning rate must be positive");
    for (const auto& p : params_) vel_.emplace_back(p.value.numel(), 0.0);
  }

  // v <- momentum*v + g; p <- p - lr*v  (plain p <- p - lr*g when momentum=0)
  void step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_.size())
      throw std::invalid_argument("sgd_step: gradient/parameter count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (grads[i].shape() != params_[i].value.shape())
        throw ShapeError("sgd_step: gradient " + std::to_string(i) + " shape mismatch");
      std::vector<double> p = params_[i].value.data();
      const auto& g = grads[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) {
        if (!std::isfinite(g[j]))
          throw NumericError("sgd_step: non-finite gradient in parameter " + std::to_string(i));
        vel_[i][j] = cfg_.momentum * vel_[i][j] + g[j];
        p[j] -= cfg_.lr * vel_[i][j];
      }
      params_[i].value.set_data(p);
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

 private:
  SGDConfig cfg_;
  std::vector<OptimParam> params_;
  std::vector<std::vector<double>> vel_;
};

}  // namespace metanb
