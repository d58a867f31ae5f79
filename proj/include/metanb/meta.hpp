#pragma once

// Per-query model adaptation against a learned neighbor dictionary.
//
// The model carries S free (key, value) pairs. For a query z the attention
// weights over the keys define a weighted supervised loss on the dictionary
// itself; one or more plain gradient steps on that loss specialize the head
// phi into a per-query phi_i, which then makes the actual prediction. Keys,
// values, the inner step size, the shared head, and the extractor are all
// trained end to end by differentiating through the inner steps, so the outer
// gradient is second order in phi.
//
// Two implementations of the adapted forward pass coexist:
//   - a reference path that literally runs fine_tune per query, and
//   - a batched fast path for the common configuration (one inner step,
//     scalar step size, linear output layer), which expands phi_i analytically
//     and never materializes per-query parameters.
// The fast path is an algebraic rewrite of the reference path, not an
// approximation; tests pin the two together.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "metanb/common.hpp"
#include "metanb/data.hpp"
#include "metanb/dictionary.hpp"
#include "metanb/estimator.hpp"
#include "metanb/knn.hpp"
#include "metanb/optim.hpp"
#include "metanb/tensor.hpp"

namespace metanb {

// Inner-loop step size alpha, itself meta-learned. Scalar mode shares one
// step size across all of phi; diagonal mode gives every element of phi its
// own (one tensor per phi tensor, same shapes). Values are unconstrained:
// the outer loop may drive coordinates negative or to zero.
struct InnerLearningRate {
  enum class Mode { scalar, diagonal };

  Mode mode = Mode::scalar;
  std::vector<Tensor> values;

  static InnerLearningRate scalar(double init = 0.1) {
    InnerLearningRate a;
    a.mode = Mode::scalar;
    a.values = {Tensor::param({}, {init})};
    return a;
  }

  // One step size per element of the given head parameters.
  static InnerLearningRate diagonal(const std::vector<Tensor>& phi_params, double init = 0.1) {
    InnerLearningRate a;
    a.mode = Mode::diagonal;
    for (const auto& p : phi_params)
      a.values.push_back(Tensor::param(p.shape(), std::vector<double>(p.numel(), init)));
    return a;
  }

  // Step size tensor to apply to phi parameter t.
  const Tensor& for_param(std::size_t t) const {
    return mode == Mode::scalar ? values[0] : values.at(t);
  }

  std::vector<Tensor> params() const { return values; }
};

// One supervised batch: inputs [B, d], labels [B, n_o] (one-hot or soft
// distributions for classification, targets for regression).
struct TaskBatch {
  Tensor inputs;
  Tensor labels;
};

// The full trainable model. theta with zero layers means queries are used in
// input space directly (the usual regression setup); xi is an optional
// auxiliary head co-trained on the plain supervised loss to keep the
// extractor's features honest while the dictionary specializes phi.
struct MetaModel {
  MLPParams theta;          // feature extractor, may have zero layers
  Head phi;                 // the estimator that gets tuned per query
  std::optional<Head> xi;   // auxiliary head on the same features
  NeighborDictionary dict;  // S learnable (key, value) pairs in query space
  InnerLearningRate alpha = InnerLearningRate::scalar();
  double lambda = 0.0;      // weight of the auxiliary loss
  std::size_t inner_steps = 1;
  TaskKind task = TaskKind::classification;

  // Named parameter groups, in a fixed order; the training loop and the
  // artifact format both follow this layout.
  std::vector<std::pair<std::string, std::vector<Tensor>>> param_groups() const {
    std::vector<std::pair<std::string, std::vector<Tensor>>> g;
    g.emplace_back("theta", theta.params());
    g.emplace_back("phi", phi.params());
    if (xi) g.emplace_back("xi", xi->params());
    g.emplace_back("dict_keys", std::vector<Tensor>{dict.keys});
    g.emplace_back("dict_values", std::vector<Tensor>{dict.values});
    g.emplace_back("alpha", alpha.params());
    return g;
  }
};

// z = mu_theta(x); the identity when theta has no layers.
inline Tensor embed(const MetaModel& m, const Tensor& x) {
  return extract_features(m.theta, x);
}

namespace detail {

// 0/1 indicator of positive entries, as a constant. This is the almost-
// everywhere derivative of relu; keeping it out of the graph matches what
// differentiating through relu twice yields (relu'' = 0 a.e.).
inline Tensor positive_mask(const Tensor& t) {
  std::vector<double> m(t.numel());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = t.data()[i] > 0.0 ? 1.0 : 0.0;
  return Tensor::from_data(t.shape(), std::move(m));
}

}  // namespace detail

// Per-entry supervised losses of a head evaluated on the dictionary itself:
// row j is L(f_phi(k_j), v~_j). Shape [S, 1].
inline Tensor dictionary_entry_losses(const Head& phi, const NeighborDictionary& dict,
                                      TaskKind task) {
  Tensor out = phi.forward(dict.keys);
  Tensor pred = task == TaskKind::classification ? softmax_rows(out) : out;
  return supervised_loss_rows(pred, dict.effective_values(), task);
}

// Attention-weighted dictionary loss for one query, given its attention row
// [1, S]: sum_j w_j L(f_phi(k_j), v~_j). Scalar.
inline Tensor inner_loss_with_weights(const Head& phi, const NeighborDictionary& dict,
                                      TaskKind task, const Tensor& omega_row) {
  return matmul(omega_row, dictionary_entry_losses(phi, dict, task));
}

// Same, computing the attention from a raw query embedding (rank-1).
inline Tensor inner_loss(const MetaModel& m, const Tensor& query_embedding) {
  Tensor w = attend(query_embedding, m.dict);
  return inner_loss_with_weights(m.phi, m.dict, m.task, reshape(w, {1, m.dict.size()}));
}

// Uniform dictionary-free variant: the mean supervised loss of phi on an
// actual retrieved neighborhood, (1/k) sum_j L(f_phi(eta_j), zeta_j). This is
// what per-query tuning against real nearest neighbors optimizes.
inline Tensor inner_loss_from_neighbors(const Head& phi, const Neighborhood& nb, TaskKind task) {
  if (nb.size() == 0)
    throw std::invalid_argument("inner_loss_from_neighbors: empty neighborhood");
  Tensor feats = Tensor::from_data({nb.size(), nb.dim}, nb.features);
  Tensor labels = Tensor::from_data({nb.size(), nb.n_out}, nb.labels);
  Tensor out = phi.forward(feats);
  Tensor pred = task == TaskKind::classification ? softmax_rows(out) : out;
  return supervised_loss(pred, labels, task);
}

// inner_steps gradient steps on the weighted dictionary loss, starting from
// the shared phi. With create_graph the returned head's parameters stay
// differentiable functions of everything upstream (phi, keys, values, alpha),
// which is what end-to-end training differentiates through.
inline Head fine_tune_with_weights(const MetaModel& m, const Tensor& omega_row,
                                   bool create_graph) {
  Head cur = m.phi;
  std::vector<Tensor> p = cur.params();
  if (m.alpha.mode == InnerLearningRate::Mode::diagonal && m.alpha.values.size() != p.size())
    throw std::invalid_argument("fine_tune: diagonal alpha has " +
                                std::to_string(m.alpha.values.size()) + " tensors for " +
                                std::to_string(p.size()) + " head parameters");
  for (std::size_t step = 0; step < m.inner_steps; ++step) {
    Tensor loss = inner_loss_with_weights(cur, m.dict, m.task, omega_row);
    std::vector<Tensor> g = gradient(loss, p, create_graph);
    std::vector<Tensor> next;
    next.reserve(p.size());
    for (std::size_t t = 0; t < p.size(); ++t)
      next.push_back(sub(p[t], mul(m.alpha.for_param(t), g[t])));
    p = std::move(next);
    cur = cur.with_params(p);
  }
  return cur;
}

// Adapt phi for a single query embedding (rank-1). The model is untouched;
// the returned head is the per-query phi_i.
inline Head fine_tune(const MetaModel& m, const Tensor& query_embedding,
                      bool create_graph = false) {
  Tensor w = attend(query_embedding, m.dict);
  return fine_tune_with_weights(m, reshape(w, {1, m.dict.size()}), create_graph);
}

inline bool fast_adapt_eligible(const MetaModel& m) {
  return m.inner_steps == 1 && m.alpha.mode == InnerLearningRate::Mode::scalar &&
         m.phi.output == Head::Output::dot;
}

namespace detail {

// Batched adapted forward for the fast-path configuration.
//
// With one inner step and a scalar alpha, the per-entry gradient of each
// weight matrix is rank one (delta_j outer a_j from backprop on key j), so
// the adapted pre-activation for query i collapses to
//
//   s_l(i) = W_l y + b_l - alpha * sum_j w_ij (a_j . y) delta_j  -  alpha * sum_j w_ij delta_j
//
// which is three matmuls per layer over the whole batch:
//   (Omega o (Y A_l^T)) D_l  +  Omega D_l.
// A_l holds the key-side activations entering layer l, D_l the key-side
// backprop deltas at layer l; both are built from differentiable ops so the
// outer gradient flows into keys, values, phi, and alpha exactly as it does
// through the reference path.
//
// Returns nullopt when the classification probability clamp would bite (some
// key probability at or below 1e-12): the rank-one gradient algebra assumes
// the clamp is inactive, so those batches take the reference path instead.
inline std::optional<Tensor> adapted_outputs_fast(const MetaModel& m, const Tensor& Z,
                                                  const Tensor& omega) {
  const MLPParams& trunk = m.phi.mlp;
  std::size_t L = trunk.layer_count();

  // Key-side forward, keeping the activations entering every layer and the
  // relu masks of every trunk pre-activation.
  std::vector<Tensor> acts;  // acts[l]: input to layer l, [S, h_l]
  std::vector<Tensor> masks;
  Tensor h = m.dict.keys;
  acts.push_back(h);
  for (std::size_t l = 0; l < L; ++l) {
    Tensor s = add(matmul(h, trunk.weights[l], false, true),
                   reshape(trunk.biases[l], {1, trunk.biases[l].numel()}));
    masks.push_back(positive_mask(s));
    h = relu(s);
    acts.push_back(h);
  }
  Tensor key_out = add(matmul(h, m.phi.dot.w, false, true),
                       reshape(m.phi.dot.b, {1, m.phi.dot.b.numel()}));

  // dL/d(output) per dictionary entry. Classification: p * sum(v~) - v~
  // (the clamp-free cross-entropy gradient); regression: 2 (o - v~) / n_o.
  Tensor targets = m.dict.effective_values();
  Tensor U;
  if (m.task == TaskKind::classification) {
    Tensor probs = softmax_rows(key_out);
    for (double p : probs.data())
      if (p <= 1e-12) return std::nullopt;
    U = sub(mul(probs, sum_dim1(targets)), targets);
  } else {
    U = mul_scalar(sub(key_out, targets), 2.0 / double(targets.cols()));
  }

  // Key-side backprop deltas per layer, descending from the output layer.
  std::vector<Tensor> deltas(L, Tensor::scalar(0.0));
  {
    Tensor d = U;
    Tensor w_above = m.phi.dot.w;
    for (std::size_t l = L; l-- > 0;) {
      d = mul(matmul(d, w_above, false, false), masks[l]);
      deltas[l] = d;
      w_above = trunk.weights[l];
    }
  }

  // Query-side adapted forward. Every layer applies the shared parameters
  // plus the attention-weighted rank-one correction.
  const Tensor& a = m.alpha.values[0];
  Tensor y = Z;
  for (std::size_t l = 0; l < L; ++l) {
    Tensor base = add(matmul(y, trunk.weights[l], false, true),
                      reshape(trunk.biases[l], {1, trunk.biases[l].numel()}));
    Tensor mixed = mul(omega, matmul(y, acts[l], false, true));
    Tensor corr = add(matmul(mixed, deltas[l]), matmul(omega, deltas[l]));
    y = relu(sub(base, mul(corr, a)));
  }
  Tensor base = add(matmul(y, m.phi.dot.w, false, true),
                    reshape(m.phi.dot.b, {1, m.phi.dot.b.numel()}));
  Tensor mixed = mul(omega, matmul(y, acts[L], false, true));
  Tensor corr = add(matmul(mixed, U), matmul(omega, U));
  return sub(base, mul(corr, a));
}

// Reference adapted forward: run fine_tune per query and stack the outputs.
inline Tensor adapted_outputs_reference(const MetaModel& m, const Tensor& Z,
                                        const Tensor& omega, bool create_graph) {
  std::vector<Tensor> rows;
  rows.reserve(Z.rows());
  for (std::size_t i = 0; i < Z.rows(); ++i) {
    Head phi_i = fine_tune_with_weights(m, narrow(omega, 0, i, 1), create_graph);
    rows.push_back(phi_i.forward(narrow(Z, 0, i, 1)));
  }
  return concat(rows, 0);
}

}  // namespace detail

// Adapted raw outputs (logits or values) for a batch of embedded queries,
// [B, n_o]. Dispatches to the fast path when the configuration allows it.
inline Tensor adapted_outputs(const MetaModel& m, const Tensor& Z, bool create_graph = true) {
  Tensor omega = attend_batch(Z, m.dict);
  if (fast_adapt_eligible(m)) {
    auto out = detail::adapted_outputs_fast(m, Z, omega);
    if (out) return *out;
  }
  return detail::adapted_outputs_reference(m, Z, omega, create_graph);
}

// Force the per-query path regardless of configuration; the fast path is
// tested against this.
inline Tensor outer_loss_reference(const MetaModel& m, const TaskBatch& batch) {
  Tensor Z = embed(m, batch.inputs);
  Tensor omega = attend_batch(Z, m.dict);
  Tensor out = detail::adapted_outputs_reference(m, Z, omega, true);
  Tensor pred = m.task == TaskKind::classification ? softmax_rows(out) : out;
  return supervised_loss(pred, batch.labels, m.task);
}

// Mean supervised loss of the per-query adapted heads on the batch:
// (1/B) sum_i L(f_{phi_i}(z_i), y_i). This is the quantity the outer loop
// minimizes; its gradient reaches every parameter group.
inline Tensor outer_loss(const MetaModel& m, const TaskBatch& batch) {
  Tensor Z = embed(m, batch.inputs);
  Tensor out = adapted_outputs(m, Z, true);
  Tensor pred = m.task == TaskKind::classification ? softmax_rows(out) : out;
  return supervised_loss(pred, batch.labels, m.task);
}

// Plain (unadapted) forward, the vanilla baseline: the shared phi on the
// extractor's features, no dictionary involvement.
inline Tensor vanilla_outputs(const MetaModel& m, const Tensor& inputs) {
  return m.phi.forward(embed(m, inputs));
}

inline Tensor vanilla_loss(const MetaModel& m, const TaskBatch& batch) {
  Tensor out = vanilla_outputs(m, batch.inputs);
  Tensor pred = m.task == TaskKind::classification ? softmax_rows(out) : out;
  return supervised_loss(pred, batch.labels, m.task);
}

// Auxiliary co-training loss: the untuned head xi applied to the same
// features, against the true labels. Gradient touches theta and xi only.
inline Tensor auxiliary_loss(const MetaModel& m, const TaskBatch& batch) {
  if (!m.xi) throw std::invalid_argument("auxiliary_loss: model has no auxiliary head");
  Tensor out = m.xi->forward(embed(m, batch.inputs));
  Tensor pred = m.task == TaskKind::classification ? softmax_rows(out) : out;
  return supervised_loss(pred, batch.labels, m.task);
}

// outer + lambda * auxiliary. With lambda = 0 or no auxiliary head this is
// exactly the outer loss.
inline Tensor total_loss(const MetaModel& m, const TaskBatch& batch) {
  Tensor loss = outer_loss(m, batch);
  if (m.xi && m.lambda != 0.0)
    loss = add(loss, mul_scalar(auxiliary_loss(m, batch), m.lambda));
  return loss;
}

// Predictions for a batch of raw inputs: probabilities [B, C] for
// classification, values [B, n_o] for regression. Adapts per query against
// the frozen dictionary; the model is never mutated, so repeated calls give
// byte-identical results.
inline Tensor predict(const MetaModel& m, const Tensor& inputs) {
  if (fast_adapt_eligible(m)) {
    // The fast path calls gradient() nowhere, so the whole evaluation can run
    // without recording a graph.
    NoGradGuard ng;
    Tensor Z = embed(m, inputs);
    Tensor omega = attend_batch(Z, m.dict);
    auto out = detail::adapted_outputs_fast(m, Z, omega);
    if (out) return m.task == TaskKind::classification ? softmax_rows(*out) : *out;
  }
  Tensor Z = embed(m, inputs);
  Tensor out = adapted_outputs(m, Z, /*create_graph=*/false);
  Tensor pred = m.task == TaskKind::classification ? softmax_rows(out) : out;
  return pred.detach();
}

inline Tensor predict_vanilla(const MetaModel& m, const Tensor& inputs) {
  NoGradGuard ng;
  Tensor out = vanilla_outputs(m, inputs);
  return m.task == TaskKind::classification ? softmax_rows(out) : out;
}

// How much per-query tuning rotates the cosine head toward the true class:
// cos(h_i, w_{y_i}) under the shared phi versus under the adapted phi_i,
// where h_i is the representation entering the cosine layer. Requires a
// cosine output head and classification labels.
struct SimilarityShift {
  double before = 0.0;
  double after = 0.0;
};

inline std::vector<SimilarityShift> similarity_shift_report(const MetaModel& m,
                                                            const Tensor& inputs,
                                                            const Tensor& labels) {
  if (m.phi.output != Head::Output::cosine)
    throw std::invalid_argument("similarity_shift_report: needs a cosine output head");
  if (m.task != TaskKind::classification)
    throw std::invalid_argument("similarity_shift_report: classification models only");
  if (inputs.rank() != 2 || labels.rank() != 2 || inputs.rows() != labels.rows())
    throw ShapeError("similarity_shift_report: inputs " + shape_str(inputs.shape()) +
                     " vs labels " + shape_str(labels.shape()));

  Tensor Z = embed(m, inputs);
  Tensor omega = attend_batch(Z, m.dict);
  std::vector<SimilarityShift> report(inputs.rows());
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    Tensor z_i = narrow(Z, 0, i, 1);
    const double* lab = labels.data().data() + i * labels.cols();
    std::size_t y = argmax(lab, labels.cols());

    Head phi_i = fine_tune_with_weights(m, narrow(omega, 0, i, 1), /*create_graph=*/false);
    Tensor before = cosine_logits(m.phi.cosine, m.phi.mlp.forward(z_i));
    Tensor after = cosine_logits(phi_i.cosine, phi_i.mlp.forward(z_i));
    report[i].before = before.data()[y];
    report[i].after = after.data()[y];
  }
  return report;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  std::string optimizer = "adamw";  // "adamw" or "sgd"
  double lr = 1e-3;
  double weight_decay = 7.5e-5;
  double momentum = 0.0;            // sgd only
  std::size_t lr_drop_epoch = 0;    // 1-based epoch at which lr is divided by 10; 0 = never
  std::size_t early_stop_patience = 0;  // epochs without val improvement; 0 = off
  std::uint64_t seed = 0;
  bool vanilla = false;             // train the plain baseline, no dictionary
  bool decay_dict_values = false;   // include dictionary values in weight decay
  bool decay_alpha = false;         // include inner step sizes in weight decay
};

struct EpochMetrics {
  std::size_t epoch = 0;      // 1-based
  double train_loss = 0.0;    // mean of batch losses
  double val_loss = 0.0;
  double val_metric = 0.0;    // accuracy for classification, mse for regression
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;  // 1-based, 0 when no epochs ran
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;
// Called after every optimizer step with the 1-based global step count;
// lets callers sample parameter trajectories mid-epoch.
using StepCallback = std::function<void(std::size_t)>;

namespace detail {

// Flat parameter list for the optimizer. Vanilla mode trains only the
// extractor and head; meta mode adds the dictionary and step sizes, plus the
// auxiliary head when it participates in the loss.
inline std::vector<OptimParam> trainable_params(const MetaModel& m, const TrainConfig& cfg) {
  std::vector<OptimParam> out;
  auto push = [&](const std::vector<Tensor>& ts, bool exempt) {
    for (const auto& t : ts) out.push_back({t, exempt});
  };
  push(m.theta.params(), false);
  push(m.phi.params(), false);
  if (!cfg.vanilla) {
    if (m.xi && m.lambda != 0.0) push(m.xi->params(), false);
    push({m.dict.keys}, false);
    push({m.dict.values}, !cfg.decay_dict_values);
    push(m.alpha.params(), !cfg.decay_alpha);
  }
  return out;
}

inline double accuracy(const Tensor& probs, const Tensor& labels) {
  std::size_t n = probs.rows(), c = probs.cols(), hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t p = argmax(probs.data().data() + i * c, c);
    std::size_t y = argmax(labels.data().data() + i * c, c);
    if (p == y) ++hits;
  }
  return n == 0 ? 0.0 : double(hits) / double(n);
}

// Validation predictions in batch_size chunks so the reference path never
// builds one giant graph.
inline Tensor predict_chunked(const MetaModel& m, const Tensor& inputs, std::size_t chunk,
                              bool vanilla) {
  std::size_t n = inputs.rows();
  if (chunk == 0 || chunk >= n)
    return vanilla ? predict_vanilla(m, inputs) : predict(m, inputs);
  std::vector<double> all;
  all.reserve(n * m.phi.out_dim());
  std::size_t cols = 0;
  for (std::size_t at = 0; at < n; at += chunk) {
    std::size_t len = std::min(chunk, n - at);
    Tensor part = narrow(inputs, 0, at, len).detach();
    Tensor pred = vanilla ? predict_vanilla(m, part) : predict(m, part);
    cols = pred.cols();
    all.insert(all.end(), pred.data().begin(), pred.data().end());
  }
  return Tensor::from_data({n, cols}, std::move(all));
}

struct ParamSnapshot {
  std::vector<std::vector<double>> data;

  static ParamSnapshot take(const MetaModel& m) {
    ParamSnapshot s;
    for (const auto& [name, ts] : m.param_groups())
      for (const auto& t : ts) s.data.push_back(t.data());
    return s;
  }

  void restore(MetaModel& m) const {
    std::size_t i = 0;
    auto groups = m.param_groups();
    for (auto& [name, ts] : groups)
      for (auto& t : ts) t.set_data(data[i++]);
  }
};

}  // namespace detail

// End-to-end training: minibatch outer updates over all parameter groups with
// a shared learning rate, an optional single 10x lr drop, and optional early
// stopping that restores the best validation snapshot. Deterministic for a
// fixed config and data. Throws NumericError if the loss leaves the finite
// range (the optimizer additionally rejects non-finite gradients).
inline TrainResult train(MetaModel& m, const Dataset& train_set, const Dataset& val_set,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = nullptr,
                         const StepCallback& on_step = nullptr) {
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (train_set.task != m.task || val_set.task != m.task)
    throw std::invalid_argument("train: dataset task does not match the model");

  if (cfg.optimizer != "adamw" && cfg.optimizer != "sgd")
    throw std::invalid_argument("train: unknown optimizer '" + cfg.optimizer + "'");
  std::vector<OptimParam> params = detail::trainable_params(m, cfg);
  std::variant<AdamW, SGD> opt =
      cfg.optimizer == "sgd"
          ? std::variant<AdamW, SGD>(std::in_place_type<SGD>,
                                     SGDConfig{cfg.lr, cfg.momentum}, params)
          : std::variant<AdamW, SGD>(
                std::in_place_type<AdamW>,
                AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}, params);

  std::vector<Tensor> leaves;
  for (const auto& p : params) leaves.push_back(p.value);

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  detail::ParamSnapshot best;
  std::size_t since_best = 0;
  std::size_t global_step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.lr_drop_epoch > 0 && epoch == cfg.lr_drop_epoch)
      std::visit([&](auto& o) { o.set_lr(cfg.lr / 10.0); }, opt);

    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      std::size_t len = std::min(cfg.batch_size, order.size() - at);
      std::vector<std::size_t> rows(order.begin() + long(at), order.begin() + long(at + len));
      Dataset chunk = subset(train_set, rows);
      TaskBatch batch{chunk.inputs, chunk.labels};

      Tensor loss = cfg.vanilla ? vanilla_loss(m, batch) : total_loss(m, batch);
      double value = loss.item();
      if (!std::isfinite(value))
        throw NumericError("train: loss diverged at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batches + 1) + " (loss=" +
                           std::to_string(value) + ")");
      std::vector<Tensor> grads = gradient(loss, leaves);
      std::visit([&](auto& o) { o.step(grads); }, opt);
      loss_sum += value;
      ++batches;
      ++global_step;
      if (on_step) on_step(global_step);
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / double(batches);
    em.lr = std::visit([](const auto& o) { return o.lr(); }, opt);
    Tensor val_pred = detail::predict_chunked(m, val_set.inputs, cfg.batch_size, cfg.vanilla);
    em.val_loss = supervised_loss(val_pred, val_set.labels, m.task).item();
    em.val_metric = m.task == TaskKind::classification
                        ? detail::accuracy(val_pred, val_set.labels)
                        : em.val_loss;
    result.history.push_back(em);
    if (on_epoch) on_epoch(em);

    if (result.best_epoch == 0 || em.val_loss < result.best_val_loss) {
      result.best_epoch = epoch;
      result.best_val_loss = em.val_loss;
      since_best = 0;
      if (cfg.early_stop_patience > 0) best = detail::ParamSnapshot::take(m);
    } else if (cfg.early_stop_patience > 0) {
      if (++since_best >= cfg.early_stop_patience) {
        result.stopped_early = true;
        break;
      }
    }
  }

  if (cfg.early_stop_patience > 0 && result.best_epoch > 0 &&
      result.best_epoch < result.history.back().epoch)
    best.restore(m);
  return result;
}

}  // namespace metanb
