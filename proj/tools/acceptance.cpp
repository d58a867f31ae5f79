// Acceptance gate: eight end-to-end checks, one verdict line each.
//
// Every check drives the library through the same entry points the CLI uses
// (run_train, run_eval, run_sweep) or through hand-written oracles (finite
// differences, longhand optimizer arithmetic, brute-force kNN), and prints
// exactly one line:
//
//   <id> PASS  <what was measured, against which bound>
//   <id> FAIL  <which bound broke, with the numbers>
//   <id> SKIP  <what is missing and how to supply it>
//
// The two regression-table checks need external data files and skip with
// instructions when those are absent; everything else is self-contained and
// deterministic. Exit status 0 means no check failed (skips are allowed),
// 1 means at least one failed.
//
//   acceptance [--data DIR] [--only IDS]
//
// Expect roughly five minutes end to end: the spiral check trains six full
// models and the sweep check eighteen.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metanb/config.hpp"
#include "metanb/meta.hpp"
#include "metanb/runner.hpp"

using namespace metanb;

namespace {

// ---------------------------------------------------------------------------
// Reporting

struct Gate {
  int passed = 0, failed = 0, skipped = 0;

  void pass(const char* id, const std::string& detail) {
    std::printf("%-2s PASS  %s\n", id, detail.c_str());
    std::fflush(stdout);
    ++passed;
  }
  void fail(const char* id, const std::string& detail) {
    std::printf("%-2s FAIL  %s\n", id, detail.c_str());
    std::fflush(stdout);
    ++failed;
  }
  void skip(const char* id, const std::string& detail) {
    std::printf("%-2s SKIP  %s\n", id, detail.c_str());
    std::fflush(stdout);
    ++skipped;
  }
};

std::string fmt(const char* f, ...) {
  va_list args;
  va_start(args, f);
  char buf[1024];
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

struct Elapsed {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// ---------------------------------------------------------------------------
// 1. Spiral expressivity gain
//
// A two-turn two-class spiral is far beyond a linear decision boundary, yet
// per-query tuning of that same linear head against a 200-entry dictionary
// recovers it. 500 train + 500 test points per class (the generator emits
// 1000 per class; half become the test split), noise 0.1, three seeds.

RunConfig spiral_config(std::uint64_t seed, bool vanilla) {
  RunConfig c;
  c.task = "classification";
  c.seed = seed;
  c.vanilla = vanilla;
  c.data.n_per_class = 1000;
  c.data.noise_std = 0.1;
  c.data.turns = 2.0;
  c.data.test_fraction = 0.5;
  c.data.val_fraction = 0.1;
  c.model.dict_size = 200;
  c.model.gamma = 5.0;
  c.model.metric = "euclidean";
  c.model.alpha_init = 0.5;
  c.optim.lr = 0.01;
  c.optim.epochs = 1000;
  c.optim.batch_size = 32;
  c.optim.lr_drop_epoch = 750;
  return c;
}

void check_spiral_gain(Gate& g, const std::string& scratch) {
  Elapsed t;
  std::vector<double> adapted, linear;
  for (std::uint64_t seed : {1, 2, 3}) {
    adapted.push_back(
        run_train(spiral_config(seed, false), scratch + "/c1_mn" + std::to_string(seed))
            .mean_metric);
    linear.push_back(
        run_train(spiral_config(seed, true), scratch + "/c1_lin" + std::to_string(seed))
            .mean_metric);
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
  };
  double ma = mean(adapted), ml = mean(linear), secs = t.seconds();
  std::string detail = fmt(
      "two-turn spiral, linear head: adapted mean accuracy %.4f over 3 seeds "
      "(%.3f/%.3f/%.3f, need >= 0.95), plain linear %.4f (need <= 0.60), %.0fs (need < 300)",
      ma, adapted[0], adapted[1], adapted[2], ml, secs);
  if (ma >= 0.95 && ml <= 0.60 && secs < 300.0)
    g.pass("1", detail);
  else
    g.fail("1", detail);
}

// ---------------------------------------------------------------------------
// 2. Regression tables
//
// 5-fold CV with the published recipe: 3-layer 128-wide head, S=1000,
// gamma=10, AdamW, early stop after 10 stale epochs. Compares the adapted
// model's mean MSE against the vanilla baseline on the same folds and against
// an absolute band. Needs the data tables on disk; standardized-label MSE, so
// the bands are scale-free.

std::size_t count_columns(const std::string& path, char delim) {
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) return std::size_t(std::count(line.begin(), line.end(), delim)) + 1;
  return 0;
}

RunConfig table_config(const std::string& path, std::size_t n_labels, std::uint64_t seed,
                       bool vanilla) {
  std::size_t cols = count_columns(path, ',');
  RunConfig c;
  c.task = "regression";
  c.seed = seed;
  c.vanilla = vanilla;
  c.data.source = "file";
  c.data.path = path;
  for (std::size_t i = cols - n_labels; i < cols; ++i) c.data.label_columns.push_back(i);
  c.data.folds = 5;
  c.model.head_hidden = {128, 128};
  c.model.dict_size = 1000;
  c.model.gamma = 10.0;
  c.model.metric = "euclidean";
  c.optim.epochs = 200;
  c.optim.batch_size = 128;
  c.optim.early_stop_patience = 10;
  return c;
}

void check_regression_table(Gate& g, const char* id, const std::string& path,
                            std::size_t n_labels, std::size_t want_n, std::size_t want_d,
                            double lo, double hi, const std::string& scratch) {
  if (!std::filesystem::exists(path)) {
    g.skip(id, fmt("regression table missing: place a comma-delimited file with the features "
                   "followed by %zu label column%s at %s and re-run",
                   n_labels, n_labels == 1 ? "" : "s", path.c_str()));
    return;
  }
  RunConfig mn = table_config(path, n_labels, 1, false);
  Dataset raw = build_raw_dataset(mn);
  if (want_n != 0 && (raw.size() != want_n || raw.dim() != want_d)) {
    g.skip(id, fmt("%s has %zu rows x %zu features, the published table is %zu x %zu; "
                   "bands do not transfer, not judging",
                   path.c_str(), raw.size(), raw.dim(), want_n, want_d));
    return;
  }
  Elapsed t;
  double ours = run_train(mn, scratch + "/" + id + "_mn").mean_metric;
  double vanilla =
      run_train(table_config(path, n_labels, 1, true), scratch + "/" + id + "_v").mean_metric;
  std::string detail =
      fmt("%s 5-fold CV: adapted mean MSE %.4f vs vanilla %.4f (need <), band [%.3f, %.3f], "
          "%.0fs",
          std::filesystem::path(path).filename().c_str(), ours, vanilla, lo, hi, t.seconds());
  if (ours < vanilla && ours >= lo && ours <= hi)
    g.pass(id, detail);
  else
    g.fail(id, detail);
}

// ---------------------------------------------------------------------------
// 3. Full pipeline with auxiliary co-training
//
// Spiral lifted through a trained extractor into an 16-d feature space, cosine
// output head, auxiliary head at lambda=1. The adapted model must not trail
// the vanilla baseline by more than half a point, and per-query tuning must
// rotate the class weight toward the query for most test samples (the
// similarity-shift report).

RunConfig aux_config(std::uint64_t seed, bool vanilla) {
  RunConfig c;
  c.task = "classification";
  c.seed = seed;
  c.vanilla = vanilla;
  c.data.n_per_class = 300;
  c.data.noise_std = 0.1;
  c.data.turns = 1.5;
  c.data.test_fraction = 0.3;
  c.data.val_fraction = 0.1;
  c.model.extractor = {2, 32, 16};
  c.model.output = "cosine";
  c.model.dict_size = 100;
  c.model.gamma = 5.0;
  c.model.metric = "euclidean";
  c.model.alpha_init = 0.5;
  c.model.lambda = 1.0;
  c.optim.lr = 0.003;
  c.optim.epochs = 300;
  c.optim.batch_size = 32;
  c.optim.lr_drop_epoch = 225;
  return c;
}

void check_aux_pipeline(Gate& g, const std::string& scratch) {
  Elapsed t;
  TrainOutcome mn = run_train(aux_config(1, false), scratch + "/c3_mn");
  TrainOutcome vn = run_train(aux_config(1, true), scratch + "/c3_v");
  EvalOptions opt;
  opt.model_path = mn.folds[0].artifact;
  opt.similarity_report = true;
  EvalOutcome ev = run_eval(aux_config(1, false), opt, scratch + "/c3_eval");
  std::string detail = fmt(
      "extractor + cosine head + auxiliary loss (lambda=1): adapted accuracy %.4f vs vanilla "
      "%.4f (need >= vanilla - 0.005); similarity shift improved for %.1f%% of test samples "
      "(need >= 60%%), %.0fs",
      mn.mean_metric, vn.mean_metric, 100.0 * ev.improved_fraction, t.seconds());
  if (mn.mean_metric >= vn.mean_metric - 0.005 && ev.improved_fraction >= 0.60)
    g.pass("3", detail);
  else
    g.fail("3", detail);
}

// ---------------------------------------------------------------------------
// 4. Bilevel gradient oracle
//
// Twenty-four small random models (both tasks, both attention metrics, both
// step-size modes, one to three inner steps, dot and cosine outputs, with and
// without extractor / hidden layer / auxiliary head), each under 200
// parameters. The analytic gradient of the full training loss must match
// central finite differences on every element of every parameter group.

struct TinySpec {
  TaskKind task = TaskKind::classification;
  Metric metric = Metric::euclidean;
  InnerLearningRate::Mode alpha_mode = InnerLearningRate::Mode::scalar;
  std::size_t inner_steps = 1;
  Head::Output output = Head::Output::dot;
  bool extractor = false;
  bool trunk = false;
  double lambda = 0.0;
};

std::pair<MetaModel, TaskBatch> tiny_model(const TinySpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 0.6);

  const std::size_t d = 3, B = 3;
  std::size_t n_o = spec.task == TaskKind::classification ? 2 : 1;

  MetaModel m;
  m.task = spec.task;
  m.inner_steps = spec.inner_steps;
  m.lambda = spec.lambda;
  m.theta = spec.extractor ? MLPParams::create({d, d}, false, seed + 1)
                           : MLPParams::create({d}, false, seed + 1);
  std::vector<std::size_t> dims =
      spec.trunk ? std::vector<std::size_t>{d, 4, n_o} : std::vector<std::size_t>{d, n_o};
  m.phi = Head::create(dims, spec.output, seed + 2);
  if (spec.lambda != 0.0) m.xi = Head::create(dims, spec.output, seed + 3);

  ValueMode vm = spec.task == TaskKind::classification ? ValueMode::soft_label : ValueMode::raw;
  m.dict = init_dictionary(4, d, n_o, seed + 4, spec.metric, 2.0, vm);
  // spread the keys so attention rows are far from uniform
  std::vector<double> k(m.dict.keys.numel());
  for (auto& v : k) v = gauss(rng);
  m.dict.keys.set_data(k);

  m.alpha = spec.alpha_mode == InnerLearningRate::Mode::scalar
                ? InnerLearningRate::scalar(0.08)
                : InnerLearningRate::diagonal(m.phi.params(), 0.08);
  if (spec.alpha_mode == InnerLearningRate::Mode::diagonal) {
    std::uniform_real_distribution<double> u(0.02, 0.15);
    for (auto& t : m.alpha.values) {
      std::vector<double> a(t.numel());
      for (auto& v : a) v = u(rng);
      t.set_data(a);
    }
  }

  std::vector<double> x(B * d), y(B * n_o, 0.0);
  for (auto& v : x) v = gauss(rng);
  if (spec.task == TaskKind::classification) {
    std::uniform_int_distribution<std::size_t> cls(0, n_o - 1);
    for (std::size_t i = 0; i < B; ++i) y[i * n_o + cls(rng)] = 1.0;
  } else {
    for (auto& v : y) v = gauss(rng);
  }
  TaskBatch batch{Tensor::from_data({B, d}, std::move(x)),
                  Tensor::from_data({B, n_o}, std::move(y))};
  return {std::move(m), std::move(batch)};
}

void check_gradient_oracle(Gate& g) {
  std::vector<TinySpec> specs = {
      {TaskKind::classification, Metric::euclidean, InnerLearningRate::Mode::scalar, 1,
       Head::Output::dot, true, false, 0.0},
      {TaskKind::classification, Metric::euclidean, InnerLearningRate::Mode::scalar, 1,
       Head::Output::dot, false, true, 0.0},
      {TaskKind::regression, Metric::euclidean, InnerLearningRate::Mode::scalar, 1,
       Head::Output::dot, false, true, 0.0},
      {TaskKind::classification, Metric::cosine, InnerLearningRate::Mode::diagonal, 3,
       Head::Output::dot, true, false, 0.0},
      {TaskKind::classification, Metric::cosine, InnerLearningRate::Mode::scalar, 1,
       Head::Output::cosine, true, false, 0.7},
      {TaskKind::regression, Metric::euclidean, InnerLearningRate::Mode::diagonal, 2,
       Head::Output::dot, false, true, 0.0},
  };

  std::size_t models = 0;
  double worst = 0.0;
  const double h = 1e-5, rtol = 1e-4, atol = 1e-6;
  for (const TinySpec& spec : specs) {
    for (std::uint64_t seed : {11, 23, 37, 59}) {
      auto [m, batch] = tiny_model(spec, seed);
      std::vector<Tensor> leaves;
      std::size_t n_params = 0;
      for (const auto& [name, ts] : m.param_groups())
        for (const auto& t : ts) {
          leaves.push_back(t);
          n_params += t.numel();
        }
      if (n_params > 200) {
        g.fail("4", fmt("oracle model %zu has %zu parameters, wanted <= 200", models, n_params));
        return;
      }

      std::vector<Tensor> analytic = gradient(total_loss(m, batch), leaves);
      for (std::size_t t = 0; t < leaves.size(); ++t) {
        Tensor leaf = leaves[t];
        const std::vector<double> base = leaf.data();
        std::vector<double> probe = base;
        for (std::size_t i = 0; i < base.size(); ++i) {
          probe[i] = base[i] + h;
          leaf.set_data(probe);
          double up = total_loss(m, batch).item();
          probe[i] = base[i] - h;
          leaf.set_data(probe);
          double down = total_loss(m, batch).item();
          probe[i] = base[i];
          leaf.set_data(probe);
          double numeric = (up - down) / (2.0 * h);
          double a = analytic[t].data()[i];
          double scale = std::max(std::abs(a), std::abs(numeric));
          if (std::abs(a - numeric) > atol + rtol * scale) {
            g.fail("4", fmt("model %zu tensor %zu elem %zu: analytic %.8g vs finite "
                            "differences %.8g (rtol 1e-4)",
                            models, t, i, a, numeric));
            return;
          }
          if (scale > 1e-3) worst = std::max(worst, std::abs(a - numeric) / scale);
        }
      }
      ++models;
    }
  }
  g.pass("4", fmt("analytic gradients on %zu random models (all parameter groups, both tasks, "
                  "metrics, step-size modes, 1-3 inner steps) match central differences; worst "
                  "relative error %.2e (need <= 1e-4)",
                  models, worst));
}

// ---------------------------------------------------------------------------
// 5. kNN equivalence
//
// The constant estimator fitted to a neighborhood must reproduce classical
// kNN prediction bit for bit, and grinding out the same fit by gradient
// descent on the neighborhood's squared loss must land on the same constant.

void check_knn_equivalence(Gate& g) {
  std::mt19937_64 rng(2026);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::size_t exact = 0;
  double worst_iter = 0.0;
  const std::size_t trials = 1000;

  for (std::size_t trial = 0; trial < trials; ++trial) {
    std::uniform_int_distribution<std::size_t> nd(8, 40), dd(1, 5), od(1, 3);
    std::size_t n = nd(rng), d = dd(rng), n_o = od(rng);
    std::uniform_int_distribution<std::size_t> kd(1, std::min<std::size_t>(8, n - 1));
    std::size_t k = kd(rng);

    std::vector<double> xs(n * d), ys(n * n_o), q(d);
    for (auto& v : xs) v = gauss(rng);
    for (auto& v : ys) v = gauss(rng);
    for (auto& v : q) v = gauss(rng);
    Tensor X = Tensor::from_data({n, d}, std::move(xs));
    Tensor Y = Tensor::from_data({n, n_o}, std::move(ys));

    Neighborhood nb = knn_search(q, X, Y, k, Metric::euclidean);
    std::vector<double> knn = knn_predict(nb, TaskKind::regression);
    std::vector<double> fit = constant_estimator_solution(nb);
    if (knn == fit) ++exact;

    // gradient descent on (1/k) sum_j |C - zeta_j|^2 from C = 0
    std::vector<double> c(n_o, 0.0);
    for (int step = 0; step < 120; ++step) {
      std::vector<double> grad(n_o, 0.0);
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t o = 0; o < n_o; ++o)
          grad[o] += 2.0 * (c[o] - nb.labels[j * n_o + o]) / double(k);
      for (std::size_t o = 0; o < n_o; ++o) c[o] -= 0.25 * grad[o];
    }
    for (std::size_t o = 0; o < n_o; ++o)
      worst_iter = std::max(worst_iter, std::abs(c[o] - fit[o]));
  }

  std::string detail = fmt(
      "constant estimator == kNN prediction bitwise on %zu/%zu random neighborhoods; iterative "
      "minimization lands within %.2e of the closed form (need <= 1e-8)",
      exact, trials, worst_iter);
  if (exact == trials && worst_iter <= 1e-8)
    g.pass("5", detail);
  else
    g.fail("5", detail);
}

// ---------------------------------------------------------------------------
// 6. Collapse and invariance suite
//
// Five structural facts, all cheap: a zero inner step size makes adaptation
// a no-op bit for bit; attention rows are proper distributions and follow
// entry permutations; cosine logits ignore feature magnitude; predict leaves
// the model artifact byte-identical; a fixed seed reproduces a training run
// bit for bit.

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double std_dev = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, std_dev);
  std::vector<double> v(r * c);
  for (auto& x : v) x = gauss(rng);
  return Tensor::from_data({r, c}, std::move(v));
}

RunConfig toy_config(std::uint64_t seed) {
  RunConfig c;
  c.task = "classification";
  c.seed = seed;
  c.data.n_per_class = 120;
  c.data.noise_std = 0.05;
  c.data.turns = 1.0;
  c.model.head_hidden = {8};
  c.model.dict_size = 24;
  c.model.gamma = 5.0;
  c.model.metric = "euclidean";
  c.optim.lr = 0.01;
  c.optim.epochs = 30;
  c.optim.batch_size = 32;
  return c;
}

bool alpha_zero_collapses(std::string& why) {
  TinySpec dot_spec{TaskKind::classification, Metric::euclidean,
                    InnerLearningRate::Mode::scalar, 1, Head::Output::dot, true, true, 0.0};
  TinySpec cos_spec{TaskKind::classification, Metric::cosine,
                    InnerLearningRate::Mode::diagonal, 3, Head::Output::cosine, true, false, 0.0};
  for (const TinySpec& spec : {dot_spec, cos_spec}) {
    auto [m, batch] = tiny_model(spec, 17);
    for (auto& t : m.alpha.values) t.set_data(std::vector<double>(t.numel(), 0.0));
    Tensor adapted = predict(m, batch.inputs);
    Tensor vanilla = predict_vanilla(m, batch.inputs);
    if (adapted.data() != vanilla.data()) {
      why = "alpha=0 output differs from the vanilla forward";
      return false;
    }
  }
  return true;
}

bool attention_is_distribution(std::string& why) {
  Tensor keys = random_matrix(7, 4, 91);
  Tensor queries = random_matrix(5, 4, 92);
  std::vector<std::size_t> perm = {3, 0, 6, 1, 5, 2, 4};
  std::vector<double> permuted(7 * 4);
  for (std::size_t j = 0; j < 7; ++j)
    for (std::size_t c = 0; c < 4; ++c) permuted[perm[j] * 4 + c] = keys.data()[j * 4 + c];
  Tensor keys_perm = Tensor::from_data({7, 4}, permuted);

  for (Metric metric : {Metric::euclidean, Metric::cosine}) {
    Tensor w = attention_weights(queries, keys, metric, 2.5);
    Tensor wp = attention_weights(queries, keys_perm, metric, 2.5);
    for (std::size_t i = 0; i < 5; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) sum += w.data()[i * 7 + j];
      if (std::abs(sum - 1.0) > 1e-9) {
        why = fmt("%s attention row sums to %.12f", to_string(metric).c_str(), sum);
        return false;
      }
      for (std::size_t j = 0; j < 7; ++j)
        if (std::abs(w.data()[i * 7 + j] - wp.data()[i * 7 + perm[j]]) > 1e-12) {
          why = "attention weights do not follow an entry permutation";
          return false;
        }
    }
  }
  return true;
}

bool cosine_scale_invariant(std::string& why) {
  CosineHead head = CosineHead::create(6, 3, 93);
  Tensor z = random_matrix(5, 6, 94);
  Tensor base = cosine_logits(head, z);
  for (double scale : {37.5, 1e-3}) {
    Tensor scaled = cosine_logits(head, mul_scalar(z, scale));
    for (std::size_t i = 0; i < base.numel(); ++i)
      if (std::abs(base.data()[i] - scaled.data()[i]) > 1e-9) {
        why = fmt("cosine logit moved by %.2e when features scaled by %g",
                  std::abs(base.data()[i] - scaled.data()[i]), scale);
        return false;
      }
  }
  return true;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

bool predict_side_effect_free(std::string& why, const std::string& scratch) {
  RunConfig c = toy_config(7);
  TrainOutcome out = run_train(c, scratch + "/c6_model");
  MetaModel m = load_model(out.folds[0].artifact);
  std::string before = model_to_string(m);
  Dataset raw = build_raw_dataset(c);
  for (int i = 0; i < 3; ++i) predict(m, raw.inputs);
  if (model_to_string(m) != before) {
    why = "predict changed the serialized model";
    return false;
  }
  save_model(m, scratch + "/c6_model/after.json");
  if (slurp(scratch + "/c6_model/after.json") != slurp(out.folds[0].artifact)) {
    why = "artifact bytes changed across a load/predict/save round trip";
    return false;
  }
  return true;
}

// metrics.jsonl minus the wall-clock line, the only timing-dependent record
std::string metrics_without_timing(const std::string& path) {
  std::istringstream in(slurp(path));
  std::string line, out;
  while (std::getline(in, line))
    if (line.find("\"record\":\"done\"") == std::string::npos) out += line + "\n";
  return out;
}

bool fixed_seed_reproduces(std::string& why, const std::string& scratch) {
  TrainOutcome a = run_train(toy_config(11), scratch + "/c6_rep_a");
  TrainOutcome b = run_train(toy_config(11), scratch + "/c6_rep_b");
  if (metrics_without_timing(a.metrics_path) != metrics_without_timing(b.metrics_path)) {
    why = "metrics differ between two runs of the same seed";
    return false;
  }
  if (slurp(a.folds[0].artifact) != slurp(b.folds[0].artifact)) {
    why = "model artifacts differ between two runs of the same seed";
    return false;
  }
  return true;
}

void check_invariances(Gate& g, const std::string& scratch) {
  std::string why;
  if (!alpha_zero_collapses(why) || !attention_is_distribution(why) ||
      !cosine_scale_invariant(why) || !predict_side_effect_free(why, scratch) ||
      !fixed_seed_reproduces(why, scratch)) {
    g.fail("6", why);
    return;
  }
  g.pass("6", "alpha=0 equals vanilla bitwise; attention rows sum to 1 (1e-9) and follow entry "
              "permutations; cosine logits scale-invariant (1e-9); predict leaves artifact "
              "bytes unchanged; fixed seed reproduces metrics and artifact bit for bit");
}

// ---------------------------------------------------------------------------
// 7. Optimizer arithmetic
//
// AdamW against the update recurrences written out longhand, three steps on a
// scalar, then the decoupled-decay facts: zero gradient shrinks a parameter
// by exactly lr*wd*p, and decay-exempt parameters do not move at all.

void check_optimizer_trace(Gate& g) {
  const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const std::vector<double> gs = {0.3, -1.2, 0.7};

  Tensor p = Tensor::param({1}, {0.5});
  AdamW opt({.lr = lr, .beta1 = b1, .beta2 = b2, .eps = eps, .weight_decay = 0.0}, {{p, false}});
  double ref = 0.5, m = 0.0, v = 0.0, worst = 0.0;
  for (int t = 1; t <= 3; ++t) {
    double grad = gs[t - 1];
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad * grad;
    ref -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    opt.step({Tensor::from_data({1}, {grad})});
    worst = std::max(worst, std::abs(p.at(0) - ref));
  }
  if (worst > 1e-12) {
    g.fail("7", fmt("AdamW drifts %.2e from the hand trace (need <= 1e-12)", worst));
    return;
  }

  Tensor a = Tensor::param({1}, {4.0});
  Tensor b = Tensor::param({1}, {4.0});
  AdamW decay({.lr = 1e-2, .weight_decay = 0.1}, {{a, false}, {b, true}});
  decay.step({Tensor::zeros({1}), Tensor::zeros({1})});
  if (a.at(0) != 4.0 - 1e-2 * 0.1 * 4.0 || b.at(0) != 4.0) {
    g.fail("7", fmt("decoupled decay wrong: decayed parameter %.17g (want %.17g), exempt %.17g "
                    "(want 4)",
                    a.at(0), 4.0 - 1e-2 * 0.1 * 4.0, b.at(0)));
    return;
  }
  g.pass("7", fmt("AdamW three-step scalar trace within %.2e of hand arithmetic (need <= "
                  "1e-12); zero-gradient step decays by exactly lr*wd*p and exempt parameters "
                  "hold still",
                  worst));
}

// ---------------------------------------------------------------------------
// 8. Ablation trends
//
// Dictionary capacity should help monotonically on a task that needs it, and
// attention sharpness should have a sweet spot: too diffuse shares one head
// across the whole plane, too sharp reduces every query to a single entry.

RunConfig ablation_config() {
  RunConfig c;
  c.task = "classification";
  c.seed = 1;
  c.data.n_per_class = 250;
  c.data.noise_std = 0.1;
  c.data.turns = 2.0;
  c.data.test_fraction = 0.3;
  c.data.val_fraction = 0.1;
  c.model.dict_size = 200;
  c.model.gamma = 5.0;
  c.model.metric = "euclidean";
  c.model.alpha_init = 0.5;
  c.optim.lr = 0.01;
  c.optim.epochs = 300;
  c.optim.batch_size = 32;
  c.optim.lr_drop_epoch = 225;
  return c;
}

void check_ablation_trends(Gate& g, const std::string& scratch) {
  Elapsed t;
  SweepOptions sizes;
  sizes.dict_sizes = {10, 100, 1000};
  sizes.seeds = {1, 2, 3};
  SweepOutcome size_sweep = run_sweep(ablation_config(), sizes, scratch + "/c8_sizes");

  SweepOptions gammas;
  gammas.gammas = {0.5, 5.0, 50.0};
  gammas.seeds = {1, 2, 3};
  SweepOutcome gamma_sweep = run_sweep(ablation_config(), gammas, scratch + "/c8_gammas");

  if (size_sweep.failed + gamma_sweep.failed > 0) {
    g.fail("8", fmt("%zu sweep cells failed to train", size_sweep.failed + gamma_sweep.failed));
    return;
  }
  auto point_median = [](const SweepOutcome& sw, std::size_t S, double gamma) {
    std::vector<double> v;
    for (const SweepCell& c : sw.cells)
      if (c.dict_size == S && c.gamma == gamma) v.push_back(c.metric);
    return median3(v);
  };
  double s10 = point_median(size_sweep, 10, 5.0);
  double s100 = point_median(size_sweep, 100, 5.0);
  double s1000 = point_median(size_sweep, 1000, 5.0);
  double g_lo = point_median(gamma_sweep, 200, 0.5);
  double g_mid = point_median(gamma_sweep, 200, 5.0);
  double g_hi = point_median(gamma_sweep, 200, 50.0);

  std::string detail = fmt(
      "median accuracy over 3 seeds: S=10/100/1000 -> %.3f/%.3f/%.3f (need non-decreasing); "
      "gamma=0.5/5/50 -> %.3f/%.3f/%.3f (need interior maximum), %.0fs",
      s10, s100, s1000, g_lo, g_mid, g_hi, t.seconds());
  if (s10 <= s100 && s100 <= s1000 && g_mid > g_lo && g_mid > g_hi)
    g.pass("8", detail);
  else
    g.fail("8", detail);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"end-to-end acceptance checks; one verdict line per check"};
  std::string data_dir = "data";
  std::vector<std::string> only;
  app.add_option("--data", data_dir, "directory holding the regression tables (gom.csv, "
                                     "toms.csv)")
      ->capture_default_str();
  app.add_option("--only", only, "run just these check ids (e.g. 1,4,6)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](const char* id) {
    return only.empty() || std::find(only.begin(), only.end(), id) != only.end();
  };

  std::string scratch =
      (std::filesystem::temp_directory_path() / "metanb_acceptance").string();
  std::filesystem::remove_all(scratch);
  std::filesystem::create_directories(scratch);

  Gate g;
  Elapsed total;
  auto guarded = [&](const char* id, auto&& fn) {
    if (!wanted(id)) return;
    try {
      fn();
    } catch (const std::exception& e) {
      g.fail(id, fmt("unexpected exception: %s", e.what()));
    }
  };

  guarded("1", [&] { check_spiral_gain(g, scratch); });
  guarded("2", [&] {
    check_regression_table(g, "2", data_dir + "/gom.csv", 2, 1059, 116, 0.45, 0.70, scratch);
  });
  guarded("2x", [&] {
    check_regression_table(g, "2x", data_dir + "/toms.csv", 1, 0, 0, 0.045, 0.065, scratch);
  });
  guarded("3", [&] { check_aux_pipeline(g, scratch); });
  guarded("4", [&] { check_gradient_oracle(g); });
  guarded("5", [&] { check_knn_equivalence(g); });
  guarded("6", [&] { check_invariances(g, scratch); });
  guarded("7", [&] { check_optimizer_trace(g); });
  guarded("8", [&] { check_ablation_trends(g, scratch); });

  std::filesystem::remove_all(scratch);
  std::printf("%d passed, %d failed, %d skipped in %.0fs\n", g.passed, g.failed, g.skipped,
              total.seconds());
  return g.failed == 0 ? 0 : 1;
}
