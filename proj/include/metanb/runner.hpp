#pragma once

// Experiment orchestration: turn a validated RunConfig into datasets, a
// model, a training run, and output files. Each run_* function is one CLI
// subcommand's worth of work, written so tests can drive it in-process.
//
// Output contract, shared by every command:
//   - metrics go to <out>/metrics.jsonl (or sweep.jsonl), one JSON record
//     per line, first record echoing the full canonical config;
//   - delimited reports carry the same echo in '#' header lines;
//   - every file is written atomically (temp + rename), and records hold
//     bare filenames, never absolute paths, so two runs of the same config
//     differ only in the wall-clock field of the final record.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metanb/common.hpp"
#include "metanb/config.hpp"
#include "metanb/data.hpp"
#include "metanb/dictionary.hpp"
#include "metanb/estimator.hpp"
#include "metanb/knn.hpp"
#include "metanb/meta.hpp"
#include "metanb/serialize.hpp"
#include "metanb/tensor.hpp"

namespace metanb {

// Train/validation/test views of one dataset, already normalized with
// statistics computed from the training rows only.
struct SplitSets {
  Dataset train, val, test;
};

struct EvalStats {
  double loss = 0.0;
  double metric = 0.0;  // accuracy for classification, mse for regression
  std::size_t n = 0;
};

namespace detail {

// Seed layout: a run seed feeds data generation and shuffling directly;
// fixed offsets derive the split and init streams so no two uses share a
// generator. Cross-validation folds shift the base by 1000 per fold.
constexpr std::uint64_t kSplitSeedOffset = 1;
constexpr std::uint64_t kValSeedOffset = 2;
constexpr std::uint64_t kExtractorSeedOffset = 10;
constexpr std::uint64_t kHeadSeedOffset = 20;
constexpr std::uint64_t kAuxSeedOffset = 30;
constexpr std::uint64_t kDictSeedOffset = 40;
constexpr std::uint64_t kValueInitSeedOffset = 41;
constexpr std::uint64_t kFoldSeedStride = 1000;

inline std::vector<std::size_t> gather(const std::vector<std::size_t>& pool,
                                       const std::vector<std::size_t>& rel) {
  std::vector<std::size_t> abs;
  abs.reserve(rel.size());
  for (std::size_t r : rel) abs.push_back(pool[r]);
  return abs;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= double(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / double(v.size()))};
}

// Accumulates JSONL records and lands them in one atomic write, so a
// metrics file either exists complete or not at all.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::string path) : path_(std::move(path)) {}

  void add(nlohmann::json rec) { records_.push_back(std::move(rec)); }

  void flush() const {
    std::string out;
    for (const auto& r : records_) {
      out += r.dump();
      out += '\n';
    }
    write_atomic(path_, out);
  }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::vector<nlohmann::json> records_;
};

class WallClock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace detail

// Materializes the configured data source, labels included, before any
// splitting or normalization.
inline Dataset build_raw_dataset(const RunConfig& c) {
  if (c.data.source == "spirals") {
    if (c.task_kind() != TaskKind::classification)
      throw ConfigError("data: the spirals source generates a classification set; task is '" +
                        c.task + "'");
    return generate_spirals(c.data.n_per_class, c.data.noise_std, c.data.turns, c.seed);
  }
  return load_delimited(c.data.path, c.data.label_columns, c.task_kind(), c.delimiter_char(),
                        c.data.detect_header);
}

// Single train/val/test split: test rows are carved out first, a validation
// share is carved from the remainder, and normalization statistics come from
// the final training rows alone.
inline SplitSets single_split(const Dataset& raw, const RunConfig& c) {
  auto [rest, test_rows] =
      split_validation(raw.size(), c.data.test_fraction, c.seed + detail::kSplitSeedOffset);
  auto [train_rel, val_rel] =
      split_validation(rest.size(), c.data.val_fraction, c.seed + detail::kValSeedOffset);
  std::vector<std::size_t> train_rows = detail::gather(rest, train_rel);
  std::vector<std::size_t> val_rows = detail::gather(rest, val_rel);
  Dataset base = c.data.normalize ? normalize(raw, train_rows) : raw;
  return {subset(base, train_rows), subset(base, val_rows), subset(base, test_rows)};
}

// Fold f of the configured cross-validation: the fold's held-out block is
// the test set, validation is carved from the fold's training block, and
// normalization again sees training rows only.
inline SplitSets cv_split(const Dataset& raw, const Fold& fold, const RunConfig& c,
                          std::size_t fold_index) {
  auto [train_rel, val_rel] = split_validation(
      fold.train.size(), c.data.val_fraction,
      c.seed + detail::kValSeedOffset + fold_index * detail::kFoldSeedStride);
  std::vector<std::size_t> train_rows = detail::gather(fold.train, train_rel);
  std::vector<std::size_t> val_rows = detail::gather(fold.train, val_rel);
  Dataset base = c.data.normalize ? normalize(raw, train_rows) : raw;
  return {subset(base, train_rows), subset(base, val_rows), subset(base, fold.test)};
}

// Builds the full model for a training set: extractor, tunable head,
// optional auxiliary head, dictionary, and inner step size. The training set
// is consulted for dimensions and, for uniform value init, the label range.
inline MetaModel build_model(const RunConfig& c, const Dataset& train_set, std::uint64_t seed) {
  std::size_t d = train_set.dim(), n_o = train_set.label_dim();
  Head::Output output =
      c.model.output == "dot" ? Head::Output::dot : Head::Output::cosine;

  MetaModel m;
  m.task = c.task_kind();
  std::size_t n_z = d;
  if (!c.model.extractor.empty()) {
    if (c.model.extractor.front() != d)
      throw ConfigError("model.extractor expects input width " +
                        std::to_string(c.model.extractor.front()) + " but the dataset has " +
                        std::to_string(d) + " features");
    // The stage feeding the output layer keeps its sign under a cosine
    // output; with a head trunk in between, the trunk handles that and the
    // extractor-to-trunk junction stays relu.
    bool junction_relu = !c.model.head_hidden.empty() || output == Head::Output::dot;
    m.theta = MLPParams::create(c.model.extractor, junction_relu,
                                seed + detail::kExtractorSeedOffset);
    n_z = c.model.extractor.back();
  }

  std::vector<std::size_t> head_dims{n_z};
  head_dims.insert(head_dims.end(), c.model.head_hidden.begin(), c.model.head_hidden.end());
  head_dims.push_back(n_o);
  m.phi = Head::create(head_dims, output, seed + detail::kHeadSeedOffset, c.model.tau_init);
  if (c.model.lambda > 0.0)
    m.xi = Head::create(head_dims, output, seed + detail::kAuxSeedOffset, c.model.tau_init);

  m.dict = init_dictionary(c.model.dict_size, n_z, n_o, seed + detail::kDictSeedOffset,
                           metric_from_string(c.model.metric), c.model.gamma,
                           value_mode_from_string(c.effective_value_mode()));
  if (c.effective_value_init() == "uniform_label_range") {
    const auto& y = train_set.labels.data();
    double lo = *std::min_element(y.begin(), y.end());
    double hi = *std::max_element(y.begin(), y.end());
    reinit_values_uniform(m.dict, lo, hi, seed + detail::kValueInitSeedOffset);
  }

  m.alpha = c.model.alpha_mode == "scalar"
                ? InnerLearningRate::scalar(c.model.alpha_init)
                : InnerLearningRate::diagonal(m.phi.params(), c.model.alpha_init);
  m.lambda = c.model.lambda;
  m.inner_steps = c.model.inner_steps;
  return m;
}

inline TrainConfig make_train_config(const RunConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = c.optim.epochs;
  t.batch_size = c.optim.batch_size;
  t.optimizer = c.optim.kind;
  t.lr = c.optim.lr;
  t.weight_decay = c.optim.weight_decay;
  t.momentum = c.optim.momentum;
  t.lr_drop_epoch = c.optim.lr_drop_epoch;
  t.early_stop_patience = c.optim.early_stop_patience;
  t.seed = seed;
  t.vanilla = c.vanilla;
  t.decay_dict_values = c.optim.decay_dict_values;
  t.decay_alpha = c.optim.decay_alpha;
  return t;
}

// Test metric on a dataset: mean loss plus accuracy (classification) or the
// loss itself (regression). Throws on a non-finite result rather than writing
// garbage into a metrics file.
inline EvalStats evaluate(const MetaModel& m, const Dataset& ds, std::size_t batch,
                          bool vanilla) {
  Tensor pred = detail::predict_chunked(m, ds.inputs, batch, vanilla);
  EvalStats s;
  s.loss = supervised_loss(pred, ds.labels, m.task).item();
  if (!std::isfinite(s.loss)) throw NumericError("evaluate: loss is not finite");
  s.metric = m.task == TaskKind::classification ? detail::accuracy(pred, ds.labels) : s.loss;
  s.n = ds.size();
  return s;
}

inline std::string metric_name(TaskKind task) {
  return task == TaskKind::classification ? "accuracy" : "mse";
}

namespace detail {

inline nlohmann::json run_header(const RunConfig& c, const std::string& command) {
  return {{"record", "run"},
          {"format_version", 1},
          {"command", command},
          {"config", config_to_json(c)}};
}

inline nlohmann::json split_record(const SplitSets& s) {
  return {{"record", "split"},
          {"n_train", s.train.size()},
          {"n_val", s.val.size()},
          {"n_test", s.test.size()},
          {"input_dim", s.train.dim()},
          {"label_dim", s.train.label_dim()}};
}

inline nlohmann::json epoch_record(const EpochMetrics& em) {
  return {{"record", "epoch"},
          {"epoch", em.epoch},
          {"train_loss", em.train_loss},
          {"val_loss", em.val_loss},
          {"val_metric", em.val_metric},
          {"lr", em.lr}};
}

inline nlohmann::json test_record(const EvalStats& es, TaskKind task) {
  return {{"record", "test"},
          {"loss", es.loss},
          {"metric_name", metric_name(task)},
          {"metric", es.metric},
          {"n", es.n}};
}

}  // namespace detail

struct FoldOutcome {
  std::size_t fold = 0;
  TrainResult result;
  EvalStats test;
  std::string artifact;  // path of the saved model
};

struct TrainOutcome {
  std::string metric_name;
  std::vector<FoldOutcome> folds;  // one entry for a single split
  double mean_metric = 0.0;
  double std_metric = 0.0;
  std::string metrics_path;
};

// The train subcommand: single split or k-fold CV per the config, model
// artifact(s) plus a metrics file in out_dir.
inline TrainOutcome run_train(const RunConfig& c, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  detail::WallClock clock;
  Dataset raw = build_raw_dataset(c);
  detail::MetricsWriter mw(out_dir + "/metrics.jsonl");
  mw.add(detail::run_header(c, "train"));

  TrainOutcome out;
  out.metric_name = metric_name(c.task_kind());
  out.metrics_path = mw.path();

  auto run_one = [&](const SplitSets& s, std::size_t fold_index, bool tag_fold) {
    std::uint64_t seed = c.seed + fold_index * detail::kFoldSeedStride;
    MetaModel m = build_model(c, s.train, seed);
    auto tag = [&](nlohmann::json rec) {
      if (tag_fold) rec["fold"] = fold_index;
      mw.add(std::move(rec));
    };
    tag(detail::split_record(s));
    TrainResult tr = train(m, s.train, s.val, make_train_config(c, seed),
                           [&](const EpochMetrics& em) { tag(detail::epoch_record(em)); });
    EvalStats es = evaluate(m, s.test, c.optim.batch_size, c.vanilla);
    std::string name = tag_fold ? "model_fold" + std::to_string(fold_index) + ".json"
                                : "model.json";
    save_model(m, out_dir + "/" + name);
    nlohmann::json rec = detail::test_record(es, m.task);
    rec["artifact"] = name;
    tag(std::move(rec));
    out.folds.push_back({fold_index, std::move(tr), es, out_dir + "/" + name});
  };

  if (c.data.folds == 0) {
    run_one(single_split(raw, c), 0, false);
    out.mean_metric = out.folds[0].test.metric;
    out.std_metric = 0.0;
  } else {
    std::vector<Fold> folds = kfold(raw.size(), c.data.folds, c.seed + detail::kSplitSeedOffset);
    for (std::size_t f = 0; f < folds.size(); ++f) run_one(cv_split(raw, folds[f], c, f), f, true);
    std::vector<double> metrics, losses;
    for (const auto& fo : out.folds) {
      metrics.push_back(fo.test.metric);
      losses.push_back(fo.test.loss);
    }
    auto [mm, ms] = detail::mean_std(metrics);
    auto [lm, ls] = detail::mean_std(losses);
    out.mean_metric = mm;
    out.std_metric = ms;
    mw.add({{"record", "cv_summary"},
            {"folds", folds.size()},
            {"metric_name", out.metric_name},
            {"mean_metric", mm},
            {"std_metric", ms},
            {"mean_loss", lm},
            {"std_loss", ls}});
  }

  mw.add({{"record", "done"}, {"wall_s", clock.seconds()}});
  mw.flush();
  return out;
}

struct EvalOptions {
  std::string model_path;      // required: artifact to evaluate
  std::string split = "test";  // "train", "val", or "test"
  bool similarity_report = false;
  std::size_t neighbors = 0;  // per-entry nearest dataset rows to report
};

struct EvalOutcome {
  EvalStats stats;
  std::string split;
  double improved_fraction = -1.0;  // similarity report only
  std::string metrics_path;
};

// The eval subcommand: load an artifact, rebuild the configured splits, and
// score one of them; optional per-sample similarity-shift and per-entry
// nearest-neighbor reports land beside the metrics.
inline EvalOutcome run_eval(const RunConfig& c, const EvalOptions& opt,
                            const std::string& out_dir) {
  if (opt.model_path.empty()) throw ConfigError("eval: a model artifact path is required");
  if (opt.split != "train" && opt.split != "val" && opt.split != "test")
    throw ConfigError("eval: split must be 'train', 'val', or 'test', got '" + opt.split + "'");
  if (c.data.folds != 0)
    throw ConfigError("eval: needs a single-split config (data.folds = 0); fold artifacts can "
                      "be evaluated by re-running their fold's split");

  MetaModel m = load_model(opt.model_path);
  if (m.task != c.task_kind())
    throw ConfigError("eval: artifact task '" + to_string(m.task) + "' does not match config '" +
                      c.task + "'");

  std::filesystem::create_directories(out_dir);
  detail::WallClock clock;
  Dataset raw = build_raw_dataset(c);
  std::size_t model_in = m.theta.layer_count() > 0 ? m.theta.in_dim() : m.dict.key_dim();
  if (model_in != raw.dim())
    throw ConfigError("eval: artifact expects " + std::to_string(model_in) +
                      " input features but the dataset has " + std::to_string(raw.dim()));
  if (m.phi.out_dim() != raw.label_dim())
    throw ConfigError("eval: artifact produces " + std::to_string(m.phi.out_dim()) +
                      " outputs but the dataset labels have " + std::to_string(raw.label_dim()));

  SplitSets s = single_split(raw, c);
  const Dataset& ds = opt.split == "train" ? s.train : opt.split == "val" ? s.val : s.test;

  detail::MetricsWriter mw(out_dir + "/metrics.jsonl");
  mw.add(detail::run_header(c, "eval"));
  mw.add(detail::split_record(s));

  EvalOutcome out;
  out.split = opt.split;
  out.metrics_path = mw.path();
  out.stats = evaluate(m, ds, c.optim.batch_size, c.vanilla);
  {
    nlohmann::json rec = {{"record", "eval"},
                          {"split", opt.split},
                          {"loss", out.stats.loss},
                          {"metric_name", metric_name(m.task)},
                          {"metric", out.stats.metric},
                          {"n", out.stats.n}};
    mw.add(std::move(rec));
  }

  std::string header = "# format_version 1\n# config " + config_to_json(c).dump() + "\n";

  if (opt.similarity_report) {
    if (m.task != TaskKind::classification || m.phi.output != Head::Output::cosine)
      throw ConfigError("eval: the similarity report needs a cosine-output classification model");
    std::vector<SimilarityShift> shifts = similarity_shift_report(m, ds.inputs, ds.labels);
    std::ostringstream csv;
    csv << std::setprecision(17) << header << "sample,before,after\n";
    std::size_t improved = 0;
    for (std::size_t i = 0; i < shifts.size(); ++i) {
      csv << i << ',' << shifts[i].before << ',' << shifts[i].after << '\n';
      if (shifts[i].after >= shifts[i].before) ++improved;
    }
    detail::write_atomic(out_dir + "/similarity_shift.csv", csv.str());
    out.improved_fraction = double(improved) / double(shifts.size());
    mw.add({{"record", "similarity_shift"},
            {"split", opt.split},
            {"n", shifts.size()},
            {"improved_fraction", out.improved_fraction},
            {"file", "similarity_shift.csv"}});
  }

  if (opt.neighbors > 0) {
    Tensor z;
    {
      NoGradGuard guard;
      z = embed(m, ds.inputs);
    }
    std::ostringstream csv;
    csv << std::setprecision(17) << header << "entry,rank,row";
    for (std::size_t o = 0; o < ds.label_dim(); ++o) csv << ",label_" << o;
    csv << '\n';
    for (std::size_t j = 0; j < m.dict.size(); ++j) {
      std::vector<std::size_t> rows = nearest_dataset_points(m.dict, j, z, opt.neighbors);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        csv << j << ',' << r << ',' << rows[r];
        for (std::size_t o = 0; o < ds.label_dim(); ++o)
          csv << ',' << ds.labels.at(rows[r], o);
        csv << '\n';
      }
    }
    detail::write_atomic(out_dir + "/neighbors.csv", csv.str());
    mw.add({{"record", "neighbors"},
            {"split", opt.split},
            {"entries", m.dict.size()},
            {"k", opt.neighbors},
            {"file", "neighbors.csv"}});
  }

  mw.add({{"record", "done"}, {"wall_s", clock.seconds()}});
  mw.flush();
  return out;
}

struct SweepOptions {
  std::vector<std::size_t> dict_sizes;  // empty: just the config's value
  std::vector<double> gammas;           // empty: just the config's value
  std::vector<std::uint64_t> seeds;     // empty: just the config's seed
};

struct SweepCell {
  std::size_t dict_size = 0;
  double gamma = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  double metric = 0.0;
  double loss = 0.0;
  std::string error;
};

struct SweepOutcome {
  std::vector<SweepCell> cells;
  std::size_t failed = 0;
  std::string metrics_path;
};

// The sweep subcommand: a grid over dictionary size and attention sharpness,
// every cell trained with the same seed list. A failed cell is recorded and
// the sweep moves on; per-point medians across seeds close the file.
inline SweepOutcome run_sweep(const RunConfig& c, const SweepOptions& opt,
                              const std::string& out_dir) {
  if (c.data.folds != 0)
    throw ConfigError("sweep: needs a single-split config (data.folds = 0)");
  std::vector<std::size_t> sizes =
      opt.dict_sizes.empty() ? std::vector<std::size_t>{c.model.dict_size} : opt.dict_sizes;
  std::vector<double> gammas =
      opt.gammas.empty() ? std::vector<double>{c.model.gamma} : opt.gammas;
  std::vector<std::uint64_t> seeds =
      opt.seeds.empty() ? std::vector<std::uint64_t>{c.seed} : opt.seeds;
  for (double g : gammas)
    if (g <= 0.0) throw ConfigError("sweep: gamma grid values must be positive");
  for (std::size_t s : sizes)
    if (s == 0) throw ConfigError("sweep: dictionary size grid values must be positive");

  std::filesystem::create_directories(out_dir);
  detail::WallClock clock;
  detail::MetricsWriter mw(out_dir + "/sweep.jsonl");
  mw.add(detail::run_header(c, "sweep"));
  mw.add({{"record", "grid"},
          {"dict_sizes", sizes},
          {"gammas", gammas},
          {"seeds", seeds}});

  SweepOutcome out;
  out.metrics_path = mw.path();
  for (std::size_t S : sizes) {
    for (double g : gammas) {
      std::vector<double> point_metrics;
      for (std::uint64_t seed : seeds) {
        RunConfig cc = c;
        cc.model.dict_size = S;
        cc.model.gamma = g;
        cc.seed = seed;
        SweepCell cell;
        cell.dict_size = S;
        cell.gamma = g;
        cell.seed = seed;
        try {
          Dataset raw = build_raw_dataset(cc);
          SplitSets s = single_split(raw, cc);
          MetaModel m = build_model(cc, s.train, cc.seed);
          train(m, s.train, s.val, make_train_config(cc, cc.seed));
          EvalStats es = evaluate(m, s.test, cc.optim.batch_size, cc.vanilla);
          cell.ok = true;
          cell.metric = es.metric;
          cell.loss = es.loss;
          point_metrics.push_back(es.metric);
          mw.add({{"record", "cell"},
                  {"dict_size", S},
                  {"gamma", g},
                  {"seed", seed},
                  {"metric_name", metric_name(cc.task_kind())},
                  {"metric", es.metric},
                  {"loss", es.loss}});
        } catch (const std::exception& e) {
          cell.error = e.what();
          ++out.failed;
          mw.add({{"record", "cell_error"},
                  {"dict_size", S},
                  {"gamma", g},
                  {"seed", seed},
                  {"error", e.what()}});
        }
        out.cells.push_back(std::move(cell));
      }
      if (!point_metrics.empty())
        mw.add({{"record", "point"},
                {"dict_size", S},
                {"gamma", g},
                {"seeds_ok", point_metrics.size()},
                {"median_metric", detail::median(point_metrics)}});
    }
  }

  mw.add({{"record", "done"}, {"wall_s", clock.seconds()}});
  mw.flush();
  return out;
}

struct TraceOptions {
  std::size_t log_every = 10;  // optimizer steps between dictionary dumps
};

struct TraceOutcome {
  std::size_t iterations_logged = 0;
  std::size_t entries = 0;
  TrainResult result;
  EvalStats test;
  std::string trace_path;
  std::string metrics_path;
};

// The trace subcommand: train as usual while dumping every dictionary entry
// (key coordinates plus effective value) at iteration 0 and every log_every
// optimizer steps, for plotting neighbor trajectories. Only dictionaries
// living in a 2-d input space make sense to plot, so anything else is
// refused up front.
inline TraceOutcome run_trace(const RunConfig& c, const TraceOptions& opt,
                              const std::string& out_dir) {
  if (opt.log_every == 0) throw ConfigError("trace: log_every must be at least 1");
  if (c.data.folds != 0)
    throw ConfigError("trace: needs a single-split config (data.folds = 0)");
  if (!c.model.extractor.empty())
    throw ConfigError("trace: dictionary keys live in the extractor's feature space; tracing "
                      "needs keys in the 2-d input space (no extractor)");
  if (c.vanilla) throw ConfigError("trace: a vanilla run never moves the dictionary");

  std::filesystem::create_directories(out_dir);
  detail::WallClock clock;
  Dataset raw = build_raw_dataset(c);
  if (raw.dim() != 2)
    throw ConfigError("trace: needs 2-d inputs to plot key trajectories, dataset has " +
                      std::to_string(raw.dim()));
  SplitSets s = single_split(raw, c);
  MetaModel m = build_model(c, s.train, c.seed);

  detail::MetricsWriter mw(out_dir + "/metrics.jsonl");
  mw.add(detail::run_header(c, "trace"));
  mw.add(detail::split_record(s));

  std::ostringstream csv;
  csv << std::setprecision(17);
  csv << "# format_version 1\n# config " << config_to_json(c).dump() << "\n";
  csv << "iteration,entry,key_x,key_y";
  for (std::size_t o = 0; o < raw.label_dim(); ++o) csv << ",value_" << o;
  csv << '\n';

  TraceOutcome out;
  out.entries = m.dict.size();
  auto dump = [&](std::size_t iteration) {
    Tensor values;
    {
      NoGradGuard guard;
      values = m.dict.effective_values();
    }
    for (std::size_t j = 0; j < m.dict.size(); ++j) {
      csv << iteration << ',' << j << ',' << m.dict.keys.at(j, 0) << ','
          << m.dict.keys.at(j, 1);
      for (std::size_t o = 0; o < values.cols(); ++o) csv << ',' << values.at(j, o);
      csv << '\n';
    }
    ++out.iterations_logged;
  };

  dump(0);
  std::size_t steps_seen = 0, last_logged = 0;
  out.result = train(m, s.train, s.val, make_train_config(c, c.seed),
                     [&](const EpochMetrics& em) { mw.add(detail::epoch_record(em)); },
                     [&](std::size_t step) {
                       steps_seen = step;
                       if (step % opt.log_every == 0) {
                         dump(step);
                         last_logged = step;
                       }
                     });
  if (steps_seen > last_logged) dump(steps_seen);

  detail::write_atomic(out_dir + "/trace.csv", csv.str());
  out.trace_path = out_dir + "/trace.csv";
  out.metrics_path = mw.path();

  out.test = evaluate(m, s.test, c.optim.batch_size, /*vanilla=*/false);
  mw.add(detail::test_record(out.test, m.task));
  mw.add({{"record", "trace"},
          {"iterations_logged", out.iterations_logged},
          {"entries", out.entries},
          {"rows", out.iterations_logged * out.entries},
          {"file", "trace.csv"}});
  mw.add({{"record", "done"}, {"wall_s", clock.seconds()}});
  mw.flush();
  return out;
}

struct KnnOptions {
  std::size_t k = 5;
};

struct KnnOutcome {
  std::string metric_name;
  std::vector<EvalStats> folds;  // one entry for a single split
  double mean_metric = 0.0;
  std::string metrics_path;
};

// The knn-baseline subcommand: classical k-nearest-neighbor prediction over
// exactly the splits and normalization a training run would see, so its
// numbers are directly comparable to the learned model's.
inline KnnOutcome run_knn_baseline(const RunConfig& c, const KnnOptions& opt,
                                   const std::string& out_dir) {
  if (opt.k == 0) throw ConfigError("knn-baseline: k must be at least 1");
  std::filesystem::create_directories(out_dir);
  detail::WallClock clock;
  Dataset raw = build_raw_dataset(c);
  Metric metric = metric_from_string(c.model.metric);

  detail::MetricsWriter mw(out_dir + "/metrics.jsonl");
  mw.add(detail::run_header(c, "knn-baseline"));

  KnnOutcome out;
  out.metric_name = metric_name(c.task_kind());
  out.metrics_path = mw.path();

  auto score = [&](const SplitSets& s) {
    if (opt.k > s.train.size())
      throw ConfigError("knn-baseline: k=" + std::to_string(opt.k) + " but the training split "
                        "has only " + std::to_string(s.train.size()) + " rows");
    std::size_t d = s.test.dim(), n_o = s.test.label_dim();
    std::size_t correct = 0;
    double sq_sum = 0.0;
    for (std::size_t i = 0; i < s.test.size(); ++i) {
      const double* row = s.test.inputs.data().data() + i * d;
      std::vector<double> query(row, row + d);
      Neighborhood nb = knn_search(query, s.train.inputs, s.train.labels, opt.k, metric);
      std::vector<double> pred = knn_predict(nb, c.task_kind());
      const double* label = s.test.labels.data().data() + i * n_o;
      if (c.task_kind() == TaskKind::classification) {
        if (argmax(pred) == argmax(label, n_o)) ++correct;
      } else {
        double se = 0.0;
        for (std::size_t o = 0; o < n_o; ++o) se += (pred[o] - label[o]) * (pred[o] - label[o]);
        sq_sum += se / double(n_o);
      }
    }
    EvalStats es;
    es.n = s.test.size();
    if (c.task_kind() == TaskKind::classification) {
      es.metric = double(correct) / double(es.n);
      es.loss = 1.0 - es.metric;
    } else {
      es.metric = sq_sum / double(es.n);
      es.loss = es.metric;
    }
    return es;
  };

  auto record = [&](const EvalStats& es, std::size_t fold, bool tag_fold) {
    nlohmann::json rec = {{"record", "knn"},
                          {"split", "test"},
                          {"k", opt.k},
                          {"metric", c.model.metric},
                          {"metric_name", out.metric_name},
                          {"value", es.metric},
                          {"n", es.n}};
    if (tag_fold) rec["fold"] = fold;
    mw.add(std::move(rec));
  };

  if (c.data.folds == 0) {
    EvalStats es = score(single_split(raw, c));
    record(es, 0, false);
    out.folds.push_back(es);
    out.mean_metric = es.metric;
  } else {
    std::vector<Fold> folds = kfold(raw.size(), c.data.folds, c.seed + detail::kSplitSeedOffset);
    std::vector<double> metrics;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      EvalStats es = score(cv_split(raw, folds[f], c, f));
      record(es, f, true);
      out.folds.push_back(es);
      metrics.push_back(es.metric);
    }
    auto [mm, ms] = detail::mean_std(metrics);
    out.mean_metric = mm;
    mw.add({{"record", "cv_summary"},
            {"folds", folds.size()},
            {"metric_name", out.metric_name},
            {"mean_metric", mm},
            {"std_metric", ms}});
  }

  mw.add({{"record", "done"}, {"wall_s", clock.seconds()}});
  mw.flush();
  return out;
}

}  // namespace metanb
