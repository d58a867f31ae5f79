// Command-line front end. Five subcommands cover the experiment lifecycle:
//
//   train         fit a model per the config, write artifact(s) + metrics
//   eval          score a saved artifact on the config's splits
//   sweep         grid over dictionary size / attention sharpness / seeds
//   trace         train while dumping dictionary-entry trajectories
//   knn-baseline  classical kNN on the exact same splits, for comparison
//
// Every subcommand takes --config PATH, --seed INT (overrides the config's
// seed), and --out DIR. Exit codes: 0 success, 2 configuration or input
// error, 3 numerical failure, 1 anything else.

#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metanb/config.hpp"
#include "metanb/runner.hpp"

namespace {

struct Common {
  std::string config_path;
  std::string out = "out";
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "run configuration file (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  c.seed_opt = sub->add_option("--seed", c.seed, "override the config's seed");
  sub->add_option("--out", c.out, "output directory (created if missing)")
      ->capture_default_str();
}

metanb::RunConfig load(const Common& c) {
  metanb::RunConfig cfg = metanb::load_config(c.config_path);
  if (c.seed_opt->count() > 0) cfg.seed = c.seed;
  return cfg;
}

void print_stats(const char* label, const std::string& metric_name,
                 const metanb::EvalStats& s) {
  std::printf("%s %s %.6f (loss %.6f, n=%zu)\n", label, metric_name.c_str(), s.metric, s.loss,
              s.n);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meta-learned neighbor dictionaries: train, evaluate, sweep, trace"};
  app.require_subcommand(1);

  Common train_c, eval_c, sweep_c, trace_c, knn_c;

  CLI::App* train = app.add_subcommand("train", "fit a model and write artifact + metrics");
  add_common(train, train_c);

  CLI::App* eval = app.add_subcommand("eval", "score a saved model on a split");
  add_common(eval, eval_c);
  metanb::EvalOptions eval_opt;
  eval->add_option("--model", eval_opt.model_path, "model artifact to evaluate")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--split", eval_opt.split, "split to score: train, val, or test")
      ->capture_default_str()
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_flag("--similarity-report", eval_opt.similarity_report,
                 "write per-sample cosine-similarity shift (cosine classifiers only)");
  eval->add_option("--neighbors", eval_opt.neighbors,
                   "write the K nearest dataset rows per dictionary entry");

  CLI::App* sweep = app.add_subcommand("sweep", "train a grid of configurations");
  add_common(sweep, sweep_c);
  metanb::SweepOptions sweep_opt;
  sweep->add_option("--dict-sizes", sweep_opt.dict_sizes, "dictionary sizes (comma separated)")
      ->delimiter(',');
  sweep->add_option("--gammas", sweep_opt.gammas, "attention sharpness values (comma separated)")
      ->delimiter(',');
  sweep->add_option("--seeds", sweep_opt.seeds, "seeds shared by every grid point")
      ->delimiter(',');

  CLI::App* trace = app.add_subcommand("trace", "train while dumping key trajectories");
  add_common(trace, trace_c);
  metanb::TraceOptions trace_opt;
  trace->add_option("--log-every", trace_opt.log_every,
                    "optimizer steps between dictionary dumps")
      ->capture_default_str();

  CLI::App* knn = app.add_subcommand("knn-baseline", "k-nearest-neighbor reference numbers");
  add_common(knn, knn_c);
  metanb::KnnOptions knn_opt;
  knn->add_option("--k", knn_opt.k, "number of neighbors")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage problems are configuration errors
  }

  try {
    if (*train) {
      metanb::TrainOutcome out = metanb::run_train(load(train_c), train_c.out);
      for (const auto& f : out.folds) {
        if (out.folds.size() > 1) std::printf("fold %zu: ", f.fold);
        print_stats("test", out.metric_name, f.test);
      }
      if (out.folds.size() > 1)
        std::printf("cv mean %s %.6f (std %.6f)\n", out.metric_name.c_str(), out.mean_metric,
                    out.std_metric);
      std::printf("metrics: %s\n", out.metrics_path.c_str());
    } else if (*eval) {
      metanb::RunConfig cfg = load(eval_c);
      metanb::EvalOutcome out = metanb::run_eval(cfg, eval_opt, eval_c.out);
      print_stats(out.split.c_str(), metanb::metric_name(cfg.task_kind()), out.stats);
      if (out.improved_fraction >= 0.0)
        std::printf("similarity shift: %.1f%% of samples improved\n",
                    100.0 * out.improved_fraction);
      std::printf("metrics: %s\n", out.metrics_path.c_str());
    } else if (*sweep) {
      metanb::SweepOutcome out = metanb::run_sweep(load(sweep_c), sweep_opt, sweep_c.out);
      std::printf("%zu cells, %zu failed\n", out.cells.size(), out.failed);
      std::printf("metrics: %s\n", out.metrics_path.c_str());
      if (out.failed == out.cells.size() && !out.cells.empty()) {
        std::fprintf(stderr, "error: every sweep cell failed; last: %s\n",
                     out.cells.back().error.c_str());
        return 3;
      }
    } else if (*trace) {
      metanb::RunConfig cfg = load(trace_c);
      metanb::TraceOutcome out = metanb::run_trace(cfg, trace_opt, trace_c.out);
      std::printf("logged %zu iterations x %zu entries -> %s\n", out.iterations_logged,
                  out.entries, out.trace_path.c_str());
      print_stats("test", metanb::metric_name(cfg.task_kind()), out.test);
    } else if (*knn) {
      metanb::KnnOutcome out = metanb::run_knn_baseline(load(knn_c), knn_opt, knn_c.out);
      for (std::size_t f = 0; f < out.folds.size(); ++f) {
        if (out.folds.size() > 1) std::printf("fold %zu: ", f);
        print_stats("test", out.metric_name, out.folds[f]);
      }
      if (out.folds.size() > 1)
        std::printf("cv mean %s %.6f\n", out.metric_name.c_str(), out.mean_metric);
      std::printf("metrics: %s\n", out.metrics_path.c_str());
    }
  } catch (const metanb::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const metanb::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const metanb::DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const metanb::ArtifactError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const metanb::ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
