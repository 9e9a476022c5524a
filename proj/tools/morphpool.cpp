// morphpool: synthetic data, training, evaluation, scheme benchmarks and
// the finite-difference gradient sweep.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <map>

#include "morphpool/app/experiment.hpp"
#include "morphpool/app/gradcheck_suite.hpp"

namespace {

using mp::Error;
using mp::ErrorCode;
namespace app = mp::app;
namespace model = mp::model;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitIo = 2;

struct Cli {
  app::ExperimentConfig config;
  std::string task = "segmentation";
  std::string scheme = "morph_general";
  std::string input = "depth";
  std::string boundary_mode = "class_agnostic";
  std::string split = "test";
  std::vector<std::string> schemes;
  mp::suite::Options suite;
};

void print_row(const std::string& label, const app::MetricRow& row) {
  std::printf("%s", label.c_str());
  for (std::size_t i = 0; i < row.names.size(); ++i) {
    std::printf("  %s=%.6f", row.names[i].c_str(), row.values[i]);
  }
  std::printf("\n");
}

void resolve(Cli& cli) {
  app::ExperimentConfig& c = cli.config;
  c.task = model::parse_task(cli.task);
  c.scheme = model::parse_scheme(cli.scheme);
  c.input = app::parse_input_kind(cli.input);
  if (cli.boundary_mode == "class_agnostic") {
    c.boundary_mode = mp::metrics::BoundaryMode::class_agnostic;
  } else if (cli.boundary_mode == "per_class") {
    c.boundary_mode = mp::metrics::BoundaryMode::per_class;
  } else {
    throw Error(ErrorCode::InvalidSpec, "unknown boundary mode '" + cli.boundary_mode + "'");
  }
  c.schemes.clear();
  for (const auto& s : cli.schemes) c.schemes.push_back(model::parse_scheme(s));
  c.synth.classes = c.classes;
}

int run_synth(Cli& cli) {
  const auto& s = cli.config.synth;
  app::write_synthetic_dataset(s, cli.config.seed, cli.config.out);
  std::printf("wrote %d train / %d test scenes of %dx%d to %s\n", s.train_count, s.test_count, s.size, s.size,
              cli.config.out.string().c_str());
  return kExitOk;
}

int run_train(Cli& cli) {
  const app::TrainResult r = app::train(cli.config);
  for (const auto& e : r.epochs) {
    std::printf("epoch %3d  lr=%.6g  loss=%.6f", e.epoch, e.lr, e.train_loss);
    if (e.test) {
      for (std::size_t i = 0; i < e.test->names.size(); ++i) {
        std::printf("  %s=%.4f", e.test->names[i].c_str(), e.test->values[i]);
      }
    }
    std::printf("\n");
  }
  std::printf("final lr %.6g\n", r.final_lr);
  print_row("train", r.final_train_metrics);
  if (r.final_test_metrics) print_row("test", *r.final_test_metrics);
  std::printf("checkpoint %s (%.1fs)\n", r.checkpoint.string().c_str(), r.wall_time);
  return kExitOk;
}

int run_eval(Cli& cli, bool task_given) {
  if (cli.config.checkpoint.empty()) cli.config.checkpoint = cli.config.out / "model.mpc";
  if (!task_given) cli.config.task = model::load_checkpoint(cli.config.checkpoint).spec().task;
  print_row(cli.split, app::evaluate_checkpoint(cli.config, cli.split));
  return kExitOk;
}

int run_bench(Cli& cli) {
  const auto rows = app::bench(cli.config);
  std::printf("%-18s %12s %15s", "scheme", "params_total", "params_sampling");
  for (const auto& name : app::metric_names(cli.config.task)) std::printf(" %11s", name.c_str());
  std::printf(" %9s\n", "wall_time");
  for (const auto& row : rows) {
    std::printf("%-18s %12zu %15zu", model::to_string(row.scheme), row.params.total, row.params.sampling);
    for (double v : row.metrics.values) std::printf(" %11.4f", v);
    std::printf(" %9.1f\n", row.wall_time);
  }
  return kExitOk;
}

int run_gradcheck(Cli& cli) {
  const auto rows = mp::suite::run(cli.suite);
  bool ok = !rows.empty();
  std::printf("%-32s %14s %8s %6s  %s\n", "op", "max_rel_error", "checked", "ties", "result");
  for (const auto& row : rows) {
    std::printf("%-32s %14.3e %8zu %6zu  %s\n", row.op.c_str(), row.max_rel_error, row.checked, row.tie_skips,
                row.passed ? "PASS" : "FAIL");
    ok = ok && row.passed;
  }
  std::printf("%s (tolerance %.1e, %d seeds per op)\n", ok ? "all ops passed" : "gradient check FAILED",
              cli.suite.tolerance, cli.suite.seeds);
  return ok ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App root{"Morphological pooling toolkit"};
  root.require_subcommand(1);
  root.fallthrough();
  root.set_config("--config", "", "key=value file; command-line flags take precedence");
  root.allow_config_extras(CLI::config_extras_mode::error);

  Cli cli;
  auto& c = cli.config;
  root.add_option("--seed", c.seed, "Master seed")->capture_default_str();
  root.add_option("--scheme", cli.scheme, "Sampling scheme")
      ->check(CLI::IsMember({"linear", "pool_unpool", "morph_flat", "morph_parabolic", "morph_general",
                             "linear_depthwise"}))
      ->capture_default_str();
  auto* task_opt = root.add_option("--task", cli.task, "segmentation or depth_autoencode")
                       ->check(CLI::IsMember({"segmentation", "depth_autoencode"}))
                       ->capture_default_str();
  root.add_option("--depth", c.depth, "Number of sampling stages")->capture_default_str();
  root.add_option("--channels", c.channels, "Base channel count")->capture_default_str();
  root.add_option("--channel-cap", c.channel_cap, "Widest stage as a multiple of --channels")->capture_default_str();
  root.add_option("--convs-per-block", c.convs_per_block)->capture_default_str();
  root.add_option("--classes", c.classes, "Segmentation classes including background")->capture_default_str();
  root.add_option("--k-pool", c.k_pool, "Pooling window")->capture_default_str();
  root.add_option("--k-up", c.k_up, "Unpooling window (odd)")->capture_default_str();
  root.add_option("--epochs", c.epochs)->capture_default_str();
  root.add_option("--batch-size", c.batch_size)->capture_default_str();
  root.add_option("--lr", c.lr, "Initial learning rate (default 5e-4 for depth input, 5e-3 for intensity)");
  root.add_option("--momentum", c.momentum)->capture_default_str();
  root.add_option("--input", cli.input, "Network input: depth or intensity")
      ->check(CLI::IsMember({"depth", "intensity"}))
      ->capture_default_str();
  root.add_option("--crop", c.crop, "Training crop size")->capture_default_str();
  root.add_option("--data", c.data, "Dataset directory");
  root.add_option("--out", c.out, "Output directory")->capture_default_str();
  root.add_option("--checkpoint", c.checkpoint, "Checkpoint to evaluate (default OUT/model.mpc)");
  root.add_option("--boundary-tolerance", c.boundary_tolerance, "Boundary match radius (-1: from image diagonal)")
      ->capture_default_str();
  root.add_option("--boundary-mode", cli.boundary_mode, "class_agnostic or per_class")
      ->check(CLI::IsMember({"class_agnostic", "per_class"}))
      ->capture_default_str();
  root.add_flag("--deterministic", c.deterministic, "Serial execution for bit-reproducible runs");

  auto* synth = root.add_subcommand("synth", "Generate the synthetic depth/label dataset");
  synth->add_option("--train-count", c.synth.train_count)->capture_default_str();
  synth->add_option("--test-count", c.synth.test_count)->capture_default_str();
  synth->add_option("--size", c.synth.size)->capture_default_str();
  synth->add_option("--min-rects", c.synth.min_rects)->capture_default_str();
  synth->add_option("--max-rects", c.synth.max_rects)->capture_default_str();
  synth->add_option("--noise", c.synth.noise, "Depth noise sigma in meters")->capture_default_str();

  auto* train = root.add_subcommand("train", "Train one scheme and write a checkpoint");
  auto* eval = root.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval->add_option("--split", cli.split)->capture_default_str();
  auto* bench = root.add_subcommand("bench", "Train and compare several schemes");
  bench->add_option("--schemes", cli.schemes, "Schemes to compare (default: all)")->delimiter(',');

  auto* gradcheck = root.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--seeds", cli.suite.seeds)->capture_default_str();
  gradcheck->add_option("--tolerance", cli.suite.tolerance)->capture_default_str();
  gradcheck->add_option("--filter", cli.suite.filter, "Only ops with this name prefix");
  gradcheck->add_flag("--corrupt-dilate", cli.suite.corrupt_dilate_backward,
                      "Swap in a deliberately wrong dilation backward");

  try {
    root.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return root.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return root.exit(e);
  } catch (const CLI::ParseError& e) {
    root.exit(e);
    return kExitFailure;
  }

  try {
    resolve(cli);
    if (*synth) return run_synth(cli);
    if (*train) return run_train(cli);
    if (*eval) return run_eval(cli, task_opt->count() > 0);
    if (*bench) return run_bench(cli);
    if (*gradcheck) return run_gradcheck(cli);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.code() == ErrorCode::IoError ? kExitIo : kExitFailure;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  }
  return kExitFailure;
}
