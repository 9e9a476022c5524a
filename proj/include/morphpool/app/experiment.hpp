#pragma once

// Experiment plumbing behind the command-line tool: synthetic scenes,
// dataset I/O, training, evaluation and scheme benchmarks.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "morphpool/metrics.hpp"
#include "morphpool/model.hpp"

MORPHPOOL_BEGIN_NAMESPACE

namespace app {

enum class InputKind { depth, intensity };

const char* to_string(InputKind kind);
InputKind parse_input_kind(const std::string& name);

struct SynthConfig {
  int train_count = 500;
  int test_count = 100;
  int size = 64;
  int classes = 4;
  int min_rects = 1;
  int max_rects = 4;
  double noise = 0.01;  // additive depth noise, meters
};

struct ExperimentConfig {
  model::Task task = model::Task::segmentation;
  model::Scheme scheme = model::Scheme::morph_general;
  int depth = 3;
  int channels = 8;
  int channel_cap = 8;
  int convs_per_block = 1;
  int classes = 4;
  int k_pool = 2;
  int k_up = 3;
  int epochs = 30;
  int batch_size = 8;
  double lr = 0;  // 0 picks the default for the input kind
  double momentum = 0.9;
  std::uint64_t seed = 42;
  InputKind input = InputKind::depth;
  int crop = 64;
  bool deterministic = false;
  int boundary_tolerance = -1;  // -1: derived from the image diagonal
  metrics::BoundaryMode boundary_mode = metrics::BoundaryMode::class_agnostic;
  std::filesystem::path data;
  std::filesystem::path out = "out";
  std::filesystem::path checkpoint;
  std::vector<model::Scheme> schemes;  // bench; empty means all
  SynthConfig synth;

  /// 5e-4 for depth input, 5e-3 for intensity input unless overridden.
  double initial_lr() const;
  model::ModelSpec model_spec() const;
  /// Throws InvalidSpec on inconsistent settings.
  void validate() const;
};

/// Independent generator for one purpose, derived from the master seed.
enum class Stream : std::uint64_t { train_data = 1, test_data = 2, init = 3, shuffle = 4, crop = 5 };
std::mt19937_64 derive_rng(std::uint64_t seed, Stream stream);

struct Rect {
  int y0, x0, h, w;
  int label;
  double depth;
};

struct SynthScene {
  Tensor depth;      // (1,1,S,S), meters
  Tensor labels;     // (1,1,S,S), class ids, 0 background
  Tensor intensity;  // (1,1,S,S), albedo times depth shading
  std::vector<Rect> rects;
};

/// Depth range, in meters, of rectangles of class `label` (1-based); the
/// background sits behind every class.
std::pair<double, double> class_depth_range(int label);

/// Rasterises rectangles far to near so the nearest one owns overlaps.
SynthScene render_scene(int size, int classes, const std::vector<Rect>& rects, double background_depth, double tilt);
SynthScene random_scene(const SynthConfig& config, std::mt19937_64& rng);

/// Writes `train/` and `test/` MPT1 triples plus manifest.csv under `dir`.
void write_synthetic_dataset(const SynthConfig& config, std::uint64_t seed, const std::filesystem::path& dir);

struct Dataset {
  Tensor inputs;  // (N,1,H,W)
  Tensor labels;  // (N,1,H,W)
  Tensor depth;   // (N,1,H,W)
  int count() const { return inputs.shape().n; }
};

bool has_split(const std::filesystem::path& dir, const std::string& split);
/// Loads one split listed in `dir`/manifest.csv.
Dataset load_split(const std::filesystem::path& dir, const std::string& split, InputKind input);

/// Largest centred window whose sides are multiples of `multiple`.
Tensor center_crop(const Tensor& t, int multiple);

struct MetricRow {
  std::vector<std::string> names;
  std::vector<double> values;

  double get(const std::string& name) const;
};

std::vector<std::string> metric_names(model::Task task);

/// Eval-mode metrics over a whole dataset. Inputs are centre-cropped to a
/// multiple of 2^depth first.
MetricRow evaluate(model::Model& net, const Dataset& data, const ExperimentConfig& config);

struct EpochRecord {
  int epoch;
  double lr;
  double train_loss;
  std::optional<MetricRow> test;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  double final_lr;
  MetricRow final_train_metrics;  // eval mode, after the last epoch
  std::optional<MetricRow> final_test_metrics;
  std::filesystem::path checkpoint;
  double wall_time;
};

/// Trains on `config.data`/train, evaluates on test after each epoch when
/// that split exists, writes metrics.csv, final_metrics.csv and model.mpc
/// under `config.out`. Throws DivergedTraining on a non-finite loss.
TrainResult train(const ExperimentConfig& config);

/// Throws ConfigMismatch when the checkpoint's task differs from the
/// configured one.
MetricRow evaluate_checkpoint(const ExperimentConfig& config, const std::string& split);

struct BenchRow {
  model::Scheme scheme;
  model::ParamBreakdown params;
  MetricRow metrics;
  double wall_time;
};

/// Trains every scheme on the same data and seed; writes bench.csv.
std::vector<BenchRow> bench(const ExperimentConfig& config);

/// Appends rows to a CSV file, writing the header when the file is new.
/// An existing file with a different header raises ConfigMismatch.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);
  void row(const std::vector<std::string>& cells);

 private:
  std::filesystem::path path_;
  std::size_t columns_;
};

std::string format_number(double value);

}  // namespace app

MORPHPOOL_END_NAMESPACE
