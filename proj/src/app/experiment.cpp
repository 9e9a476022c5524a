#include "morphpool/app/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

MORPHPOOL_BEGIN_NAMESPACE

namespace app {

namespace {

constexpr int kEvalBatch = 8;

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
  return cells;
}

struct ManifestEntry {
  std::string depth, labels, intensity;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir, const std::string& split) {
  std::ifstream in(dir / "manifest.csv");
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + (dir / "manifest.csv").string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("split,index,depth,labels,intensity", 0) != 0) {
    throw Error(ErrorCode::CorruptFile, "unexpected manifest header in " + dir.string());
  }
  std::vector<ManifestEntry> entries;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() < 5) throw Error(ErrorCode::CorruptFile, "short manifest row: " + line);
    if (cells[0] == split) entries.push_back({cells[2], cells[3], cells[4]});
  }
  return entries;
}

// Copies sample planes [first, first + count) of a (N,1,H,W) stack, cropping
// a (size_h, size_w) window at the given per-sample offsets.
Tensor gather(const Tensor& stack, const std::vector<int>& indices, int size_h, int size_w,
              const std::vector<std::pair<int, int>>& offsets) {
  Tensor out(Shape{static_cast<int>(indices.size()), 1, size_h, size_w});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto [oy, ox] = offsets[b];
    for (int y = 0; y < size_h; ++y) {
      for (int x = 0; x < size_w; ++x) out(static_cast<int>(b), 0, y, x) = stack(indices[b], 0, y + oy, x + ox);
    }
  }
  return out;
}

std::string join(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  return out;
}

}  // namespace

const char* to_string(InputKind kind) { return kind == InputKind::depth ? "depth" : "intensity"; }

InputKind parse_input_kind(const std::string& name) {
  if (name == "depth") return InputKind::depth;
  if (name == "intensity") return InputKind::intensity;
  throw Error(ErrorCode::InvalidSpec, "unknown input kind '" + name + "'");
}

double ExperimentConfig::initial_lr() const {
  if (lr > 0) return lr;
  return input == InputKind::depth ? 5e-4 : 5e-3;
}

model::ModelSpec ExperimentConfig::model_spec() const {
  model::ModelSpec spec;
  spec.depth = depth;
  spec.base_channels = channels;
  spec.channel_cap = channel_cap;
  spec.convs_per_block = convs_per_block;
  spec.in_channels = 1;
  spec.scheme = scheme;
  spec.task = task;
  spec.classes = classes;
  spec.k_pool = k_pool;
  spec.k_up = k_up;
  return spec;
}

void ExperimentConfig::validate() const {
  model_spec().validate();
  if (epochs < 1) throw Error(ErrorCode::InvalidSpec, "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorCode::InvalidSpec, "batch size must be >= 1");
  if (lr < 0 || momentum < 0 || momentum >= 1) throw Error(ErrorCode::InvalidSpec, "bad learning rate or momentum");
  if (crop < 1 || crop % (1 << depth) != 0) {
    throw Error(ErrorCode::InvalidSpec,
                "crop " + std::to_string(crop) + " is not divisible by 2^" + std::to_string(depth));
  }
}

std::mt19937_64 derive_rng(std::uint64_t seed, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x6d70u};
  return std::mt19937_64(seq);
}

bool has_split(const std::filesystem::path& dir, const std::string& split) {
  return !read_manifest(dir, split).empty();
}

Dataset load_split(const std::filesystem::path& dir, const std::string& split, InputKind input) {
  const auto entries = read_manifest(dir, split);
  if (entries.empty()) throw Error(ErrorCode::IoError, "split '" + split + "' not found in " + dir.string());
  std::vector<Tensor> inputs, labels, depth;
  for (const auto& e : entries) {
    depth.push_back(load(dir / e.depth));
    labels.push_back(load(dir / e.labels));
    inputs.push_back(input == InputKind::depth ? depth.back() : load(dir / e.intensity));
  }
  const Shape first = depth.front().shape();
  if (first.n != 1 || first.c != 1) throw Error(ErrorCode::InvalidShape, "samples must be (1,1,H,W)");
  auto stack = [&](const std::vector<Tensor>& parts) {
    Tensor out(Shape{static_cast<int>(parts.size()), 1, first.h, first.w});
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (parts[i].shape() != first) {
        throw Error(ErrorCode::InvalidShape, "sample " + std::to_string(i) + " has shape " + parts[i].shape().str());
      }
      std::copy(parts[i].data().begin(), parts[i].data().end(), out.plane(static_cast<int>(i), 0).begin());
    }
    return out;
  };
  return Dataset{stack(inputs), stack(labels), stack(depth)};
}

Tensor center_crop(const Tensor& t, int multiple) {
  const Shape& s = t.shape();
  const int h = s.h / multiple * multiple;
  const int w = s.w / multiple * multiple;
  if (h == 0 || w == 0) {
    throw Error(ErrorCode::InvalidShape, s.str() + " is smaller than " + std::to_string(multiple));
  }
  if (h == s.h && w == s.w) return t;
  const int oy = (s.h - h) / 2;
  const int ox = (s.w - w) / 2;
  Tensor out(Shape{s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) out(n, c, y, x) = t(n, c, y + oy, x + ox);
      }
    }
  }
  return out;
}

double MetricRow::get(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return values[i];
  }
  throw Error(ErrorCode::InvalidSpec, "no metric named " + name);
}

std::vector<std::string> metric_names(model::Task task) {
  if (task == model::Task::segmentation) return {"miou", "pixel_acc", "boundary_f1"};
  return {"ard", "rms", "delta"};
}

MetricRow evaluate(model::Model& net, const Dataset& data, const ExperimentConfig& config) {
  const model::ModelSpec& spec = net.spec();
  const int multiple = 1 << spec.depth;
  const Tensor inputs = center_crop(data.inputs, multiple);
  const Tensor targets = center_crop(spec.task == model::Task::segmentation ? data.labels : data.depth, multiple);
  const Shape& s = inputs.shape();
  const int tolerance =
      config.boundary_tolerance >= 0 ? config.boundary_tolerance : metrics::default_boundary_tolerance(s.h, s.w);

  metrics::ConfusionMatrix cm(spec.out_channels());
  metrics::DepthAccumulator depth;
  double boundary_sum = 0;
  const std::vector<std::pair<int, int>> no_offsets(kEvalBatch, {0, 0});
  for (int first = 0; first < s.n; first += kEvalBatch) {
    std::vector<int> indices(std::min(kEvalBatch, s.n - first));
    std::iota(indices.begin(), indices.end(), first);
    const Tensor x = gather(inputs, indices, s.h, s.w, no_offsets);
    const Tensor t = gather(targets, indices, s.h, s.w, no_offsets);
    const Tensor out = net.predict(x);
    if (spec.task == model::Task::segmentation) {
      const Tensor pred = metrics::argmax_labels(out);
      cm.add(pred, t);
      boundary_sum += metrics::boundary_f1(pred, t, tolerance, config.boundary_mode) * indices.size();
    } else {
      depth.add(out, t);
    }
  }
  MetricRow row{metric_names(spec.task), {}};
  if (spec.task == model::Task::segmentation) {
    const auto scores = metrics::miou_and_accuracy(cm);
    row.values = {scores.miou, scores.pixel_accuracy, boundary_sum / s.n};
  } else {
    const auto scores = depth.result();
    row.values = {scores.ard, scores.rms, scores.delta};
  }
  return row;
}

TrainResult train(const ExperimentConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const Dataset data = load_split(config.data, "train", config.input);
  std::optional<Dataset> test;
  if (has_split(config.data, "test")) test = load_split(config.data, "test", config.input);

  if (config.task == model::Task::segmentation) {
    for (Scalar label : data.labels.data()) {
      if (label != metrics::kVoidLabel && (label < 0 || label >= config.classes)) {
        throw Error(ErrorCode::ConfigMismatch, "dataset label " + std::to_string(static_cast<int>(label)) +
                                                   " outside the configured " + std::to_string(config.classes) +
                                                   " classes");
      }
    }
  }

  std::mt19937_64 init_rng = derive_rng(config.seed, Stream::init);
  std::mt19937_64 shuffle_rng = derive_rng(config.seed, Stream::shuffle);
  std::mt19937_64 crop_rng = derive_rng(config.seed, Stream::crop);
  model::Model net = model::Model::build(config.model_spec(), init_rng);

  const Shape& ds = data.inputs.shape();
  const int multiple = 1 << config.depth;
  const int crop_h = std::min(config.crop, ds.h / multiple * multiple);
  const int crop_w = std::min(config.crop, ds.w / multiple * multiple);
  if (crop_h < multiple || crop_w < multiple) {
    throw Error(ErrorCode::InvalidShape, "training images " + ds.str() + " are too small for depth " +
                                             std::to_string(config.depth));
  }
  const Tensor& targets = config.task == model::Task::segmentation ? data.labels : data.depth;

  std::error_code ec;
  std::filesystem::create_directories(config.out, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + config.out.string());

  std::vector<std::string> header{"epoch", "lr", "train_loss"};
  for (const auto& name : metric_names(config.task)) header.push_back("test_" + name);
  std::filesystem::remove(config.out / "metrics.csv", ec);
  CsvWriter log(config.out / "metrics.csv", header);

  const nn::LrSchedule schedule{config.initial_lr(), config.epochs};
  TrainResult result;
  std::vector<int> order(ds.n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = schedule.at(epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    int batches = 0;
    for (int first = 0; first < ds.n; first += config.batch_size) {
      std::vector<int> indices(order.begin() + first, order.begin() + std::min(ds.n, first + config.batch_size));
      std::vector<std::pair<int, int>> offsets;
      for (std::size_t b = 0; b < indices.size(); ++b) {
        offsets.emplace_back(std::uniform_int_distribution<int>(0, ds.h - crop_h)(crop_rng),
                             std::uniform_int_distribution<int>(0, ds.w - crop_w)(crop_rng));
      }
      const Tensor x = gather(data.inputs, indices, crop_h, crop_w, offsets);
      const Tensor t = gather(targets, indices, crop_h, crop_w, offsets);

      ag::Tape tape;
      model::ForwardPass pass = net.forward(tape, x, nn::Mode::train, true);
      const ag::Var loss = model::task_loss(net.spec(), pass.output, t);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw Error(ErrorCode::DivergedTraining, "non-finite loss at epoch " + std::to_string(epoch + 1));
      }
      const ag::Gradients grads = tape.backward(loss);
      net.sgd_step(pass, grads, static_cast<Scalar>(lr), static_cast<Scalar>(config.momentum));
      loss_sum += value;
      ++batches;
    }
    EpochRecord record{epoch + 1, lr, loss_sum / batches, std::nullopt};
    std::vector<std::string> cells{std::to_string(record.epoch), format_number(lr), format_number(record.train_loss)};
    if (test) {
      record.test = evaluate(net, *test, config);
      for (double v : record.test->values) cells.push_back(format_number(v));
    } else {
      cells.resize(header.size());
    }
    log.row(cells);
    result.epochs.push_back(std::move(record));
  }
  result.final_lr = schedule.at(config.epochs);
  result.final_train_metrics = evaluate(net, data, config);
  if (test) result.final_test_metrics = result.epochs.back().test;

  result.checkpoint = config.out / "model.mpc";
  model::save_checkpoint(net, result.checkpoint);

  std::vector<std::string> final_header{"split"};
  for (const auto& name : metric_names(config.task)) final_header.push_back(name);
  final_header.push_back("final_lr");
  std::filesystem::remove(config.out / "final_metrics.csv", ec);
  CsvWriter final_log(config.out / "final_metrics.csv", final_header);
  auto final_row = [&](const std::string& split, const MetricRow& row) {
    std::vector<std::string> cells{split};
    for (double v : row.values) cells.push_back(format_number(v));
    cells.push_back(format_number(result.final_lr));
    final_log.row(cells);
  };
  final_row("train", result.final_train_metrics);
  if (result.final_test_metrics) final_row("test", *result.final_test_metrics);

  result.wall_time = seconds_since(start);
  return result;
}

MetricRow evaluate_checkpoint(const ExperimentConfig& config, const std::string& split) {
  model::Model net = model::load_checkpoint(config.checkpoint);
  if (net.spec().task != config.task) {
    throw Error(ErrorCode::ConfigMismatch, std::string("checkpoint was trained for ") +
                                               model::to_string(net.spec().task) + ", evaluation requested " +
                                               model::to_string(config.task));
  }
  const Dataset data = load_split(config.data, split, config.input);
  const MetricRow row = evaluate(net, data, config);

  std::error_code ec;
  std::filesystem::create_directories(config.out, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + config.out.string());
  std::vector<std::string> header{"checkpoint", "split"};
  header.insert(header.end(), row.names.begin(), row.names.end());
  CsvWriter log(config.out / "eval.csv", header);
  std::vector<std::string> cells{config.checkpoint.string(), split};
  for (double v : row.values) cells.push_back(format_number(v));
  log.row(cells);
  return row;
}

std::vector<BenchRow> bench(const ExperimentConfig& config) {
  const std::vector<model::Scheme> schemes = config.schemes.empty() ? model::all_schemes() : config.schemes;
  std::vector<std::string> header{"scheme", "params_total", "params_sampling"};
  for (const auto& name : metric_names(config.task)) header.push_back(name);
  header.push_back("wall_time");

  std::error_code ec;
  std::filesystem::create_directories(config.out, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + config.out.string());
  CsvWriter log(config.out / "bench.csv", header);

  std::vector<BenchRow> rows;
  for (model::Scheme scheme : schemes) {
    ExperimentConfig run = config;
    run.scheme = scheme;
    run.out = config.out / model::to_string(scheme);
    const TrainResult trained = train(run);
    model::Model net = model::load_checkpoint(trained.checkpoint);
    BenchRow row{scheme, net.count_params(),
                 trained.final_test_metrics ? *trained.final_test_metrics : trained.final_train_metrics,
                 trained.wall_time};
    std::vector<std::string> cells{model::to_string(scheme), std::to_string(row.params.total),
                                   std::to_string(row.params.sampling)};
    for (double v : row.metrics.values) cells.push_back(format_number(v));
    cells.push_back(format_number(row.wall_time));
    log.row(cells);
    rows.push_back(std::move(row));
  }
  return rows;
}

CsvWriter::CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
    : path_(path), columns_(header.size()) {
  const std::string expected = join(header);
  std::ifstream existing(path);
  std::string first;
  if (existing && std::getline(existing, first)) {
    if (first != expected) {
      throw Error(ErrorCode::ConfigMismatch, path.string() + " has header '" + first + "', expected '" +
                                                 expected + "'");
    }
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << expected << '\n';
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) throw Error(ErrorCode::InvalidShape, "CSV row width does not match the header");
  std::ofstream out(path_, std::ios::app);
  if (!out) throw Error(ErrorCode::IoError, "cannot append to " + path_.string());
  out << join(cells) << '\n';
}

std::string format_number(double value) {
  // shortest text that reads back to the same double
  char buffer[40];
  const auto end = std::to_chars(buffer, buffer + sizeof(buffer), value).ptr;
  return std::string(buffer, end);
}

}  // namespace app

MORPHPOOL_END_NAMESPACE
