#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "morphpool/app/experiment.hpp"

MORPHPOOL_BEGIN_NAMESPACE

namespace app {

namespace {

constexpr double kBackgroundDepth = 4.5;
constexpr double kMaxTilt = 0.3;

double albedo(int label, int classes) {
  if (label == 0) return 0.2;
  return 0.35 + 0.55 * static_cast<double>(label) / std::max(1, classes - 1);
}

std::string sample_name(int index, const char* kind) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%05d.%s.mpt", index, kind);
  return buffer;
}

}  // namespace

std::pair<double, double> class_depth_range(int label) {
  const double near = static_cast<double>(label);
  return {near, near + 0.6};
}

SynthScene render_scene(int size, int classes, const std::vector<Rect>& rects, double background_depth, double tilt) {
  const Shape shape{1, 1, size, size};
  SynthScene scene{Tensor(shape), Tensor(shape), Tensor(shape), rects};
  for (int y = 0; y < size; ++y) {
    const double row_depth = background_depth + tilt * (2.0 * y / std::max(1, size - 1) - 1.0);
    for (int x = 0; x < size; ++x) scene.depth(0, 0, y, x) = static_cast<Scalar>(row_depth);
  }
  std::vector<Rect> order = rects;
  std::stable_sort(order.begin(), order.end(), [](const Rect& a, const Rect& b) { return a.depth > b.depth; });
  for (const Rect& r : order) {
    for (int y = std::max(0, r.y0); y < std::min(size, r.y0 + r.h); ++y) {
      for (int x = std::max(0, r.x0); x < std::min(size, r.x0 + r.w); ++x) {
        scene.depth(0, 0, y, x) = static_cast<Scalar>(r.depth);
        scene.labels(0, 0, y, x) = static_cast<Scalar>(r.label);
      }
    }
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double d = scene.depth(0, 0, y, x);
      const double shading = 1.0 / (1.0 + 0.15 * d);
      scene.intensity(0, 0, y, x) =
          static_cast<Scalar>(albedo(static_cast<int>(scene.labels(0, 0, y, x)), classes) * shading);
    }
  }
  return scene;
}

SynthScene random_scene(const SynthConfig& config, std::mt19937_64& rng) {
  const int size = config.size;
  std::uniform_int_distribution<int> count(config.min_rects, config.max_rects);
  std::uniform_int_distribution<int> side(std::max(2, size / 8), std::max(2, size / 2));
  std::uniform_int_distribution<int> label(1, config.classes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<Rect> rects(count(rng));
  for (Rect& r : rects) {
    r.h = side(rng);
    r.w = side(rng);
    r.y0 = std::uniform_int_distribution<int>(0, size - r.h)(rng);
    r.x0 = std::uniform_int_distribution<int>(0, size - r.w)(rng);
    r.label = label(rng);
    const auto [lo, hi] = class_depth_range(r.label);
    r.depth = lo + (hi - lo) * unit(rng);
  }
  const double tilt = kMaxTilt * (2 * unit(rng) - 1);
  SynthScene scene = render_scene(size, config.classes, rects, kBackgroundDepth, tilt);
  if (config.noise > 0) {
    std::normal_distribution<double> noise(0.0, config.noise);
    for (Scalar& d : scene.depth.data()) d = static_cast<Scalar>(std::max(1e-3, d + noise(rng)));
    for (Scalar& v : scene.intensity.data()) v = static_cast<Scalar>(v + noise(rng));
  }
  return scene;
}

void write_synthetic_dataset(const SynthConfig& config, std::uint64_t seed, const std::filesystem::path& dir) {
  if (config.size < 2 || config.classes < 2 || config.min_rects < 0 || config.max_rects < config.min_rects ||
      config.train_count < 0 || config.test_count < 0) {
    throw Error(ErrorCode::InvalidSpec, "invalid synthetic dataset settings");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());

  std::ostringstream manifest;
  manifest << "split,index,depth,labels,intensity,rects\n";
  const std::pair<const char*, Stream> splits[] = {{"train", Stream::train_data}, {"test", Stream::test_data}};
  for (const auto& [split, stream] : splits) {
    const int count = std::string(split) == "train" ? config.train_count : config.test_count;
    if (count == 0) continue;
    std::filesystem::create_directories(dir / split, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create " + (dir / split).string());
    std::mt19937_64 rng = derive_rng(seed, stream);
    for (int i = 0; i < count; ++i) {
      const SynthScene scene = random_scene(config, rng);
      const std::string depth = std::string(split) + "/" + sample_name(i, "depth");
      const std::string labels = std::string(split) + "/" + sample_name(i, "labels");
      const std::string intensity = std::string(split) + "/" + sample_name(i, "intensity");
      save(scene.depth, dir / depth);
      save(scene.labels, dir / labels);
      save(scene.intensity, dir / intensity);
      manifest << split << ',' << i << ',' << depth << ',' << labels << ',' << intensity << ','
               << scene.rects.size() << '\n';
    }
  }
  std::ofstream out(dir / "manifest.csv", std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + (dir / "manifest.csv").string());
  out << manifest.str();
}

}  // namespace app

MORPHPOOL_END_NAMESPACE
