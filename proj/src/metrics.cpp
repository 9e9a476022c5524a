#include "morphpool/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

MORPHPOOL_BEGIN_NAMESPACE

namespace metrics {

ConfusionMatrix::ConfusionMatrix(int classes) : classes_(classes) {
  if (classes < 1) throw Error(ErrorCode::InvalidShape, "confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(classes) * classes, 0);
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

void ConfusionMatrix::add(int truth, int pred) {
  if (truth == kVoidLabel) return;
  if (truth < 0 || truth >= classes_ || pred < 0 || pred >= classes_) {
    throw Error(ErrorCode::InvalidShape, "label out of range: truth " + std::to_string(truth) + ", pred " +
                                             std::to_string(pred));
  }
  ++counts_[truth * classes_ + pred];
}

void ConfusionMatrix::add(const Tensor& pred_labels, const Tensor& true_labels) {
  if (pred_labels.shape() != true_labels.shape()) {
    throw Error(ErrorCode::ShapeMismatch, pred_labels.shape().str() + " vs " + true_labels.shape().str());
  }
  for (std::size_t i = 0; i < pred_labels.size(); ++i) {
    add(static_cast<int>(true_labels[i]), static_cast<int>(pred_labels[i]));
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw Error(ErrorCode::ShapeMismatch, "class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

SegmentationScores miou_and_accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw Error(ErrorCode::EmptyTarget, "no valid pixels");
  const int k = cm.classes();
  SegmentationScores out;
  std::uint64_t diagonal = 0;
  double iou_sum = 0;
  int counted = 0;
  for (int c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    diagonal += tp;
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) {
      out.iou.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    out.iou.push_back(iou);
    iou_sum += iou;
    ++counted;
  }
  out.miou = iou_sum / counted;
  out.pixel_accuracy = static_cast<double>(diagonal) / static_cast<double>(total);
  return out;
}

Tensor argmax_labels(const Tensor& logits) {
  const Shape& s = logits.shape();
  Tensor out(Shape{s.n, 1, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        int best = 0;
        for (int c = 1; c < s.c; ++c) {
          if (logits(n, c, y, x) > logits(n, best, y, x)) best = c;
        }
        out(n, 0, y, x) = static_cast<Scalar>(best);
      }
    }
  }
  return out;
}

int default_boundary_tolerance(int height, int width) {
  const double diagonal = std::hypot(static_cast<double>(height), static_cast<double>(width));
  return static_cast<int>(std::ceil(0.0075 * diagonal));
}

namespace {

template <typename Same>
std::vector<std::uint8_t> edges(int h, int w, Same same) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const bool right = x + 1 < w && !same(y, x, y, x + 1);
      const bool down = y + 1 < h && !same(y, x, y + 1, x);
      mask[static_cast<std::size_t>(y) * w + x] = right || down;
    }
  }
  return mask;
}

// Counts pixels of `from` that have a pixel of `to` within Euclidean `radius`.
std::size_t matched(const std::vector<std::uint8_t>& from, const std::vector<std::uint8_t>& to, int h, int w,
                    int radius) {
  std::size_t hits = 0;
  const int r2 = radius * radius;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!from[static_cast<std::size_t>(y) * w + x]) continue;
      bool found = false;
      for (int dy = -radius; dy <= radius && !found; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -radius; dx <= radius; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w || dy * dy + dx * dx > r2) continue;
          if (to[static_cast<std::size_t>(yy) * w + xx]) {
            found = true;
            break;
          }
        }
      }
      hits += found;
    }
  }
  return hits;
}

// Returns -1 when both sets are empty.
double f1_score(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth, int h, int w,
                int radius) {
  const auto np = std::count(pred.begin(), pred.end(), 1);
  const auto nt = std::count(truth.begin(), truth.end(), 1);
  if (np == 0 && nt == 0) return -1;
  if (np == 0 || nt == 0) return 0;
  const double precision = static_cast<double>(matched(pred, truth, h, w, radius)) / static_cast<double>(np);
  const double recall = static_cast<double>(matched(truth, pred, h, w, radius)) / static_cast<double>(nt);
  if (precision + recall == 0) return 0;
  return 2 * precision * recall / (precision + recall);
}

}  // namespace

std::vector<std::uint8_t> boundary_mask(const Tensor& labels, int n) {
  const Shape& s = labels.shape();
  return edges(s.h, s.w, [&](int y0, int x0, int y1, int x1) { return labels(n, 0, y0, x0) == labels(n, 0, y1, x1); });
}

double boundary_f1(const Tensor& pred_labels, const Tensor& true_labels, int tolerance, BoundaryMode mode) {
  if (pred_labels.shape() != true_labels.shape()) {
    throw Error(ErrorCode::ShapeMismatch, pred_labels.shape().str() + " vs " + true_labels.shape().str());
  }
  if (tolerance < 0) throw Error(ErrorCode::InvalidShape, "negative boundary tolerance");
  const Shape& s = pred_labels.shape();
  double total = 0;
  for (int n = 0; n < s.n; ++n) {
    if (mode == BoundaryMode::class_agnostic) {
      const double f1 = f1_score(boundary_mask(pred_labels, n), boundary_mask(true_labels, n), s.h, s.w, tolerance);
      total += f1 < 0 ? 1.0 : f1;
      continue;
    }
    std::vector<int> classes;
    for (const Tensor* t : {&pred_labels, &true_labels}) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) classes.push_back(static_cast<int>((*t)(n, 0, y, x)));
      }
    }
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    double sum = 0;
    int counted = 0;
    for (int k : classes) {
      if (k == kVoidLabel) continue;
      auto member = [k](const Tensor& t, int n_) {
        return [&t, k, n_](int y0, int x0, int y1, int x1) {
          return (t(n_, 0, y0, x0) == k) == (t(n_, 0, y1, x1) == k);
        };
      };
      const double f1 = f1_score(edges(s.h, s.w, member(pred_labels, n)), edges(s.h, s.w, member(true_labels, n)),
                                 s.h, s.w, tolerance);
      if (f1 < 0) continue;
      sum += f1;
      ++counted;
    }
    total += counted == 0 ? 1.0 : sum / counted;
  }
  return total / s.n;
}

void DepthAccumulator::add(const Tensor& pred, const Tensor& target, const Tensor* mask) {
  if (pred.shape() != target.shape() || (mask && mask->shape() != target.shape())) {
    throw Error(ErrorCode::ShapeMismatch, pred.shape().str() + " vs " + target.shape().str());
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double t = target[i];
    const bool valid = mask ? (*mask)[i] != 0 : (std::isfinite(t) && t > 0);
    if (!valid) continue;
    const double p = pred[i];
    const double diff = p - t;
    abs_rel_ += std::abs(diff) / t;
    squared_ += diff * diff;
    if (p > 0 && std::max(p / t, t / p) < 1.25) ++within_;
    ++pixels_;
  }
}

DepthScores DepthAccumulator::result() const {
  if (pixels_ == 0) throw Error(ErrorCode::EmptyTarget, "no valid depth pixels");
  const double n = static_cast<double>(pixels_);
  return DepthScores{abs_rel_ / n, std::sqrt(squared_ / n), static_cast<double>(within_) / n, pixels_};
}

DepthScores depth_metrics(const Tensor& pred, const Tensor& target, const Tensor* mask) {
  DepthAccumulator acc;
  acc.add(pred, target, mask);
  return acc.result();
}

}  // namespace metrics

MORPHPOOL_END_NAMESPACE
