#pragma once

#include <cstdint>
#include <vector>

#include "morphpool/tensor.hpp"

MORPHPOOL_BEGIN_NAMESPACE

namespace metrics {

inline constexpr int kVoidLabel = 255;

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);

  int classes() const { return classes_; }
  std::uint64_t at(int truth, int pred) const { return counts_[truth * classes_ + pred]; }
  std::uint64_t total() const;

  void add(int truth, int pred);
  /// Accumulates label maps of identical shape; void truth pixels are skipped.
  void add(const Tensor& pred_labels, const Tensor& true_labels);
  void merge(const ConfusionMatrix& other);

 private:
  int classes_;
  std::vector<std::uint64_t> counts_;
};

struct SegmentationScores {
  double miou = 0;
  double pixel_accuracy = 0;
  std::vector<double> iou;  // NaN for classes absent from both truth and prediction
};

/// mIoU averages over classes whose union is non-empty. Throws EmptyTarget
/// when the matrix holds no pixels.
SegmentationScores miou_and_accuracy(const ConfusionMatrix& cm);

/// Per-pixel argmax over channels, first maximum wins: (n, c, h, w) logits
/// to (n, 1, h, w) labels.
Tensor argmax_labels(const Tensor& logits);

/// ceil(0.0075 * image diagonal).
int default_boundary_tolerance(int height, int width);

/// A pixel lies on a boundary when its right or lower neighbour carries a
/// different label, so a straight edge yields a one-pixel-wide line.
std::vector<std::uint8_t> boundary_mask(const Tensor& labels, int n);

enum class BoundaryMode { class_agnostic, per_class };

/// Boundary F1 with matching radius `tolerance` (Euclidean). Class-agnostic
/// mode compares label-change boundaries; per-class mode averages F1 over
/// the classes whose boundary appears in either map. Both sets empty scores
/// 1, exactly one empty scores 0. Averages over the batch.
double boundary_f1(const Tensor& pred_labels, const Tensor& true_labels, int tolerance,
                   BoundaryMode mode = BoundaryMode::class_agnostic);

struct DepthScores {
  double ard = 0;
  double rms = 0;
  double delta = 0;  // fraction with max(p/t, t/p) < 1.25
  std::size_t pixels = 0;
};

/// Valid pixels: mask != 0 when a mask is given, otherwise finite target > 0.
/// Throws EmptyTarget when none are valid.
DepthScores depth_metrics(const Tensor& pred, const Tensor& target, const Tensor* mask = nullptr);

/// Running sums so scores can be accumulated batch by batch.
class DepthAccumulator {
 public:
  void add(const Tensor& pred, const Tensor& target, const Tensor* mask = nullptr);
  DepthScores result() const;

 private:
  double abs_rel_ = 0;
  double squared_ = 0;
  std::size_t within_ = 0;
  std::size_t pixels_ = 0;
};

}  // namespace metrics

MORPHPOOL_END_NAMESPACE
