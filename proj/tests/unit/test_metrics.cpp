#include <gtest/gtest.h>

#include <cmath>

#include "morphpool/metrics.hpp"
#include "support/oracles.hpp"

using namespace mp;
using metrics::BoundaryMode;

namespace {

Tensor random_labels(Shape s, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dist(0, classes - 1);
  Tensor t(s);
  for (Scalar& v : t.data()) v = static_cast<Scalar>(dist(rng));
  return t;
}

// Blocky label map: a few axis-aligned rectangles on background 0.
Tensor blocky_labels(int h, int w, int classes, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros(Shape{1, 1, h, w});
  std::uniform_int_distribution<int> pos(0, h - 4);
  std::uniform_int_distribution<int> cls(1, classes - 1);
  for (int r = 0; r < 3; ++r) {
    const int y0 = pos(rng), x0 = pos(rng), label = cls(rng);
    for (int y = y0; y < std::min(h, y0 + 6); ++y) {
      for (int x = x0; x < std::min(w, x0 + 7); ++x) t(0, 0, y, x) = label;
    }
  }
  return t;
}

// Vertical step edge: class 0 left of column `edge`, class 1 from it on.
Tensor step(int size, int edge) {
  Tensor t = Tensor::zeros(Shape{1, 1, size, size});
  for (int y = 0; y < size; ++y) {
    for (int x = edge; x < size; ++x) t(0, 0, y, x) = 1;
  }
  return t;
}

}  // namespace

TEST(Miou, PerfectPrediction) {
  std::mt19937_64 rng(1);
  const Tensor labels = random_labels(Shape{2, 1, 8, 8}, 4, rng);
  metrics::ConfusionMatrix cm(4);
  cm.add(labels, labels);
  const auto s = metrics::miou_and_accuracy(cm);
  EXPECT_EQ(s.miou, 1.0);
  EXPECT_EQ(s.pixel_accuracy, 1.0);
  EXPECT_EQ(cm.total(), 128u);
}

TEST(Miou, HandComputedTwoClass) {
  metrics::ConfusionMatrix cm(2);
  const Tensor truth(Shape{1, 1, 1, 4}, {0, 0, 1, 1});
  cm.add(Tensor::zeros(truth.shape()), truth);
  const auto s = metrics::miou_and_accuracy(cm);
  EXPECT_DOUBLE_EQ(s.pixel_accuracy, 0.5);
  EXPECT_DOUBLE_EQ(s.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(s.iou[1], 0.0);
  EXPECT_DOUBLE_EQ(s.miou, 0.25);
}

TEST(Miou, AbsentClassIsExcluded) {
  metrics::ConfusionMatrix cm(3);
  cm.add(0, 0);
  cm.add(1, 1);
  cm.add(1, 0);
  const auto s = metrics::miou_and_accuracy(cm);
  EXPECT_TRUE(std::isnan(s.iou[2]));
  EXPECT_DOUBLE_EQ(s.miou, (0.5 + 0.5) / 2);
}

TEST(Miou, VoidPixelsAndEmptyMatrix) {
  metrics::ConfusionMatrix cm(2);
  cm.add(Tensor(Shape{1, 1, 1, 3}, {1, 1, 0}), Tensor(Shape{1, 1, 1, 3}, {metrics::kVoidLabel, 1, 0}));
  EXPECT_EQ(cm.total(), 2u);

  try {
    metrics::miou_and_accuracy(metrics::ConfusionMatrix(3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyTarget);
  }
}

TEST(Miou, InvariantUnderRelabeling) {
  std::mt19937_64 rng(2);
  const std::vector<int> perm{2, 0, 3, 1};
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor truth = random_labels(Shape{1, 1, 10, 10}, 4, rng);
    const Tensor pred = random_labels(Shape{1, 1, 10, 10}, 4, rng);
    Tensor pt = truth, pp = pred;
    for (Scalar& v : pt.data()) v = perm[static_cast<int>(v)];
    for (Scalar& v : pp.data()) v = perm[static_cast<int>(v)];
    metrics::ConfusionMatrix a(4), b(4);
    a.add(pred, truth);
    b.add(pp, pt);
    const auto sa = metrics::miou_and_accuracy(a);
    const auto sb = metrics::miou_and_accuracy(b);
    EXPECT_NEAR(sa.miou, sb.miou, 1e-12);
    EXPECT_EQ(sa.pixel_accuracy, sb.pixel_accuracy);
    EXPECT_GE(sa.miou, 0);
    EXPECT_LE(sa.miou, 1);
  }
}

TEST(Miou, MergeEqualsJointAccumulation) {
  std::mt19937_64 rng(3);
  const Tensor t1 = random_labels(Shape{1, 1, 6, 6}, 3, rng), p1 = random_labels(Shape{1, 1, 6, 6}, 3, rng);
  const Tensor t2 = random_labels(Shape{1, 1, 6, 6}, 3, rng), p2 = random_labels(Shape{1, 1, 6, 6}, 3, rng);
  metrics::ConfusionMatrix a(3), b(3), joint(3);
  a.add(p1, t1);
  b.add(p2, t2);
  joint.add(p1, t1);
  joint.add(p2, t2);
  a.merge(b);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_EQ(a.at(i, j), joint.at(i, j));
  }
}

TEST(ArgmaxLabels, FirstMaximumWins) {
  Tensor logits(Shape{1, 3, 1, 2}, {1, 0, 5, 2, 5, 2});
  // pixel 0: (1, 5, 5) -> 1; pixel 1: (0, 2, 2) -> 1
  EXPECT_EQ(metrics::argmax_labels(logits), Tensor(Shape{1, 1, 1, 2}, {1, 1}));
}

TEST(BoundaryF1, Tolerance) {
  EXPECT_EQ(metrics::default_boundary_tolerance(64, 64), 1);
  EXPECT_EQ(metrics::default_boundary_tolerance(384, 512), 5);
}

TEST(BoundaryF1, IdenticalMapsScoreOne) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor l = blocky_labels(24, 24, 4, rng);
    EXPECT_EQ(metrics::boundary_f1(l, l, 1), 1.0);
    EXPECT_EQ(metrics::boundary_f1(l, l, 0, BoundaryMode::per_class), 1.0);
  }
}

TEST(BoundaryF1, ShiftedEdge) {
  for (int theta : {1, 2, 3}) {
    const Tensor truth = step(20, 8);
    EXPECT_EQ(metrics::boundary_f1(step(20, 8 + theta), truth, theta), 1.0) << theta;
    EXPECT_EQ(metrics::boundary_f1(step(20, 8 + theta + 1), truth, theta), 0.0) << theta;
    EXPECT_EQ(metrics::boundary_f1(step(20, 8 - theta), truth, theta), 1.0) << theta;
  }
}

TEST(BoundaryF1, DegenerateSets) {
  const Tensor flat = Tensor::zeros(Shape{1, 1, 10, 10});
  EXPECT_EQ(metrics::boundary_f1(flat, flat, 1), 1.0);
  EXPECT_EQ(metrics::boundary_f1(step(10, 5), flat, 1), 0.0);
  EXPECT_EQ(metrics::boundary_f1(flat, step(10, 5), 1), 0.0);
}

TEST(BoundaryF1, SymmetricAndBounded) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor a = blocky_labels(20, 20, 4, rng);
    const Tensor b = blocky_labels(20, 20, 4, rng);
    const double ab = metrics::boundary_f1(a, b, 1 + trial % 3);
    const double ba = metrics::boundary_f1(b, a, 1 + trial % 3);
    EXPECT_NEAR(ab, ba, 1e-12);
    EXPECT_GE(ab, 0);
    EXPECT_LE(ab, 1);
  }
}

TEST(BoundaryF1, MatchesBruteForceDistanceOracle) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = blocky_labels(16, 16, 3, rng);
    const Tensor b = blocky_labels(16, 16, 3, rng);
    const int theta = 2;
    const auto ma = metrics::boundary_mask(a, 0);
    const auto mb = metrics::boundary_mask(b, 0);
    auto matched = [&](const std::vector<std::uint8_t>& from, const std::vector<std::uint8_t>& to) {
      int hits = 0, count = 0;
      for (int i = 0; i < 256; ++i) {
        if (!from[i]) continue;
        ++count;
        bool hit = false;
        for (int j = 0; j < 256 && !hit; ++j) {
          const int dy = i / 16 - j / 16, dx = i % 16 - j % 16;
          hit = to[j] && dy * dy + dx * dx <= theta * theta;
        }
        hits += hit;
      }
      return std::pair<int, int>{hits, count};
    };
    const auto [ph, pc] = matched(ma, mb);
    const auto [rh, rc] = matched(mb, ma);
    if (pc == 0 || rc == 0) continue;
    const double p = static_cast<double>(ph) / pc, r = static_cast<double>(rh) / rc;
    const double want = p + r > 0 ? 2 * p * r / (p + r) : 0;
    EXPECT_NEAR(metrics::boundary_f1(a, b, theta), want, 1e-12);
  }
}

TEST(DepthMetrics, Examples) {
  std::mt19937_64 rng(7);
  const Tensor t = oracle::random_tensor(Shape{1, 1, 6, 6}, rng, 0.5, 5);
  const auto same = metrics::depth_metrics(t, t);
  EXPECT_EQ(same.ard, 0);
  EXPECT_EQ(same.rms, 0);
  EXPECT_EQ(same.delta, 1.0);

  const Tensor two(Shape{1, 1, 3, 3}, 2);
  Tensor scaled = two;
  for (Scalar& v : scaled.data()) v *= Scalar(1.25);
  const auto s = metrics::depth_metrics(scaled, two);
  EXPECT_EQ(s.delta, 0);
  EXPECT_NEAR(s.ard, 0.25, 1e-12);

  const auto plus = metrics::depth_metrics(Tensor(Shape{1, 1, 3, 3}, 3), two);
  EXPECT_DOUBLE_EQ(plus.ard, 0.5);
  EXPECT_DOUBLE_EQ(plus.rms, 1.0);
  EXPECT_EQ(plus.delta, 0);
}

TEST(DepthMetrics, MaskAndInvalidPixels) {
  Tensor target(Shape{1, 1, 1, 4}, {2, 0, 2, kInf});
  const Tensor pred(Shape{1, 1, 1, 4}, {2, 9, 3, 9});
  const auto s = metrics::depth_metrics(pred, target);
  EXPECT_EQ(s.pixels, 2u);
  EXPECT_DOUBLE_EQ(s.ard, 0.25);

  const Tensor mask(Shape{1, 1, 1, 4}, {1, 0, 0, 0});
  EXPECT_EQ(metrics::depth_metrics(pred, target, &mask).ard, 0);

  const Tensor none = Tensor::zeros(mask.shape());
  try {
    metrics::depth_metrics(pred, target, &none);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyTarget);
  }
}

TEST(DepthMetrics, NonPositivePredictionIsOutsideThreshold) {
  const auto s = metrics::depth_metrics(Tensor(Shape{1, 1, 1, 2}, {-1, 0}), Tensor(Shape{1, 1, 1, 2}, 1));
  EXPECT_EQ(s.delta, 0);
}

TEST(DepthMetrics, AccumulatorEqualsSingleCall) {
  std::mt19937_64 rng(8);
  const Tensor t = oracle::random_tensor(Shape{2, 1, 5, 5}, rng, 0.5, 5);
  const Tensor p = oracle::random_tensor(Shape{2, 1, 5, 5}, rng, 0.5, 5);
  metrics::DepthAccumulator acc;
  for (int n = 0; n < 2; ++n) {
    Tensor tn(Shape{1, 1, 5, 5}), pn(Shape{1, 1, 5, 5});
    for (int i = 0; i < 25; ++i) {
      tn[i] = t[n * 25 + i];
      pn[i] = p[n * 25 + i];
    }
    acc.add(pn, tn);
  }
  const auto a = acc.result();
  const auto b = metrics::depth_metrics(p, t);
  EXPECT_NEAR(a.ard, b.ard, 1e-12);
  EXPECT_NEAR(a.rms, b.rms, 1e-12);
  EXPECT_EQ(a.delta, b.delta);
  EXPECT_GE(a.delta, 0);
  EXPECT_LE(a.delta, 1);
}
