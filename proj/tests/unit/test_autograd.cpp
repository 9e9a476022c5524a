#include <gtest/gtest.h>

#include <cstring>

#include "morphpool/autograd.hpp"
#include "morphpool/gradcheck.hpp"
#include "morphpool/morph.hpp"
#include "morphpool/nn.hpp"
#include "support/oracles.hpp"

using namespace mp;

TEST(Backward, SumGivesOnes) {
  ag::Tape tape;
  const ag::Var x = tape.leaf(Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4}), true);
  const ag::Gradients g = tape.backward(ag::sum(x));
  EXPECT_EQ(g.at(x), Tensor(Shape{1, 1, 2, 2}, 1));
}

TEST(Backward, MaxReduceIsOneHotAtArgmax) {
  ag::Tape tape;
  const ag::Var x = tape.leaf(Tensor(Shape{1, 1, 2, 2}, {1, 9, 3, 4}), true);
  const ag::Gradients g = tape.backward(ag::sum(ag::max_reduce(x)));
  EXPECT_EQ(g.at(x), Tensor(Shape{1, 1, 2, 2}, {0, 1, 0, 0}));
}

TEST(Backward, DilationMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const Tensor x = oracle::random_tensor(Shape{1, 2, 6, 6}, rng);
  auto f = [](ag::Tape& tape, ag::Var v) {
    const ag::Var w = tape.constant(Tensor::zeros(Shape{1, 1, 3, 3}));
    return ag::sum(ag::dilate2d(v, w, morph::Window{3, 1, 1}));
  };
  const ag::GradCheckReport report = ag::grad_check(f, x);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_LT(report.max_rel_error, 1e-4);
  EXPECT_EQ(report.checked + report.tie_warnings.size(), x.size());

  // Independent check with the test-side finite-difference oracle.
  ag::Tape tape;
  const ag::Var leaf = tape.leaf(x, true);
  const Tensor analytic = tape.backward(f(tape, leaf)).at(leaf);
  const Tensor numeric = oracle::numeric_gradient(
      [&](const Tensor& p) {
        ag::Tape t;
        return static_cast<double>(f(t, t.leaf(p)).value().item());
      },
      x, 1e-6);
  EXPECT_LT(oracle::max_rel_diff(analytic, numeric), 1e-6);
}

TEST(Backward, NonScalarLossThrows) {
  ag::Tape tape;
  const ag::Var x = tape.leaf(Tensor(Shape{1, 1, 2, 2}), true);
  try {
    tape.backward(x);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonScalarLoss);
  }
}

TEST(Backward, AccumulatesOverRepeatedUse) {
  std::mt19937_64 rng(1);
  const Tensor v = oracle::random_tensor(Shape{1, 2, 3, 3}, rng);
  const Tensor w = oracle::random_tensor(Shape{1, 2, 3, 3}, rng);
  for (int k = 1; k <= 4; ++k) {
    ag::Tape tape;
    const ag::Var x = tape.leaf(v, true);
    ag::Var acc = x;
    for (int i = 1; i < k; ++i) acc = ag::add(acc, x);
    const ag::Gradients g = tape.backward(ag::weighted_sum(acc, w));
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_DOUBLE_EQ(g.at(x)[i], k * w[i]);
  }
}

TEST(Backward, IsDeterministicAndRepeatable) {
  std::mt19937_64 rng(2);
  const Tensor v = oracle::random_tensor(Shape{2, 3, 8, 8}, rng);
  ag::Tape tape;
  const ag::Var x = tape.leaf(v, true);
  const ag::Var se = tape.leaf(oracle::random_tensor(Shape{3, 1, 2, 2}, rng, -1, 0), true);
  const ag::PoolOutput pooled = ag::morph_pool(x, se, 2, 2);
  const ag::Var up = ag::morph_unpool(pooled.values, pooled.provenance, tape.constant(Tensor::zeros(Shape{1, 1, 3, 3})));
  const ag::Var loss = ag::mean(ag::mul(up, up));
  const ag::Gradients a = tape.backward(loss);
  const ag::Gradients b = tape.backward(loss);
  EXPECT_EQ(std::memcmp(a.at(x).data().data(), b.at(x).data().data(), v.size() * sizeof(Scalar)), 0);
  EXPECT_EQ(a.at(se), b.at(se));
}

TEST(Backward, GradientShapesMatchValues) {
  ag::Tape tape;
  const ag::Var x = tape.leaf(Tensor(Shape{2, 3, 4, 5}, 1), true);
  const ag::Var y = tape.leaf(Tensor(Shape{2, 3, 4, 5}, 2), true);
  const ag::Gradients g = tape.backward(ag::sum(ag::mul(x, y)));
  EXPECT_EQ(g.at(x).shape(), x.shape());
  EXPECT_EQ(g.at(y).shape(), y.shape());
  EXPECT_EQ(g.at(x), Tensor(Shape{2, 3, 4, 5}, 2));
}

TEST(Backward, ConstantsReceiveNoGradient) {
  ag::Tape tape;
  const ag::Var x = tape.leaf(Tensor(Shape{1, 1, 2, 2}, 1), true);
  const ag::Var c = tape.constant(Tensor(Shape{1, 1, 2, 2}, 3));
  const ag::Gradients g = tape.backward(ag::sum(ag::mul(x, c)));
  EXPECT_EQ(g.find(c), nullptr);
  ASSERT_NE(g.find(x), nullptr);
}

TEST(Tape, NodesAreTopologicallyOrdered) {
  ag::Tape tape;
  const ag::Var x = tape.leaf(Tensor(Shape{1, 1, 2, 2}, 1), true);
  const ag::Var y = ag::relu(ag::add(x, x));
  const ag::Var z = ag::sum(ag::mul(y, x));
  for (ag::NodeId id = 0; id < tape.size(); ++id) {
    for (ag::NodeId input : tape.inputs(ag::Var{&tape, id})) EXPECT_LT(input, id);
  }
  EXPECT_EQ(tape.op_name(z), "sum");
}

TEST(GradCheck, ReluWithoutZerosPasses) {
  std::mt19937_64 rng(8);
  Tensor x = oracle::random_tensor(Shape{1, 2, 4, 4}, rng);
  for (Scalar& v : x.data()) {
    if (std::abs(v) < 0.05) v = 0.5;
  }
  const auto report = ag::grad_check([](ag::Tape&, ag::Var v) { return ag::sum(ag::relu(v)); }, x);
  EXPECT_TRUE(report.passed);
  EXPECT_TRUE(report.tie_warnings.empty());
}

TEST(GradCheck, ParabolicSigmaPasses) {
  std::mt19937_64 rng(9);
  const Tensor f = oracle::random_tensor(Shape{2, 3, 5, 5}, rng);
  const Tensor sigma(Shape{3, 1, 1, 1}, {1.0, 0.7, 1.6});
  const auto report = ag::grad_check(
      [&](ag::Tape& tape, ag::Var s) {
        return ag::sum(ag::dilate2d(tape.constant(f), ag::parabolic_weights(s, 3, 1), morph::Window{3, 1, 1}));
      },
      sigma);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_EQ(report.checked, 3u);
}

TEST(GradCheck, PoolUnpoolChainWithGeneralElementsPasses) {
  std::mt19937_64 rng(10);
  const Tensor f = oracle::random_tensor(Shape{1, 2, 8, 8}, rng);
  const Tensor down = oracle::random_tensor(Shape{2, 1, 2, 2}, rng, -0.5, 0);
  const Tensor up = oracle::random_tensor(Shape{2, 1, 3, 3}, rng, -0.5, 0);
  const auto report = ag::grad_check(
      [&](ag::Tape& tape, ag::Var x) {
        const ag::PoolOutput pooled = ag::morph_pool(x, tape.constant(down), 2, 2);
        return ag::sum(ag::morph_unpool(pooled.values, pooled.provenance, tape.constant(up)));
      },
      f);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(GradCheck, ReportsTiesInsteadOfFailing) {
  // Two equal maxima in every pooling window: perturbing either flips the
  // argmax, which the check must report as a tie rather than a mismatch.
  const Tensor x(Shape{1, 1, 2, 2}, {1, 1, 0, 0});
  const auto report = ag::grad_check(
      [](ag::Tape& tape, ag::Var v) {
        return ag::sum(ag::morph_pool(v, tape.constant(Tensor::zeros(Shape{1, 1, 2, 2})), 2, 2).values);
      },
      x);
  EXPECT_FALSE(report.tie_warnings.empty());
  EXPECT_TRUE(report.passed);
}

TEST(GradCheck, DetectsAWrongBackwardRule) {
  const Tensor x(Shape{1, 1, 1, 3}, {0.3, -1.2, 2.0});
  const auto report = ag::grad_check(
      [](ag::Tape& tape, ag::Var v) {
        // forward computes 3x but the backward claims the derivative is 2
        Tensor value = v.value();
        value *= 3;
        const ag::Var y = tape.record("wrong", std::move(value), {v}, [](const Tensor& g, ag::GradSink& sink) {
          if (Tensor* gx = sink.grad(0)) {
            Tensor scaled = g;
            scaled *= 2;
            *gx += scaled;
          }
        });
        return ag::sum(y);
      },
      x);
  EXPECT_FALSE(report.passed);
  EXPECT_GT(report.max_rel_error, 0.3);
}
