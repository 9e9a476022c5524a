#include <gtest/gtest.h>

#include <cmath>

#include "morphpool/app/gradcheck_suite.hpp"

using namespace mp;

TEST(GradcheckSuite, EveryOpPasses) {
  suite::Options options;
  options.seeds = 3;
  const auto rows = suite::run(options);
  ASSERT_EQ(rows.size(), suite::case_names().size());
  for (const auto& row : rows) {
    EXPECT_TRUE(row.passed) << row.op << " " << row.max_rel_error;
    EXPECT_GT(row.checked, 0u) << row.op;
    EXPECT_TRUE(std::isfinite(row.max_rel_error)) << row.op;
    EXPECT_LT(row.max_rel_error, options.tolerance) << row.op;
  }
}

TEST(GradcheckSuite, CoversTheDifferentiableOps) {
  const auto names = suite::case_names();
  for (const char* prefix : {"dilate2d.input", "dilate2d.se", "dilate2d.sigma", "erode2d", "morph_pool",
                             "morph_unpool", "conv2d", "transposed_conv2d", "depthwise_conv2d", "batchnorm",
                             "cross_entropy", "masked_l2", "bilinear_upsample", "zero_unpool", "max_pool_classic"}) {
    bool found = false;
    for (const auto& n : names) found = found || n.rfind(prefix, 0) == 0;
    EXPECT_TRUE(found) << prefix;
  }
}

TEST(GradcheckSuite, CorruptedDilationBackwardFails) {
  suite::Options options;
  options.seeds = 2;
  options.corrupt_dilate_backward = true;
  options.filter = "dilate2d";
  const auto rows = suite::run(options);
  ASSERT_FALSE(rows.empty());
  for (const auto& row : rows) {
    EXPECT_FALSE(row.passed) << row.op;
    EXPECT_GT(row.max_rel_error, 1e-2) << row.op;
  }

  options.filter = "conv2d";
  for (const auto& row : suite::run(options)) EXPECT_TRUE(row.passed) << row.op;
}
