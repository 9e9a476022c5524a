#pragma once

// Finite-difference sweep over every differentiable op. The suite always
// runs against the 64-bit library, so this header exposes only plain types
// and can be included from a build of either precision.

#include <cstddef>
#include <string>
#include <vector>

namespace mp::suite {

struct Options {
  int seeds = 10;
  double step = 1e-6;
  double tolerance = 1e-4;
  /// Substitutes a dilation whose backward scatters to the neighbouring
  /// window offset. Used to show the sweep catches a broken rule.
  bool corrupt_dilate_backward = false;
  /// Only run cases whose name starts with this prefix.
  std::string filter;
};

struct Row {
  std::string op;
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t tie_skips = 0;
  bool passed = false;
};

std::vector<std::string> case_names();
std::vector<Row> run(const Options& options);

}  // namespace mp::suite
