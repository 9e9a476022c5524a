#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "morphpool/autograd.hpp"

MORPHPOOL_BEGIN_NAMESPACE

namespace ag {

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  // Relative error is |tape - numeric| / max(|tape|, |numeric|, floor); the
  // floor keeps rounding noise on near-zero gradients from dominating.
  double denominator_floor = 1e-3;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  /// Elements skipped because a perturbation flipped a discrete choice
  /// (argmax tie or relu kink) somewhere on the tape.
  std::vector<std::size_t> tie_warnings;
  bool passed = false;
};

/// Builds a scalar from a leaf on a fresh tape.
using ScalarFn = std::function<Var(Tape&, Var x)>;

/// Compares the tape gradient of f at x with central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h for every element i. Meaningful in the
/// 64-bit build only.
GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& options = {});

}  // namespace ag

MORPHPOOL_END_NAMESPACE
