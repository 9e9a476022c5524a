#include "morphpool/gradcheck.hpp"

#include <algorithm>
#include <cmath>

MORPHPOOL_BEGIN_NAMESPACE

namespace ag {

namespace {

struct Evaluation {
  double value;
  std::uint64_t signature;
};

Evaluation evaluate(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  tape.set_track_selections(true);
  Var out = f(tape, tape.leaf(x, false));
  if (out.shape() != Shape{}) throw Error(ErrorCode::NonScalarLoss, "grad_check target " + out.shape().str());
  return {static_cast<double>(out.value().item()), tape.selection_signature()};
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& options) {
  Tape tape;
  tape.set_track_selections(true);
  Var input = tape.leaf(x, true, "x");
  Var out = f(tape, input);
  const Tensor analytic = tape.backward(out).at(input);
  const std::uint64_t base_signature = tape.selection_signature();

  GradCheckReport report;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Scalar original = probe[i];
    probe[i] = static_cast<Scalar>(original + options.step);
    const Evaluation plus = evaluate(f, probe);
    probe[i] = static_cast<Scalar>(original - options.step);
    const Evaluation minus = evaluate(f, probe);
    probe[i] = original;

    if (plus.signature != base_signature || minus.signature != base_signature) {
      report.tie_warnings.push_back(i);
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2 * options.step);
    const double tape_grad = analytic[i];
    const double denom =
        std::max({std::abs(numeric), std::abs(tape_grad), options.denominator_floor});
    const double rel = std::abs(numeric - tape_grad) / denom;
    ++report.checked;
    if (rel > report.max_rel_error || std::isnan(rel)) {
      report.max_rel_error = std::isnan(rel) ? INFINITY : rel;
      report.worst_index = i;
    }
  }
  report.passed = report.checked > 0 && report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace ag

MORPHPOOL_END_NAMESPACE
