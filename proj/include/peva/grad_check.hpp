#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "peva/autograd.hpp"

namespace peva {

struct GradCheckOptions {
  double step = 1e-5;
  /// Passing threshold on the maximum relative error.
  double tolerance = 1e-6;
  /// When set, the step for entry θ is step·max(1, |θ|).
  bool relative_step = false;
  /// Relative error is |analytic − numeric| / max(|analytic|, |numeric|, floor).
  double denominator_floor = 1e-3;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
  std::size_t checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

/// Builds the scalar objective on a fresh tape from leaf variables bound to the params.
using Objective = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares tape gradients against central differences for every entry of every param.
/// Throws NumericError if the objective evaluates to a non-finite value.
GradCheckReport grad_check(const Objective& objective, std::span<const NamedTensor> params,
                           const GradCheckOptions& options = {});

}  // namespace peva
