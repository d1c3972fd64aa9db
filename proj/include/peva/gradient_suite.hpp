#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "peva/grad_check.hpp"

namespace peva {

struct GradSuiteEntry {
  std::string name;
  GradCheckOptions options;
  GradCheckReport report;
};

struct GradSuiteReport {
  std::uint64_t seed = 0;
  std::vector<GradSuiteEntry> entries;
  /// max |∂L_fd/∂f_few − 2(f_few − f_zero)| over a random instance.
  double distill_grad_max_abs_err = 0.0;
  double distill_grad_tolerance = 1e-9;
  bool passed = true;

  std::string to_text() const;
};

/// Finite-difference verification of every tape op the encoder uses, both
/// losses, and the full encoder + loss objective (single-block at the default
/// widths with D=8, M≤3; plus a two-block and a positional variant).
GradSuiteReport run_gradient_suite(std::uint64_t seed);

}  // namespace peva
