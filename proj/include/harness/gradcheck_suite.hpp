#pragma once

#include <string>
#include <vector>

#include "tensel/gradcheck.hpp"

namespace harness {

/// One gradient-checked module fixture.
struct ModuleCheck {
  std::string module;
  tensel::GradCheckReport report;
};

struct GradSuiteResult {
  std::vector<ModuleCheck> checks;
  double max_rel_err = 0.0;
  std::int64_t skipped = 0;
  bool passed(double tol = 1e-4) const { return max_rel_err < tol; }
};

/// Runs central-difference checks (eps 1e-5, double precision) over every
/// differentiable module on random 2-channel 16x16 feature fixtures:
/// resampler, reliability head, router, each expert, detection head, the
/// three losses and the full pipeline (k=3 and a k=2 variant that exercises
/// top-k set-stability skips).
GradSuiteResult run_gradcheck_suite(std::uint64_t seed = 7);

std::string gradcheck_table(const GradSuiteResult& result);

}  // namespace harness
