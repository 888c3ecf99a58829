#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tau {

struct GradCase {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

// Central-finite-difference checks at 64 bits covering every differentiable
// operation, the composite blocks, and the full model (1x1x16x16, depth 2).
// Primitives are held to 1e-5, deep composites to 1e-3 (their checks use a
// smaller step so ReLU/maxpool kink straddling stays below tolerance).
std::vector<GradCase> run_gradient_suite();

// One "PASS/FAIL name err tol" line per case; returns true when all passed.
bool report_gradient_suite(const std::vector<GradCase>& cases, std::ostream& os);

}  // namespace tau
