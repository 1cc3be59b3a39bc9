#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "polyseg/gradcheck.hpp"

namespace polyseg::harness {

struct GradSuiteResult {
  std::string name;
  GradCheckReport report;
  std::size_t input_elements = 0;  // largest checked input
};

/// Finite-difference checks of every differentiable building block on small
/// random inputs (each at most 512 elements), plus the assembled desk model
/// with respect to a representative parameter from each module.
std::vector<GradSuiteResult> run_gradient_suite(std::uint64_t seed, bool include_model = true);

}  // namespace polyseg::harness
