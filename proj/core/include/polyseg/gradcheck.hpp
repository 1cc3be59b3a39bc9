#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "polyseg/tensor.hpp"

namespace polyseg {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  /// Relative error is |a - n| / max(|a|, |n|, abs_floor); the floor keeps
  /// near-zero gradients from turning round-off into huge ratios.
  double abs_floor = 1e-3;
  /// Per-input cap on checked coordinates; 0 checks all of them. Larger
  /// tensors are subsampled with a seeded shuffle.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  bool skipped = false;  // input does not require grad
  std::size_t coords_checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tol = 0.0;
  bool passed() const { return max_rel_error < tol; }
  std::string summary() const;
};

struct GradCheckInput {
  std::string name;
  Tensor tensor;
};

/// Compares tape gradients of the scalar `f()` against central differences.
///
/// `f` must read the listed tensors (or handles sharing their storage); the
/// check perturbs their values in place and restores them afterwards.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<GradCheckInput>& inputs,
                           const GradCheckOptions& options = {});

}  // namespace polyseg
