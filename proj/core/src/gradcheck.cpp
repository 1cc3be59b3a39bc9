#include "polyseg/gradcheck.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "polyseg/errors.hpp"

namespace polyseg {

std::string GradCheckReport::summary() const {
  std::string s = fmt::format("grad_check {} (max rel err {:.3e}, tol {:.1e})\n", passed() ? "PASS" : "FAIL",
                              max_rel_error, tol);
  for (const auto& e : entries) {
    if (e.skipped) {
      s += fmt::format("  {:<28} skipped (no grad)\n", e.name);
    } else {
      s += fmt::format("  {:<28} coords={:<5} max_rel={:.3e} worst[{}] analytic={:.6e} numeric={:.6e}\n", e.name,
                       e.coords_checked, e.max_rel_error, e.worst_index, e.worst_analytic, e.worst_numeric);
    }
  }
  return s;
}

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<GradCheckInput>& inputs,
                           const GradCheckOptions& options) {
  if (!(options.h > 0.0)) throw ConfigError(fmt::format("grad_check: h must be > 0, got {}", options.h));

  auto& tape = Tape::active();
  const bool was_enabled = tape.enabled();
  tape.set_enabled(true);
  tape.clear();
  for (const auto& in : inputs) in.tensor.impl()->grad.clear();

  Tensor y = f();
  if (y.numel() != 1) throw UsageError("grad_check: f must return a scalar");
  std::vector<std::vector<double>> analytic;
  if (y.requires_grad()) {
    backward(y);
  } else {
    tape.clear();
  }
  for (const auto& in : inputs) analytic.push_back(in.tensor.grad());

  GradCheckReport report;
  report.tol = options.tol;
  std::mt19937_64 rng(options.seed);
  {
    NoGradGuard guard;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      GradCheckEntry entry;
      entry.name = inputs[k].name;
      auto& impl = *inputs[k].tensor.impl();
      if (!impl.requires_grad) {
        entry.skipped = true;
        report.entries.push_back(entry);
        continue;
      }
      std::vector<std::size_t> coords(impl.data.size());
      std::iota(coords.begin(), coords.end(), std::size_t{0});
      if (options.max_coords > 0 && coords.size() > options.max_coords) {
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(options.max_coords);
        std::sort(coords.begin(), coords.end());
      }
      for (std::size_t idx : coords) {
        const double saved = impl.data[idx];
        impl.data[idx] = saved + options.h;
        const double fp = f().item();
        impl.data[idx] = saved - options.h;
        const double fm = f().item();
        impl.data[idx] = saved;
        const double numeric = (fp - fm) / (2.0 * options.h);
        const double a = analytic[k][idx];
        const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
        double rel = std::abs(a - numeric) / denom;
        if (!std::isfinite(rel)) rel = INFINITY;
        if (entry.coords_checked == 0 || rel > entry.max_rel_error) {
          entry.max_rel_error = rel;
          entry.worst_index = idx;
          entry.worst_analytic = a;
          entry.worst_numeric = numeric;
        }
        ++entry.coords_checked;
      }
      report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
      report.entries.push_back(entry);
    }
  }
  tape.set_enabled(was_enabled);
  return report;
}

}  // namespace polyseg
