#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "polyseg/harness/spec.hpp"
#include "polyseg/nn.hpp"

namespace polyseg::harness {

/// Adam over the trainable entries of a registry, in registry order.
class Adam {
 public:
  Adam(ParamRegistry& params, OptimizerSpec spec);

  /// Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad();

  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }
  void set_lr(double lr) { spec_.lr = lr; }
  const OptimizerSpec& spec() const { return spec_; }

  // Moments per trainable entry, index-aligned with params.trainable().
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }

 private:
  std::vector<NamedParam> params_;
  OptimizerSpec spec_;
  std::uint64_t steps_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// L2 norm of the current gradients grouped by top-level module name.
std::map<std::string, double> grad_norms_by_module(const ParamRegistry& params);

}  // namespace polyseg::harness
