#include "polyseg/harness/optim.hpp"

#include <cmath>

#include "polyseg/harness/model.hpp"

namespace polyseg::harness {

Adam::Adam(ParamRegistry& params, OptimizerSpec spec) : params_(params.trainable()), spec_(spec) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor->numel(), 0.0);
    v_.emplace_back(p.tensor->numel(), 0.0);
  }
}

void Adam::step() {
  ++steps_;
  const auto t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(spec_.beta1, t);
  const double bc2 = 1.0 - std::pow(spec_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& impl = *params_[i].tensor->impl();
    if (impl.grad.empty()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < impl.data.size(); ++k) {
      const double g = impl.grad[k];
      m[k] = spec_.beta1 * m[k] + (1.0 - spec_.beta1) * g;
      v[k] = spec_.beta2 * v[k] + (1.0 - spec_.beta2) * g * g;
      impl.data[k] -= spec_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + spec_.eps);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor->zero_grad();
}

std::map<std::string, double> grad_norms_by_module(const ParamRegistry& params) {
  std::map<std::string, double> sq;
  for (const auto& p : params.trainable()) {
    double s = 0.0;
    for (double g : p.tensor->impl()->grad) s += g * g;
    sq[Model::module_of(p.name)] += s;
  }
  for (auto& [name, v] : sq) v = std::sqrt(v);
  return sq;
}

}  // namespace polyseg::harness
