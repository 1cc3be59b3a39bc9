#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "polyseg/nn.hpp"
#include "polyseg/tensor.hpp"

namespace polyseg::fusion {

enum class Method { fnf, uf, sf };

std::string_view method_name(Method m);
Method parse_method(std::string_view s);  // throws ConfigError

inline constexpr double kFnfEps = 1e-4;
inline constexpr std::size_t kFnfWeights = 6;

/// Fast normalized fusion of three same-shape maps over the inputs and their
/// three pairwise means, c_m = relu(w_m) / (eps + sum_j relu(w_j)).
Tensor fnf(const Tensor& i1, const Tensor& i2, const Tensor& i3, const Tensor& w, double eps = kFnfEps);
Tensor fnf_coefficients(const Tensor& w, double eps = kFnfEps);

/// Unnormalized weighted sum.
Tensor uf(std::span<const Tensor> inputs, const Tensor& w);

/// Softmax-weighted sum.
Tensor sf(std::span<const Tensor> inputs, const Tensor& w);

struct FusionParams {
  Method method = Method::fnf;
  Tensor weights;  // 6 for fnf, 3 for uf/sf; initialized to 1

  FusionParams() = default;
  explicit FusionParams(Method m);
  Tensor operator()(const Tensor& i1, const Tensor& i2, const Tensor& i3) const;
  void collect(ParamRegistry& reg, const std::string& prefix);
};

}  // namespace polyseg::fusion
