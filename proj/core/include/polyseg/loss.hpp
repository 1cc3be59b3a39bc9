#pragma once

#include <span>

#include "polyseg/tensor.hpp"

namespace polyseg::loss {

inline constexpr double kClamp = 1e-7;
inline constexpr double kDiceSmooth = 1.0;

/// L = w * BCE(clamp(pred)) + (1 - w) * (1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s)).
/// pred holds probabilities, label is a constant {0,1} map of the same shape.
Tensor bce_dice(const Tensor& pred, const Tensor& label, double w = 0.5);

/// Sum of bce_dice over the deep-supervision outputs and the fused output.
Tensor total_loss(std::span<const Tensor> stage_outputs, const Tensor& fused, const Tensor& label, double w = 0.5);

}  // namespace polyseg::loss
