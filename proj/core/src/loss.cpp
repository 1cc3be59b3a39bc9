#include "polyseg/loss.hpp"

#include <fmt/format.h>

#include "polyseg/errors.hpp"
#include "polyseg/ops.hpp"

namespace polyseg::loss {

Tensor bce_dice(const Tensor& pred, const Tensor& label, double w) {
  if (pred.shape() != label.shape()) {
    throw ShapeError(fmt::format("bce_dice: prediction {} vs label {}", shape_str(pred.shape()), shape_str(label.shape())));
  }
  if (pred.numel() == 0) throw ShapeError("bce_dice: empty maps");
  Tensor y = label.detach();
  Tensor one_minus_y = add_scalar(mul_scalar(y, -1.0), 1.0);

  Tensor pc = clamp(pred, kClamp, 1.0 - kClamp);
  Tensor log_p = log(pc);
  Tensor log_q = log(add_scalar(mul_scalar(pc, -1.0), 1.0));
  Tensor bce = mul_scalar(mean(add(mul(y, log_p), mul(one_minus_y, log_q))), -1.0);

  Tensor inter = add_scalar(mul_scalar(sum(mul(pred, y)), 2.0), kDiceSmooth);
  Tensor denom = add_scalar(add(sum(pred), sum(y)), kDiceSmooth);
  Tensor dice_loss = add_scalar(mul_scalar(div(inter, denom), -1.0), 1.0);

  return add(mul_scalar(bce, w), mul_scalar(dice_loss, 1.0 - w));
}

Tensor total_loss(std::span<const Tensor> stage_outputs, const Tensor& fused, const Tensor& label, double w) {
  Tensor total = bce_dice(fused, label, w);
  for (const auto& o : stage_outputs) total = add(total, bce_dice(o, label, w));
  return total;
}

}  // namespace polyseg::loss
