#pragma once

#include <optional>
#include <span>
#include <vector>

#include "polyseg/tensor.hpp"

namespace polyseg {

// Differentiable primitives. Every function records itself on the active
// tape when an input requires grad. Feature maps are laid out C x H x W.

enum class Activation { relu, gelu, leaky_relu, sigmoid };
enum class ResampleMode { nearest, bilinear };

// Elementwise binary ops take equal shapes, or a one-element operand on either
// side which is broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
/// Gradient is passed through only where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);

/// GELU uses the exact form 0.5 * x * (1 + erf(x / sqrt(2))).
Tensor activation(const Tensor& x, Activation kind, double negative_slope = 0.2);
inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
inline Tensor gelu(const Tensor& x) { return activation(x, Activation::gelu); }
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }
inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  return activation(x, Activation::leaky_relu, slope);
}

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Copies; the result never shares storage with `a`.
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
};

/// 2-D cross-correlation (no kernel flip) of x[C_in,H,W] with
/// w[C_out, C_in/groups, k, k]; optional bias[C_out].
///
/// Kernels must be square and odd, except for non-overlapping patch
/// kernels (stride == k, pad == 0) which may be even.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = {}, Conv2dOptions opt = {});

Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalizes x[C,H,W] over channels at every spatial location, then applies
/// gamma[C], beta[C].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Normalizes x[C,H,W] per channel over all spatial locations using the
/// statistics of x itself. When given, batch_mean / batch_var receive the
/// per-channel biased mean and variance.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  std::vector<double>* batch_mean = nullptr, std::vector<double>* batch_var = nullptr);

/// Batch norm with fixed statistics (evaluation mode); differentiable in x,
/// gamma and beta.
Tensor frozen_batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::span<const double> mean,
                         std::span<const double> var, double eps);

/// Resizes x[C,H,W] to C x out_h x out_w. Nearest picks floor(dst * in / out);
/// bilinear uses half-pixel centers (align_corners = false), clamped at edges.
Tensor resample(const Tensor& x, std::size_t out_h, std::size_t out_w, ResampleMode mode);

}  // namespace polyseg
