#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "polyseg/nn.hpp"
#include "polyseg/tensor.hpp"

namespace polyseg::lfsa {

struct LfsaConfig {
  std::size_t radius = 3;  // window is (2r+1) x (2r+1)
  double eps = 1e-4;
};

/// Location-fused self-attention parameters for queries/keys with `q_channels`
/// channels and values with `v_channels` channels.
///
/// rel_pos row (dy + r) * (2r + 1) + (dx + r) holds the d_out-dim embedding of
/// the offset (dy, dx) = (a - i, b - j).
struct LfsaParams {
  Tensor w_q;      // [d_out x C_q]
  Tensor w_k;      // [d_out x C_q]
  Tensor w_v;      // [d_out x C_v]
  Tensor rel_pos;  // [(2r+1)^2 x d_out]
  Tensor omega1;   // scalar, weight on content keys
  Tensor omega2;   // scalar, weight on relative positions
  LfsaConfig config;

  LfsaParams() = default;
  LfsaParams(Initializer& init, std::size_t q_channels, std::size_t v_channels, std::size_t d_out, LfsaConfig config = {});
  std::size_t d_out() const { return w_q.dim(0); }
  void collect(ParamRegistry& reg, const std::string& prefix);
};

/// c1 = w1 / (eps + w1 + w2), c2 = w2 / (eps + w1 + w2) with w = relu(omega).
struct MixCoefficients {
  Tensor c1;
  Tensor c2;
};
MixCoefficients mix_coefficients(const Tensor& omega1, const Tensor& omega2, double eps);

/// Per-query softmax weights over the in-bounds window, in row-major window
/// order; filled only when requested.
struct AttentionTrace {
  std::vector<std::vector<double>> weights;
};

/// Fused windowed attention primitive:
///   y[:, p] = sum_{w in N_r(p)} softmax_w(q_p . (c1 k_w + c2 rel[w - p])) v_w
/// q, k are d x H x W; v is d_v x H x W; c1, c2 are one-element tensors.
/// Windows are truncated at the borders.
Tensor window_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& rel_pos, const Tensor& c1,
                        const Tensor& c2, std::size_t radius, AttentionTrace* trace = nullptr);

/// Queries and keys from q_src, values from kv_src (bilinearly resampled to
/// q_src's grid when sizes differ). Output is d_out x H x W.
Tensor lfsa_attend(const Tensor& q_src, const Tensor& kv_src, const LfsaParams& p, AttentionTrace* trace = nullptr);

/// Attention over decoder maps d1..d4 (coarse to fine):
/// S_i = lfsa_attend(d_i, d_{i+1}), all S_i resampled to d4's grid,
/// concatenated and projected by a 1x1 conv.
struct DecoderFuseParams {
  std::array<LfsaParams, 3> pairs;
  Conv2d projection;

  DecoderFuseParams() = default;
  DecoderFuseParams(Initializer& init, std::span<const std::size_t> decoder_channels, std::size_t out_channels,
                    LfsaConfig config = {});
  void collect(ParamRegistry& reg, const std::string& prefix);
};

struct DecoderFuseResult {
  std::array<Tensor, 3> pairwise;  // S_1..S_3 at their native grids
  Tensor concatenated;             // sum of S_i channels, d4 grid
  Tensor output;                   // projected d_lfsa
};

DecoderFuseResult decoder_fuse(std::span<const Tensor> decoder_maps, const DecoderFuseParams& p);

}  // namespace polyseg::lfsa
