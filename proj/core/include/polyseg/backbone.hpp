#pragma once

#include <array>
#include <string>
#include <vector>

#include "polyseg/nn.hpp"
#include "polyseg/tensor.hpp"

namespace polyseg::backbone {

struct EncoderConfig {
  std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
  std::array<std::size_t, 4> stage_depths{1, 1, 2, 1};
  std::size_t stem_stride = 4;

  /// Desk-scale default.
  static EncoderConfig desk() { return {}; }
  /// Full-size ConvNext-T layout: 96/192/384/768 channels, 3/3/9/3 blocks.
  static EncoderConfig full_size() { return {{96, 192, 384, 768}, {3, 3, 9, 3}, 4}; }

  /// Input side lengths must be multiples of this.
  std::size_t downsample_factor() const { return stem_stride * 8; }
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

/// 7x7 depthwise conv -> LayerNorm -> 1x1 expand to 4C -> GELU -> 1x1 project
/// to C -> residual add.
struct ConvNextBlockParams {
  static constexpr std::size_t kExpansion = 4;
  static constexpr std::size_t kKernel = 7;

  std::size_t channels = 0;
  Conv2d depthwise;
  LayerNorm norm;
  Conv2d expand;
  Conv2d project;

  ConvNextBlockParams() = default;
  ConvNextBlockParams(Initializer& init, std::size_t channels);
  void collect(ParamRegistry& reg, const std::string& prefix);
};

Tensor convnext_block(const Tensor& x, const ConvNextBlockParams& p);

/// 3x3 conv -> LayerNorm -> ReLU; stands in for ConvNext blocks in the
/// plain-CNN ablation.
struct PlainBlockParams {
  Conv2d conv;
  LayerNorm norm;

  PlainBlockParams() = default;
  PlainBlockParams(Initializer& init, std::size_t channels);
  void collect(ParamRegistry& reg, const std::string& prefix);
};

Tensor plain_block(const Tensor& x, const PlainBlockParams& p);

enum class BlockKind { convnext, plain };

/// Four-stage encoder. Patchify stem (k = s = stem_stride) + LayerNorm, then
/// per stage: [LayerNorm + 2x2/2 conv downsample for stages 2-4] followed by
/// the stage's blocks. Stage i output is C_i x H/(s*2^i) x W/(s*2^i).
class Encoder {
 public:
  Encoder() = default;
  Encoder(Initializer& init, EncoderConfig config, BlockKind kind, std::size_t in_channels = 3);

  std::array<Tensor, 4> forward(const Tensor& image) const;
  void collect(ParamRegistry& reg, const std::string& prefix);

  const EncoderConfig& config() const { return config_; }
  BlockKind kind() const { return kind_; }

 private:
  EncoderConfig config_;
  BlockKind kind_ = BlockKind::convnext;
  std::size_t in_channels_ = 3;
  Conv2d stem_;
  LayerNorm stem_norm_;
  std::array<LayerNorm, 3> down_norm_;
  std::array<Conv2d, 3> down_conv_;
  std::array<std::vector<ConvNextBlockParams>, 4> convnext_;
  std::array<std::vector<PlainBlockParams>, 4> plain_;
};

}  // namespace polyseg::backbone
