#include "polyseg/backbone.hpp"

#include <fmt/format.h>

#include "polyseg/errors.hpp"
#include "polyseg/ops.hpp"

namespace polyseg::backbone {

void EncoderConfig::validate() const {
  for (std::size_t i = 0; i < 4; ++i) {
    if (stage_channels[i] < 1) throw ConfigError(fmt::format("encoder: stage {} has zero channels", i + 1));
    if (stage_depths[i] < 1) throw ConfigError(fmt::format("encoder: stage {} has zero blocks", i + 1));
  }
  if (stem_stride < 1) throw ConfigError("encoder: stem stride must be >= 1");
}

ConvNextBlockParams::ConvNextBlockParams(Initializer& init, std::size_t c)
    : channels(c),
      depthwise(init, c, c, kKernel, {.stride = 1, .pad = kKernel / 2, .groups = c}),
      norm(c),
      expand(init, c, kExpansion * c, 1),
      project(init, kExpansion * c, c, 1) {}

void ConvNextBlockParams::collect(ParamRegistry& reg, const std::string& prefix) {
  depthwise.collect(reg, prefix + ".dwconv");
  norm.collect(reg, prefix + ".norm");
  expand.collect(reg, prefix + ".pwconv1");
  project.collect(reg, prefix + ".pwconv2");
}

Tensor convnext_block(const Tensor& x, const ConvNextBlockParams& p) {
  if (x.ndim() != 3 || x.dim(0) != p.channels) {
    throw ShapeError(fmt::format("convnext_block: input {} but block has {} channels", shape_str(x.shape()), p.channels));
  }
  Tensor y = p.depthwise(x);
  y = p.norm(y);
  y = gelu(p.expand(y));
  y = p.project(y);
  return add(x, y);
}

PlainBlockParams::PlainBlockParams(Initializer& init, std::size_t c) : conv(init, c, c, 3, {.stride = 1, .pad = 1}), norm(c) {}

void PlainBlockParams::collect(ParamRegistry& reg, const std::string& prefix) {
  conv.collect(reg, prefix + ".conv");
  norm.collect(reg, prefix + ".norm");
}

Tensor plain_block(const Tensor& x, const PlainBlockParams& p) { return relu(p.norm(p.conv(x))); }

Encoder::Encoder(Initializer& init, EncoderConfig config, BlockKind kind, std::size_t in_channels)
    : config_(config), kind_(kind), in_channels_(in_channels) {
  config_.validate();
  const auto& ch = config_.stage_channels;
  const std::size_t s = config_.stem_stride;
  stem_ = Conv2d(init, in_channels, ch[0], s, {.stride = s, .pad = 0});
  stem_norm_ = LayerNorm(ch[0]);
  for (std::size_t i = 0; i < 3; ++i) {
    down_norm_[i] = LayerNorm(ch[i]);
    down_conv_[i] = Conv2d(init, ch[i], ch[i + 1], 2, {.stride = 2, .pad = 0});
  }
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t b = 0; b < config_.stage_depths[i]; ++b) {
      if (kind_ == BlockKind::convnext) {
        convnext_[i].emplace_back(init, ch[i]);
      } else {
        plain_[i].emplace_back(init, ch[i]);
      }
    }
  }
}

std::array<Tensor, 4> Encoder::forward(const Tensor& image) const {
  if (image.ndim() != 3 || image.dim(0) != in_channels_) {
    throw ShapeError(fmt::format("encoder: expected {} x H x W image, got {}", in_channels_, shape_str(image.shape())));
  }
  const std::size_t f = config_.downsample_factor();
  if (image.dim(1) % f != 0 || image.dim(2) % f != 0 || image.dim(1) == 0 || image.dim(2) == 0) {
    throw ConfigError(fmt::format("encoder: input {}x{} must have both sides divisible by {}", image.dim(1), image.dim(2), f));
  }
  std::array<Tensor, 4> outs;
  Tensor x = stem_norm_(stem_(image));
  for (std::size_t i = 0; i < 4; ++i) {
    if (i > 0) x = down_conv_[i - 1](down_norm_[i - 1](x));
    if (kind_ == BlockKind::convnext) {
      for (const auto& blk : convnext_[i]) x = convnext_block(x, blk);
    } else {
      for (const auto& blk : plain_[i]) x = plain_block(x, blk);
    }
    outs[i] = x;
  }
  return outs;
}

void Encoder::collect(ParamRegistry& reg, const std::string& prefix) {
  stem_.collect(reg, prefix + ".stem");
  stem_norm_.collect(reg, prefix + ".stem_norm");
  for (std::size_t i = 0; i < 3; ++i) {
    down_norm_[i].collect(reg, fmt::format("{}.down{}.norm", prefix, i + 1));
    down_conv_[i].collect(reg, fmt::format("{}.down{}.conv", prefix, i + 1));
  }
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t b = 0; b < convnext_[i].size(); ++b) convnext_[i][b].collect(reg, fmt::format("{}.stage{}.block{}", prefix, i + 1, b));
    for (std::size_t b = 0; b < plain_[i].size(); ++b) plain_[i][b].collect(reg, fmt::format("{}.stage{}.block{}", prefix, i + 1, b));
  }
}

}  // namespace polyseg::backbone
