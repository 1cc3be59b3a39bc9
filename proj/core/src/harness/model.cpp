#include "polyseg/harness/model.hpp"

#include <fmt/format.h>

#include "polyseg/errors.hpp"
#include "polyseg/ops.hpp"

namespace polyseg::harness {

Model::Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
  Initializer init(seed);
  const auto& ch = spec.encoder.stage_channels;
  const std::size_t head_width = ch[0];

  encoder_ = backbone::Encoder(init, spec.encoder,
                               spec.toggles.convnext ? backbone::BlockKind::convnext : backbone::BlockKind::plain,
                               spec.in_channels);
  if (spec.toggles.dbfeb) dbfeb_.emplace(init, ch[3], spec.dbfeb);

  // d1 refines the bottleneck; d2..d4 upsample and merge the matching skip.
  const std::array<std::size_t, 4> width{ch[3], ch[2], ch[1], ch[0]};
  decoder_[0] = {Conv2d(init, ch[3], ch[3], 3, {.stride = 1, .pad = 1}), LayerNorm(ch[3])};
  for (std::size_t i = 1; i < 4; ++i) {
    decoder_[i] = {Conv2d(init, width[i - 1] + width[i], width[i], 3, {.stride = 1, .pad = 1}), LayerNorm(width[i])};
  }

  if (spec.toggles.lfsa) {
    lfsa_.emplace(init, std::span<const std::size_t>(width), head_width, spec.lfsa);
  } else {
    plain_merge_ = Conv2d(init, width[0] + width[1] + width[2] + width[3], head_width, 1);
  }
  proj_encoder_ = Conv2d(init, ch[0], head_width, 1);
  proj_bottleneck_ = Conv2d(init, ch[3], head_width, 1);
  fusion_ = fusion::FusionParams(spec.fusion);
  head_ = Conv2d(init, head_width, 1, 1);
  if (spec.refine_channels > 0) {
    refine_a_ = Conv2d(init, spec.in_channels + 1, spec.refine_channels, 3, {.stride = 1, .pad = 1});
    refine_b_ = Conv2d(init, spec.refine_channels, 1, 1);
  }
  for (std::size_t i = 0; i < 4; ++i) side_heads_[i] = Conv2d(init, width[i], 1, 1);

  encoder_.collect(registry_, "encoder");
  if (dbfeb_) dbfeb_->collect(registry_, "dbfeb");
  for (std::size_t i = 0; i < 4; ++i) {
    decoder_[i].conv.collect(registry_, fmt::format("decoder.d{}.conv", i + 1));
    decoder_[i].norm.collect(registry_, fmt::format("decoder.d{}.norm", i + 1));
  }
  if (lfsa_) {
    lfsa_->collect(registry_, "lfsa");
  } else {
    plain_merge_.collect(registry_, "decoder.merge");
  }
  proj_encoder_.collect(registry_, "fusion.proj_encoder");
  proj_bottleneck_.collect(registry_, "fusion.proj_bottleneck");
  fusion_.collect(registry_, "fusion");
  head_.collect(registry_, "head.out");
  if (spec.refine_channels > 0) {
    refine_a_.collect(registry_, "head.refine1");
    refine_b_.collect(registry_, "head.refine2");
  }
  for (std::size_t i = 0; i < 4; ++i) side_heads_[i].collect(registry_, fmt::format("head.side{}", i + 1));
}

std::string Model::module_of(const std::string& name) { return name.substr(0, name.find('.')); }

std::vector<ModelOutput> Model::forward(std::span<const Tensor> images, bool training) {
  const std::size_t b = images.size();
  if (b == 0) throw UsageError("model: empty batch");
  std::vector<std::array<Tensor, 4>> enc(b);
  for (std::size_t i = 0; i < b; ++i) enc[i] = encoder_.forward(images[i]);

  std::vector<Tensor> bottleneck(b);
  if (dbfeb_) {
    std::vector<Tensor> deep(b);
    for (std::size_t i = 0; i < b; ++i) deep[i] = enc[i][3];
    bottleneck = dbfeb::dbfeb_forward(deep, *dbfeb_, training);
  } else {
    for (std::size_t i = 0; i < b; ++i) bottleneck[i] = enc[i][3];
  }

  std::vector<ModelOutput> outs(b);
  for (std::size_t s = 0; s < b; ++s) {
    const Tensor& image = images[s];
    const std::size_t h = image.dim(1), w = image.dim(2);

    std::array<Tensor, 4> d;
    d[0] = relu(decoder_[0].norm(decoder_[0].conv(bottleneck[s])));
    for (std::size_t i = 1; i < 4; ++i) {
      const Tensor& skip = enc[s][3 - i];
      Tensor up = resample(d[i - 1], skip.dim(1), skip.dim(2), ResampleMode::bilinear);
      std::vector<Tensor> parts{up, skip};
      d[i] = relu(decoder_[i].norm(decoder_[i].conv(concat(parts, 0))));
    }

    const std::size_t fh = d[3].dim(1), fw = d[3].dim(2);
    Tensor merged;
    if (lfsa_) {
      merged = lfsa::decoder_fuse(d, *lfsa_).output;
    } else {
      std::vector<Tensor> parts;
      for (const auto& di : d) parts.push_back(resample(di, fh, fw, ResampleMode::bilinear));
      merged = plain_merge_(concat(parts, 0));
    }

    Tensor i1 = proj_encoder_(enc[s][0]);
    Tensor i2 = resample(proj_bottleneck_(bottleneck[s]), fh, fw, ResampleMode::bilinear);
    Tensor fused = fusion_(i1, i2, merged);

    Tensor logit = resample(head_(fused), h, w, ResampleMode::bilinear);
    if (spec_.refine_channels > 0) {
      std::vector<Tensor> parts{image, logit};
      logit = add(logit, refine_b_(relu(refine_a_(concat(parts, 0)))));
    }
    outs[s].fused = sigmoid(logit);
    for (std::size_t i = 0; i < 4; ++i) {
      outs[s].stages[i] = sigmoid(resample(side_heads_[i](d[i]), h, w, ResampleMode::bilinear));
    }
  }
  return outs;
}

ModelOutput Model::forward(const Tensor& image, bool training) {
  std::vector<Tensor> one{image};
  return std::move(forward(one, training).front());
}

}  // namespace polyseg::harness
