#include <gtest/gtest.h>

#include <cmath>

#include "polyseg/backbone.hpp"
#include "polyseg/errors.hpp"
#include "polyseg/gradcheck.hpp"
#include "polyseg/ops.hpp"

using namespace polyseg;
using namespace polyseg::backbone;

namespace {

void zero(Tensor& t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

}  // namespace

TEST(ConvNextBlockTest, ZeroBranchIsResidual) {
  Initializer init(1);
  ConvNextBlockParams p(init, 4);
  for (Tensor* t : {&p.depthwise.weight, &p.depthwise.bias, &p.norm.gamma, &p.norm.beta, &p.expand.weight,
                    &p.expand.bias, &p.project.weight, &p.project.bias})
    zero(*t);
  Tensor x = init.uniform_range({4, 6, 6}, -2, 2);
  Tensor y = convnext_block(x, p);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(ConvNextBlockTest, ShapeContractAndLayout) {
  Initializer init(2);
  ConvNextBlockParams p(init, 8);
  EXPECT_EQ(p.depthwise.weight.shape(), (Shape{8, 1, 7, 7}));
  EXPECT_EQ(p.expand.weight.shape(), (Shape{32, 8, 1, 1}));
  EXPECT_EQ(p.project.weight.shape(), (Shape{8, 32, 1, 1}));
  Tensor y = convnext_block(init.uniform_range({8, 16, 16}, -1, 1), p);
  EXPECT_EQ(y.shape(), (Shape{8, 16, 16}));
  EXPECT_THROW(convnext_block(Tensor({4, 16, 16}), p), ShapeError);
}

TEST(ConvNextBlockTest, GradCheckAllParameters) {
  Initializer init(3);
  ConvNextBlockParams p(init, 2);
  Tensor x = init.uniform_range({2, 4, 4}, -1, 1).set_requires_grad();
  ParamRegistry reg;
  p.collect(reg, "block");
  std::vector<GradCheckInput> inputs{{"x", x}};
  for (const auto& e : reg.entries()) {
    e.tensor->set_requires_grad();
    inputs.push_back({e.name, *e.tensor});
  }
  Tensor probe = init.uniform_range({2, 4, 4}, -1, 1);
  auto report = grad_check([&] { return dot(convnext_block(x, p), probe); }, inputs);
  EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(PlainBlockTest, PreservesShape) {
  Initializer init(4);
  PlainBlockParams p(init, 3);
  EXPECT_EQ(plain_block(init.uniform_range({3, 5, 5}, -1, 1), p).shape(), (Shape{3, 5, 5}));
}

TEST(EncoderTest, DeskShapes) {
  Initializer init(5);
  Encoder enc(init, EncoderConfig::desk(), BlockKind::convnext);
  auto out = enc.forward(init.uniform_range({3, 64, 64}, 0, 1));
  const Shape want[4] = {{16, 16, 16}, {32, 8, 8}, {64, 4, 4}, {128, 2, 2}};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(out[i].shape(), want[i]) << "stage " << i;

  Encoder plain(init, EncoderConfig::desk(), BlockKind::plain);
  auto pout = plain.forward(init.uniform_range({3, 64, 64}, 0, 1));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(pout[i].shape(), want[i]) << "stage " << i;
}

TEST(EncoderTest, FullSizeConfigChannels) {
  const auto cfg = EncoderConfig::full_size();
  EXPECT_EQ(cfg.stage_channels, (std::array<std::size_t, 4>{96, 192, 384, 768}));
  EXPECT_EQ(cfg.stage_depths, (std::array<std::size_t, 4>{3, 3, 9, 3}));
  // One block per stage keeps the 224 px forward pass quick; channels are what matter.
  EncoderConfig shallow = cfg;
  shallow.stage_depths = {1, 1, 1, 1};
  Initializer init(6);
  Encoder enc(init, shallow, BlockKind::convnext);
  NoGradGuard no_grad;
  auto out = enc.forward(Tensor({3, 224, 224}, 0.5));
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(out[i].dim(0), cfg.stage_channels[i]);
    EXPECT_EQ(out[i].dim(1), 224u / (4u << i));
  }
}

TEST(EncoderTest, ZeroInputStaysFinite) {
  Initializer init(7);
  Encoder enc(init, EncoderConfig::desk(), BlockKind::convnext);
  ParamRegistry reg;
  enc.collect(reg, "encoder");
  for (const auto& e : reg.entries())
    if (e.name.ends_with(".bias") || e.name.ends_with(".beta")) zero(*e.tensor);
  auto out = enc.forward(Tensor::zeros({3, 32, 32}));
  for (const auto& t : out)
    for (double v : t.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(EncoderTest, IndivisibleInputIsConfigError) {
  Initializer init(8);
  Encoder enc(init, EncoderConfig::desk(), BlockKind::convnext);
  try {
    enc.forward(Tensor::zeros({3, 40, 32}));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("32"), std::string::npos) << e.what();
  }
}

TEST(EncoderTest, InvalidConfigRejected) {
  EncoderConfig cfg;
  cfg.stage_channels[2] = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(EncoderTest, GradCheckOnSmallInput) {
  Initializer init(9);
  EncoderConfig cfg;
  cfg.stage_channels = {2, 2, 2, 2};
  cfg.stage_depths = {1, 1, 1, 1};
  Encoder enc(init, cfg, BlockKind::convnext);
  ParamRegistry reg;
  enc.collect(reg, "encoder");
  std::vector<GradCheckInput> inputs;
  for (const auto& e : reg.entries()) {
    e.tensor->set_requires_grad();
    inputs.push_back({e.name, *e.tensor});
  }
  Tensor img = init.uniform_range({3, 32, 32}, 0, 1);
  auto f = [&] {
    auto out = enc.forward(img);
    Tensor s = Tensor::scalar(0.0);
    for (const auto& t : out) s = add(s, mean(mul(t, t)));
    return s;
  };
  GradCheckOptions opt;
  opt.max_coords = 8;
  opt.seed = 1;
  auto report = grad_check(f, inputs, opt);
  EXPECT_TRUE(report.passed()) << report.summary();
}
