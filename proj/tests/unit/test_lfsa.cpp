#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "polyseg/errors.hpp"
#include "polyseg/gradcheck.hpp"
#include "polyseg/lfsa.hpp"
#include "polyseg/ops.hpp"

using namespace polyseg;
using namespace polyseg::lfsa;

namespace {

using oracle::Vec;

Vec vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

LfsaParams make_params(std::uint64_t seed, std::size_t cq, std::size_t cv, std::size_t d, std::size_t radius) {
  Initializer init(seed);
  LfsaParams p(init, cq, cv, d, {radius, 1e-4});
  p.rel_pos = init.uniform_range(p.rel_pos.shape(), -1, 1);
  return p;
}

oracle::LfsaOracle oracle_for(const LfsaParams& p) {
  return {vec(p.w_q), vec(p.w_k), vec(p.w_v), vec(p.rel_pos), p.omega1[0], p.omega2[0], p.config.eps,
          p.d_out(), p.w_q.dim(1), p.w_v.dim(1), p.config.radius};
}

}  // namespace

TEST(LfsaParamsTest, TableCoversWindow) {
  for (std::size_t r : {1u, 2u, 3u}) {
    auto p = make_params(1, 3, 2, 4, r);
    EXPECT_EQ(p.rel_pos.shape(), (Shape{(2 * r + 1) * (2 * r + 1), 4}));
  }
  Initializer init(2);
  EXPECT_THROW(LfsaParams(init, 3, 3, 3, {0, 1e-4}), ConfigError);
  EXPECT_THROW(LfsaParams(init, 3, 3, 3, {1, 0.0}), ConfigError);
}

TEST(LfsaAttendTest, MatchesLiteralTranscription) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = make_params(seed, 1, 1, 1, 1);
    p.omega1 = Tensor::scalar(0.3 + 0.1 * static_cast<double>(seed));
    p.omega2 = Tensor::scalar(1.7 - 0.1 * static_cast<double>(seed));
    Initializer init(seed + 50);
    Tensor x = init.uniform_range({1, 4, 4}, -2, 2), kv = init.uniform_range({1, 4, 4}, -2, 2);
    const Vec want = oracle_for(p)(vec(x), vec(kv), 4, 4);
    Tensor y = lfsa_attend(x, kv, p);
    ASSERT_EQ(y.shape(), (Shape{1, 4, 4}));
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-10);
  }
}

TEST(LfsaAttendTest, MatchesTranscriptionMultiChannel) {
  auto p = make_params(3, 3, 2, 4, 2);
  Initializer init(4);
  Tensor x = init.uniform_range({3, 5, 6}, -1, 1), kv = init.uniform_range({2, 5, 6}, -1, 1);
  const Vec want = oracle_for(p)(vec(x), vec(kv), 5, 6);
  Tensor y = lfsa_attend(x, kv, p);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-10);
}

TEST(LfsaAttendTest, ValuesAreResampledToQueryGrid) {
  auto p = make_params(5, 2, 3, 2, 1);
  Initializer init(6);
  Tensor x = init.uniform_range({2, 4, 4}, -1, 1), kv = init.uniform_range({3, 8, 8}, -1, 1);
  Tensor kv_small = resample(kv, 4, 4, ResampleMode::bilinear);
  Tensor a = lfsa_attend(x, kv, p), b = lfsa_attend(x, kv_small, p);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(LfsaAttendTest, OmegaTwoZeroIsPlainLocalAttention) {
  auto p = make_params(7, 2, 2, 3, 1);
  p.omega2 = Tensor::scalar(0.0);
  Initializer init(8);
  Tensor x = init.uniform_range({2, 4, 4}, -1, 1), kv = init.uniform_range({2, 4, 4}, -1, 1);
  Tensor y = lfsa_attend(x, kv, p);
  // Any position table gives the same output when its coefficient vanishes.
  p.rel_pos = init.uniform_range(p.rel_pos.shape(), -5, 5);
  Tensor y2 = lfsa_attend(x, kv, p);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], y2[i]);
  auto o = oracle_for(p);
  o.rel.assign(o.rel.size(), 0.0);
  const Vec want = o(vec(x), vec(kv), 4, 4);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
}

TEST(LfsaAttendTest, OmegaOneZeroIsContentFree) {
  auto p = make_params(9, 2, 2, 3, 1);
  p.omega1 = Tensor::scalar(0.0);
  Initializer init(10);
  Tensor x = init.uniform_range({2, 4, 4}, -1, 1), kv = init.uniform_range({2, 4, 4}, -1, 1);
  AttentionTrace t1, t2;
  lfsa_attend(x, kv, p, &t1);
  p.w_k = init.uniform_range(p.w_k.shape(), -3, 3);  // keys no longer matter
  lfsa_attend(x, kv, p, &t2);
  ASSERT_EQ(t1.weights.size(), 16u);
  for (std::size_t q = 0; q < 16; ++q)
    for (std::size_t m = 0; m < t1.weights[q].size(); ++m) EXPECT_EQ(t1.weights[q][m], t2.weights[q][m]);
}

TEST(LfsaAttendTest, PerQueryWeightsSumToOne) {
  auto p = make_params(11, 3, 3, 3, 3);
  Initializer init(12);
  Tensor x = init.uniform_range({3, 6, 5}, -3, 3);
  AttentionTrace trace;
  lfsa_attend(x, x, p, &trace);
  ASSERT_EQ(trace.weights.size(), 30u);
  for (const auto& w : trace.weights) {
    double s = 0.0;
    for (double v : w) s += v;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  // Corner query sees a truncated (r+1)^2 window.
  EXPECT_EQ(trace.weights.front().size(), 16u);
}

TEST(MixCoefficientsTest, SumBelowOne) {
  for (double w1 : {0.0, 0.3, 1.0, 7.0})
    for (double w2 : {0.0, 0.5, 2.0}) {
      auto m = mix_coefficients(Tensor::scalar(w1), Tensor::scalar(w2), 1e-4);
      EXPECT_NEAR(m.c1.item() + m.c2.item(), (w1 + w2) / (1e-4 + w1 + w2), 1e-15);
      EXPECT_LT(m.c1.item() + m.c2.item(), 1.0);
    }
  auto neg = mix_coefficients(Tensor::scalar(-2.0), Tensor::scalar(1.0), 1e-4);
  EXPECT_EQ(neg.c1.item(), 0.0);
}

TEST(LfsaAttendTest, TranslationEquivariantInterior) {
  const std::size_t r = 1, h = 6, w = 7;
  auto p = make_params(13, 2, 2, 2, r);
  Initializer init(14);
  Tensor x = init.uniform_range({2, h, w}, -1, 1), kv = init.uniform_range({2, h, w}, -1, 1);
  Tensor noise = init.uniform_range({2, h, 1}, -1, 1);
  auto shift = [&](const Tensor& t) {
    // shifted[c, i, j] = t[c, i, j - 1]; column 0 gets unrelated values.
    Tensor s({2, h, w});
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          s.mutable_data()[(c * h + i) * w + j] = j == 0 ? noise[c * h + i] : t[(c * h + i) * w + j - 1];
    return s;
  };
  Tensor y = lfsa_attend(x, kv, p), ys = lfsa_attend(shift(x), shift(kv), p);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = r; i + r < h; ++i)
      for (std::size_t j = r + 1; j + r < w; ++j)  // window inside both maps
        EXPECT_NEAR(ys[(c * h + i) * w + j], y[(c * h + i) * w + j - 1], 1e-12);
}

TEST(LfsaAttendTest, GradCheck) {
  auto p = make_params(15, 1, 1, 2, 1);
  p.omega1 = Tensor::scalar(0.8);
  p.omega2 = Tensor::scalar(1.3);
  Initializer init(16);
  Tensor x = init.uniform_range({1, 3, 3}, -1, 1).set_requires_grad();
  Tensor kv = init.uniform_range({1, 3, 3}, -1, 1).set_requires_grad();
  ParamRegistry reg;
  p.collect(reg, "lfsa");
  std::vector<GradCheckInput> inputs{{"q_src", x}, {"kv_src", kv}};
  for (const auto& e : reg.entries()) {
    e.tensor->set_requires_grad();
    inputs.push_back({e.name, *e.tensor});
  }
  Tensor probe = init.uniform_range({2, 3, 3}, -1, 1);
  auto report = grad_check([&] { return dot(lfsa_attend(x, kv, p), probe); }, inputs);
  EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(DecoderFuseTest, DeskShapes) {
  const std::array<std::size_t, 4> ch{128, 64, 32, 16};
  Initializer init(17);
  DecoderFuseParams p(init, ch, 16);
  std::vector<Tensor> maps{init.uniform_range({128, 2, 2}, -1, 1), init.uniform_range({64, 4, 4}, -1, 1),
                           init.uniform_range({32, 8, 8}, -1, 1), init.uniform_range({16, 16, 16}, -1, 1)};
  NoGradGuard no_grad;
  auto r = decoder_fuse(maps, p);
  EXPECT_EQ(r.pairwise[0].shape(), (Shape{128, 2, 2}));
  EXPECT_EQ(r.pairwise[1].shape(), (Shape{64, 4, 4}));
  EXPECT_EQ(r.pairwise[2].shape(), (Shape{32, 8, 8}));
  EXPECT_EQ(r.concatenated.shape(), (Shape{128 + 64 + 32, 16, 16}));
  EXPECT_EQ(r.output.shape(), (Shape{16, 16, 16}));
  std::vector<Tensor> three(maps.begin(), maps.begin() + 3);
  EXPECT_THROW(decoder_fuse(three, p), ConfigError);
}

TEST(DecoderFuseTest, IdenticalMapsSharedParamsGiveEqualPairs) {
  const std::array<std::size_t, 4> ch{3, 3, 3, 3};
  Initializer init(18);
  DecoderFuseParams p(init, ch, 4);
  p.pairs[1] = p.pairs[0];
  p.pairs[2] = p.pairs[0];
  Tensor d = init.uniform_range({3, 5, 5}, -1, 1);
  std::vector<Tensor> maps{d, d, d, d};
  auto r = decoder_fuse(maps, p);
  EXPECT_EQ(r.concatenated.dim(0), 9u);
  for (std::size_t i = 0; i < r.pairwise[0].numel(); ++i) {
    EXPECT_EQ(r.pairwise[0][i], r.pairwise[1][i]);
    EXPECT_EQ(r.pairwise[0][i], r.pairwise[2][i]);
  }
  // Concatenation order S1, S2, S3 at the finest grid (already equal here).
  for (std::size_t i = 0; i < r.pairwise[0].numel(); ++i) EXPECT_EQ(r.concatenated[2 * 75 + i], r.pairwise[2][i]);
}
