#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <thread>

#include "oracles.hpp"
#include "polyseg/errors.hpp"
#include "polyseg/gradcheck.hpp"
#include "polyseg/ops.hpp"
#include "polyseg/tensor.hpp"

using namespace polyseg;

namespace {

Tensor rand_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), oracle::random_vec(rng, n, lo, hi));
}

void expect_near_all(std::span<const double> got, const std::vector<double>& want, double tol) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "index " << i;
}

}  // namespace

TEST(TensorTest, ShapeAndDataAgree) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.data().size(), 24u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(TensorTest, CopiesNeverObserveEachOthersWrites) {
  Tensor a({3}, std::vector<double>{1, 2, 3});
  Tensor b = a;
  b.mutable_data()[0] = 42.0;
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(b[0], 42.0);
  Tensor r = reshape(a, {1, 3});
  r.mutable_data()[1] = -1.0;
  EXPECT_EQ(a[1], 2.0);
}

TEST(MatmulTest, IdentityAndZero) {
  Tensor eye({2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor m({2, 2}, std::vector<double>{3, -1, 0.5, 7});
  expect_near_all(matmul(eye, m).data(), {3, -1, 0.5, 7}, 0.0);
  expect_near_all(matmul(Tensor::zeros({2, 2}), m).data(), {0, 0, 0, 0}, 0.0);
}

TEST(MatmulTest, SmallExample) {
  Tensor a({2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor b({2, 1}, std::vector<double>{1, 1});
  Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  expect_near_all(c.data(), {3, 7}, 0.0);
}

TEST(MatmulTest, MatchesTripleLoop) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng() % 6, k = 1 + rng() % 6, n = 1 + rng() % 6;
    Tensor a = rand_tensor(rng, {m, k}), b = rand_tensor(rng, {k, n});
    const auto want = oracle::matmul({a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, m, k, n);
    expect_near_all(matmul(a, b).data(), want, 1e-12);
  }
}

TEST(MatmulTest, MismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
  }
}

TEST(Conv2dTest, IdentityKernel) {
  std::mt19937_64 rng(2);
  Tensor x = rand_tensor(rng, {1, 5, 6});
  Tensor y = conv2d(x, Tensor::ones({1, 1, 1, 1}));
  expect_near_all(y.data(), {x.data().begin(), x.data().end()}, 0.0);
}

TEST(Conv2dTest, AllOnesCounts) {
  Tensor y = conv2d(Tensor::ones({1, 5, 5}), Tensor::ones({1, 1, 3, 3}));
  EXPECT_EQ(y.shape(), (Shape{1, 3, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 9.0);
}

TEST(Conv2dTest, MatchesNestedLoops) {
  std::mt19937_64 rng(3);
  for (int batch = 0; batch < 2; ++batch) {
    Tensor x = rand_tensor(rng, {3, 8, 8});
    Tensor w = rand_tensor(rng, {4, 3, 3, 3});
    Tensor b = rand_tensor(rng, {4});
    for (std::size_t pad : {0u, 1u}) {
      for (std::size_t stride : {1u, 2u}) {
        Tensor y = conv2d(x, w, b, {stride, pad, 1});
        const auto want = oracle::conv2d({x.data().begin(), x.data().end()}, 3, 8, 8, {w.data().begin(), w.data().end()},
                                         4, 3, stride, pad, 1, {b.data().begin(), b.data().end()});
        expect_near_all(y.data(), want, 1e-12);
      }
    }
  }
}

TEST(Conv2dTest, GroupedAndDepthwiseMatchLoops) {
  std::mt19937_64 rng(4);
  Tensor x = rand_tensor(rng, {4, 7, 7});
  Tensor wg = rand_tensor(rng, {6, 2, 3, 3});
  auto want = oracle::conv2d({x.data().begin(), x.data().end()}, 4, 7, 7, {wg.data().begin(), wg.data().end()}, 6, 3, 1,
                             1, 2);
  expect_near_all(conv2d(x, wg, {}, {1, 1, 2}).data(), want, 1e-12);

  Tensor wd = rand_tensor(rng, {4, 1, 7, 7});
  want = oracle::conv2d({x.data().begin(), x.data().end()}, 4, 7, 7, {wd.data().begin(), wd.data().end()}, 4, 7, 1, 3, 4);
  expect_near_all(conv2d(x, wd, {}, {1, 3, 4}).data(), want, 1e-12);
}

TEST(Conv2dTest, ConfigErrors) {
  Tensor x = Tensor::ones({4, 6, 6});
  EXPECT_THROW(conv2d(x, Tensor::ones({2, 1, 3, 3}), {}, {1, 1, 3}), ConfigError);  // 4 % 3
  EXPECT_THROW(conv2d(x, Tensor::ones({2, 4, 2, 2})), ConfigError);                // even, overlapping
  EXPECT_NO_THROW(conv2d(x, Tensor::ones({2, 4, 2, 2}), {}, {2, 0, 1}));         // patchify
}

TEST(SoftmaxTest, ClosedForms) {
  Tensor c = softmax(Tensor({4}, 2.5), 0);
  for (double v : c.data()) EXPECT_NEAR(v, 0.25, 1e-15);
  Tensor s = softmax(Tensor({2}, std::vector<double>{0.0, std::log(3.0)}), 0);
  EXPECT_NEAR(s[0], 0.25, 1e-15);
  EXPECT_NEAR(s[1], 0.75, 1e-15);
}

TEST(SoftmaxTest, ShiftInvariantAndNormalized) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = rand_tensor(rng, {3, 5}, -50.0, 50.0);
    const double shift = std::uniform_real_distribution<double>(-20, 20)(rng);
    for (std::size_t axis : {0u, 1u}) {
      Tensor a = softmax(x, axis), b = softmax(add_scalar(x, shift), axis);
      for (std::size_t i = 0; i < a.numel(); ++i) {
        EXPECT_NEAR(a[i], b[i], 1e-12);
        EXPECT_GE(a[i], 0.0);
        EXPECT_LE(a[i], 1.0);
      }
      if (axis == 0) {
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(a[j] + a[5 + j] + a[10 + j], 1.0, 1e-9);
      } else {
        for (std::size_t i = 0; i < 3; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < 5; ++j) s += a[i * 5 + j];
          EXPECT_NEAR(s, 1.0, 1e-9);
        }
      }
    }
  }
  EXPECT_THROW(softmax(Tensor({3}), 1), ShapeError);
}

TEST(LayerNormTest, ConstantOverChannelsGivesZero) {
  Tensor x({3, 2, 2});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 4; ++p) x.mutable_data()[c * 4 + p] = static_cast<double>(p) * 1.5;
  Tensor y = layer_norm(x, Tensor::ones({3}), Tensor::zeros({3}), 1e-6);
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(LayerNormTest, MomentsAndOracle) {
  std::mt19937_64 rng(6);
  const std::size_t c = 5, n = 12;
  Tensor x = rand_tensor(rng, {c, 3, 4}, -3.0, 3.0);
  Tensor y = layer_norm(x, Tensor::ones({c}), Tensor::zeros({c}), 1e-9);
  for (std::size_t p = 0; p < n; ++p) {
    double m = 0.0, v = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) m += y[ch * n + p];
    m /= c;
    for (std::size_t ch = 0; ch < c; ++ch) v += (y[ch * n + p] - m) * (y[ch * n + p] - m);
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v / c, 1.0, 1e-6);
  }
  Tensor g = rand_tensor(rng, {c}), b = rand_tensor(rng, {c});
  const auto want = oracle::layer_norm({x.data().begin(), x.data().end()}, c, n, {g.data().begin(), g.data().end()},
                                       {b.data().begin(), b.data().end()}, 1e-5);
  expect_near_all(layer_norm(x, g, b, 1e-5).data(), want, 1e-10);
  EXPECT_THROW(layer_norm(x, g, b, 0.0), ConfigError);
}

TEST(ActivationTest, Definitions) {
  Tensor r = relu(Tensor({2}, std::vector<double>{-1.0, 2.0}));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 2.0);
  EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0);
  std::vector<double> xs;
  for (double x = -6.0; x <= 6.0; x += 0.25) xs.push_back(x);
  Tensor g = gelu(Tensor({xs.size()}, xs));
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_NEAR(g[i], oracle::gelu(xs[i]), 1e-12);
}

TEST(ResampleTest, IdentityAndConstant) {
  std::mt19937_64 rng(7);
  Tensor x = rand_tensor(rng, {2, 3, 5});
  for (auto mode : {ResampleMode::nearest, ResampleMode::bilinear}) {
    expect_near_all(resample(x, 3, 5, mode).data(), {x.data().begin(), x.data().end()}, 0.0);
    Tensor c = resample(Tensor({1, 3, 3}, 0.7), 7, 4, mode);
    for (double v : c.data()) EXPECT_NEAR(v, 0.7, 1e-15);
  }
  EXPECT_THROW(resample(x, 0, 4, ResampleMode::bilinear), ConfigError);
}

TEST(ResampleTest, NearestBlockReplicates) {
  Tensor x({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor y = resample(x, 4, 4, ResampleMode::nearest);
  std::vector<double> want(16);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) want[i * 4 + j] = x[(i / 2) * 2 + j / 2];
  expect_near_all(y.data(), want, 0.0);
}

TEST(BackwardTest, SumAndDot) {
  Tensor x({4}, std::vector<double>{1, -2, 3, 0.5});
  x.set_requires_grad();
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  Tensor a({3}, std::vector<double>{1, 2, 3});
  Tensor b({3}, std::vector<double>{-4, 5, 0.25});
  a.set_requires_grad();
  backward(dot(a, b));
  expect_near_all(a.grad(), {-4, 5, 0.25}, 0.0);
  EXPECT_EQ(Tape::active().size(), 0u);
}

TEST(BackwardTest, NonScalarLossIsUsageError) {
  Tensor x({3}, 1.0);
  x.set_requires_grad();
  Tensor y = mul_scalar(x, 2.0);
  EXPECT_THROW(backward(y), UsageError);
  Tape::active().clear();
}

TEST(BackwardTest, TapeIsTopological) {
  Tensor x({2}, std::vector<double>{0.3, -0.7});
  x.set_requires_grad();
  Tensor y = sum(mul(gelu(x), exp(x)));
  const auto& nodes = Tape::active().nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (const auto& in : nodes[i].inputs)
      for (std::size_t j = i; j < nodes.size(); ++j) EXPECT_NE(in.get(), nodes[j].output.get());
  backward(y);
}

TEST(GradCheckTest, SumOfSquares) {
  Tensor x = Tensor::ones({5});
  x.set_requires_grad();
  auto report = grad_check([&] { return sum(mul(x, x)); }, {{"x", x}});
  EXPECT_TRUE(report.passed()) << report.summary();
  x.zero_grad();
  backward(sum(mul(x, x)));
  for (double g : x.grad()) EXPECT_NEAR(g, 2.0, 1e-15);
}

TEST(GradCheckTest, SoftmaxCrossEntropy) {
  std::mt19937_64 rng(8);
  Tensor logits = rand_tensor(rng, {6}).set_requires_grad();
  Tensor target({6}, std::vector<double>{0, 0, 1, 0, 0, 0});
  auto f = [&] { return mul_scalar(dot(target, log(softmax(logits, 0))), -1.0); };
  auto report = grad_check(f, {{"logits", logits}}, {.h = 1e-5, .tol = 1e-4});
  EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(GradCheckTest, ReportsSkippedInput) {
  Tensor x = Tensor::ones({3}).set_requires_grad();
  Tensor c({3}, 2.0);
  auto report = grad_check([&] { return dot(x, c); }, {{"x", x}, {"c", c}});
  ASSERT_EQ(report.entries.size(), 2u);
  EXPECT_FALSE(report.entries[0].skipped);
  EXPECT_TRUE(report.entries[1].skipped);
  EXPECT_TRUE(report.passed());
}

TEST(GradCheckTest, EveryPrimitiveOnRandomShapes) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = rand_tensor(rng, {2, 4, 4}).set_requires_grad();
    Tensor w = rand_tensor(rng, {3, 2, 3, 3}).set_requires_grad();
    Tensor g = rand_tensor(rng, {3}).set_requires_grad();
    Tensor b = rand_tensor(rng, {3}).set_requires_grad();
    Tensor m = rand_tensor(rng, {5, 3}).set_requires_grad();
    auto f = [&] {
      Tensor y = layer_norm(gelu(conv2d(x, w, {}, {1, 1, 1})), g, b, 1e-5);
      Tensor flat = reshape(resample(y, 6, 5, ResampleMode::bilinear), {3, 30});
      Tensor z = softmax(matmul(m, flat), 1);
      Tensor s = sigmoid(matmul(transpose(m), z));
      return add(mean(mul(s, flat)), sum(leaky_relu(slice(flat, 1, 3, 4))));
    };
    auto report = grad_check(f, {{"x", x}, {"w", w}, {"gamma", g}, {"beta", b}, {"m", m}});
    EXPECT_TRUE(report.passed()) << report.summary();
  }
}

TEST(DeterminismTest, SameSeedSameBits) {
  auto run = [] {
    std::mt19937_64 rng(11);
    Tensor x = rand_tensor(rng, {2, 6, 6});
    Tensor w = rand_tensor(rng, {2, 2, 3, 3});
    Tensor y = softmax(reshape(gelu(conv2d(x, w, {}, {1, 1, 1})), {2, 36}), 1);
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(ConcurrencyTest, TapesAreThreadLocal) {
  std::vector<double> grads[2];
  auto work = [&](int id) {
    Tensor x({3}, static_cast<double>(id + 1));
    x.set_requires_grad();
    backward(sum(mul(x, x)));
    grads[id] = x.grad();
  };
  std::thread t0(work, 0), t1(work, 1);
  t0.join();
  t1.join();
  for (double g : grads[0]) EXPECT_EQ(g, 2.0);
  for (double g : grads[1]) EXPECT_EQ(g, 4.0);
}
