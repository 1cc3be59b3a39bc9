#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "polyseg/errors.hpp"
#include "polyseg/gradcheck.hpp"
#include "polyseg/loss.hpp"
#include "polyseg/metrics.hpp"
#include "polyseg/nn.hpp"
#include "polyseg/ops.hpp"

using namespace polyseg;
using metrics::MaskPair;

namespace {

using oracle::Vec;

Vec vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Vec random_mask(std::mt19937_64& rng, std::size_t n, double p_fg = 0.4) {
  std::bernoulli_distribution fg(p_fg);
  Vec m(n);
  for (auto& v : m) v = fg(rng) ? 1.0 : 0.0;
  return m;
}

// Random blobby mask: union of a few axis-aligned rectangles.
Vec random_rects(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  Vec m(h * w, 0.0);
  const int count = static_cast<int>(rng() % 3);
  for (int k = 0; k < count; ++k) {
    const std::size_t r0 = rng() % h, c0 = rng() % w;
    const std::size_t r1 = r0 + 1 + rng() % (h - r0), c1 = c0 + 1 + rng() % (w - c0);
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) m[r * w + c] = 1.0;
  }
  return m;
}

MaskPair flip(const MaskPair& p) {
  MaskPair f = p;
  for (std::size_t r = 0; r < p.height; ++r)
    for (std::size_t c = 0; c < p.width; ++c) {
      f.pred[r * p.width + c] = p.pred[r * p.width + p.width - 1 - c];
      f.label[r * p.width + c] = p.label[r * p.width + p.width - 1 - c];
    }
  return f;
}

// Boundary F by brute force: literal neighbour test, nearest-pixel search.
double boundary_f_oracle(const MaskPair& p, double tol) {
  const long h = static_cast<long>(p.height), w = static_cast<long>(p.width);
  auto edges = [&](const Vec& m, double thr) {
    std::vector<std::pair<long, long>> out;
    auto on = [&](long r, long c) { return r >= 0 && c >= 0 && r < h && c < w && m[r * w + c] >= thr; };
    for (long r = 0; r < h; ++r)
      for (long c = 0; c < w; ++c)
        if (on(r, c) && (!on(r - 1, c) || !on(r + 1, c) || !on(r, c - 1) || !on(r, c + 1))) out.emplace_back(r, c);
    return out;
  };
  const auto pb = edges(p.pred, 0.5), gb = edges(p.label, 0.5);
  if (pb.empty() && gb.empty()) return 1.0;
  if (pb.empty() || gb.empty()) return 0.0;
  auto matched = [&](const auto& from, const auto& to) {
    double hits = 0.0;
    for (auto [r, c] : from) {
      double best = 1e300;
      for (auto [r2, c2] : to) best = std::min(best, std::hypot(double(r - r2), double(c - c2)));
      hits += best <= tol + 1e-12;
    }
    return hits / static_cast<double>(from.size());
  };
  const double prec = matched(pb, gb), rec = matched(gb, pb);
  return prec + rec == 0.0 ? 0.0 : 2.0 * prec * rec / (prec + rec);
}

}  // namespace

TEST(BceDiceTest, PerfectPrediction) {
  std::mt19937_64 rng(1);
  const Vec m = random_mask(rng, 256);
  Tensor y({1, 16, 16}, m);
  EXPECT_LT(loss::bce_dice(y, y).item(), 1e-5);
  std::vector<Tensor> stages(4, y);
  EXPECT_LT(loss::total_loss(stages, y, y).item(), 5e-5);
}

TEST(BceDiceTest, HalfPredictionBceIsLn2) {
  std::mt19937_64 rng(2);
  Tensor y({1, 8, 8}, random_mask(rng, 64));
  Tensor half({1, 8, 8}, 0.5);
  // w = 1 isolates the BCE term.
  EXPECT_NEAR(loss::bce_dice(half, y, 1.0).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(loss::bce_dice(half, Tensor::zeros({1, 8, 8}), 1.0).item(), std::log(2.0), 1e-15);
}

TEST(BceDiceTest, MatchesFormulaOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Vec p = oracle::random_vec(rng, 100, 0.0, 1.0), y = random_mask(rng, 100);
    const double w = std::uniform_real_distribution<double>(0, 1)(rng);
    EXPECT_NEAR(loss::bce_dice(Tensor({10, 10}, p), Tensor({10, 10}, y), w).item(), oracle::bce_dice(p, y, w), 1e-10);
  }
  // Saturated predictions exercise the clamp.
  const Vec p{0.0, 1.0, 1.0, 0.0}, y{1.0, 0.0, 1.0, 0.0};
  EXPECT_NEAR(loss::bce_dice(Tensor({4}, p), Tensor({4}, y)).item(), oracle::bce_dice(p, y, 0.5), 1e-10);
  EXPECT_THROW(loss::bce_dice(Tensor({4}), Tensor({5})), ShapeError);
}

TEST(TotalLossTest, SumsFiveTerms) {
  std::mt19937_64 rng(4);
  Tensor y({1, 6, 6}, random_mask(rng, 36));
  Tensor p({1, 6, 6}, oracle::random_vec(rng, 36, 0, 1));
  std::vector<Tensor> same(4, p);
  EXPECT_NEAR(loss::total_loss(same, p, y).item(), 5.0 * loss::bce_dice(p, y).item(), 1e-12);

  std::vector<Tensor> stages;
  double want = 0.0;
  for (int i = 0; i < 4; ++i) {
    stages.emplace_back(Shape{1, 6, 6}, oracle::random_vec(rng, 36, 0, 1));
    want += oracle::bce_dice(vec(stages.back()), vec(y), 0.5);
  }
  want += oracle::bce_dice(vec(p), vec(y), 0.5);
  EXPECT_NEAR(loss::total_loss(stages, p, y).item(), want, 1e-10);
}

TEST(TotalLossTest, GradCheckThroughLogits) {
  Initializer init(5);
  std::vector<Tensor> logits;
  for (int i = 0; i < 5; ++i) logits.push_back(init.uniform_range({1, 4, 4}, -3, 3).set_requires_grad());
  std::mt19937_64 rng(6);
  Tensor y({1, 4, 4}, random_mask(rng, 16));
  auto f = [&] {
    std::vector<Tensor> stages;
    for (int i = 0; i < 4; ++i) stages.push_back(sigmoid(logits[i]));
    return loss::total_loss(stages, sigmoid(logits[4]), y);
  };
  std::vector<GradCheckInput> inputs;
  for (auto& l : logits) inputs.push_back({"logit", l});
  auto report = grad_check(f, inputs);
  EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(OverlapTest, Examples) {
  std::mt19937_64 rng(7);
  const Vec m = random_mask(rng, 25);
  auto same = metrics::dice_iou_mae({5, 5, m, m});
  EXPECT_EQ(same.dice, 1.0);
  EXPECT_EQ(same.iou, 1.0);
  EXPECT_EQ(same.mae, 0.0);

  Vec left(16, 0.0), top(16, 0.0);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      left[r * 4 + c] = c < 2;
      top[r * 4 + c] = r < 2;
    }
  auto o = metrics::dice_iou_mae({4, 4, left, top});
  EXPECT_DOUBLE_EQ(o.dice, 2.0 * 4.0 / (8.0 + 8.0));
  EXPECT_DOUBLE_EQ(o.iou, 4.0 / 12.0);

  Vec right(16);
  for (std::size_t i = 0; i < 16; ++i) right[i] = 1.0 - left[i];
  auto d = metrics::dice_iou_mae({4, 4, left, right});
  EXPECT_EQ(d.dice, 0.0);
  EXPECT_EQ(d.iou, 0.0);

  auto empty = metrics::dice_iou_mae({2, 2, Vec(4, 0.1), Vec(4, 0.0)});
  EXPECT_EQ(empty.dice, 1.0);
  EXPECT_EQ(empty.iou, 1.0);
}

TEST(OverlapTest, MatchesPixelCountOracle) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const Vec p = oracle::random_vec(rng, 49, 0, 1), y = random_mask(rng, 49);
    double inter = 0, ps = 0, ys = 0, err = 0;
    for (std::size_t i = 0; i < 49; ++i) {
      const bool b = p[i] >= 0.5;
      inter += b && y[i] == 1.0;
      ps += b;
      ys += y[i];
      err += std::abs(p[i] - y[i]);
    }
    auto o = metrics::dice_iou_mae({7, 7, p, y});
    if (ps + ys > 0) {
      EXPECT_DOUBLE_EQ(o.dice, 2 * inter / (ps + ys));
      EXPECT_DOUBLE_EQ(o.iou, inter / (ps + ys - inter));
    }
    EXPECT_NEAR(o.mae, err / 49.0, 1e-15);
  }
}

TEST(MaskPairTest, Validation) {
  EXPECT_THROW(metrics::dice_iou_mae({2, 2, Vec(4), Vec(3)}), ShapeError);
  EXPECT_THROW(metrics::dice_iou_mae({2, 2, Vec(4), Vec{0, 1, 0.5, 0}}), ShapeError);
  EXPECT_THROW(metrics::dice_iou_mae({2, 2, Vec{0, NAN, 0, 0}, Vec(4)}), NumericError);
}

TEST(BoundaryFTest, Examples) {
  std::mt19937_64 rng(9);
  const Vec m = random_rects(rng, 12, 12);
  EXPECT_EQ(metrics::boundary_f({12, 12, m, m}, 1), 1.0);

  Vec sq(100, 0.0), shifted(100, 0.0);
  for (std::size_t r = 3; r < 7; ++r)
    for (std::size_t c = 3; c < 7; ++c) {
      sq[r * 10 + c] = 1.0;
      shifted[r * 10 + c + 1] = 1.0;
    }
  EXPECT_EQ(metrics::boundary_f({10, 10, Vec(100, 0.0), sq}, 1), 0.0);
  EXPECT_EQ(metrics::boundary_f({10, 10, shifted, sq}, 1), 1.0);
  EXPECT_DOUBLE_EQ(metrics::boundary_f({10, 10, shifted, sq}, 1), boundary_f_oracle({10, 10, shifted, sq}, 1));
  EXPECT_LT(metrics::boundary_f({10, 10, shifted, sq}, 0), 1.0);
  EXPECT_EQ(metrics::boundary_f({4, 4, Vec(16, 0.0), Vec(16, 0.0)}, 1), 1.0);
}

TEST(BoundaryFTest, MatchesBruteForce) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 3 + rng() % 10, w = 3 + rng() % 10;
    MaskPair p{h, w, random_rects(rng, h, w), random_rects(rng, h, w)};
    if (trial % 3 == 0) p.pred = random_mask(rng, h * w, 0.5);
    const std::size_t tol = rng() % 4;
    EXPECT_NEAR(metrics::boundary_f(p, tol), boundary_f_oracle(p, static_cast<double>(tol)), 1e-12)
        << h << "x" << w << " tol " << tol;
  }
}

TEST(BoundaryFTest, DefaultTolerance) {
  EXPECT_EQ(metrics::default_tolerance(64, 64), 1u);
  EXPECT_EQ(metrics::default_tolerance(224, 224), 3u);  // 0.008 * 316.8 = 2.53
  EXPECT_EQ(metrics::default_tolerance(8, 8), 1u);
}

TEST(DistanceTransformTest, MatchesBruteForce) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t h = 1 + rng() % 9, w = 1 + rng() % 9;
    std::vector<unsigned char> sites(h * w);
    for (auto& s : sites) s = rng() % 5 == 0;
    const auto d = metrics::squared_distance_transform(sites, h, w);
    for (std::size_t i = 0; i < h * w; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < h * w; ++j)
        if (sites[j]) {
          const double dr = double(i / w) - double(j / w), dc = double(i % w) - double(j % w);
          best = std::min(best, dr * dr + dc * dc);
        }
      EXPECT_EQ(d[i], best);
    }
  }
}

TEST(SMeasureTest, Examples) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec m = random_rects(rng, 10, 10);
    EXPECT_NEAR(metrics::s_measure({10, 10, m, m}), 1.0, 1e-12);
  }
  // Degenerate labels: all foreground scores mean(pred), all background 1 - mean(pred).
  for (double c : {0.0, 0.2, 0.5, 0.9, 1.0}) {
    EXPECT_NEAR(metrics::s_measure({6, 6, Vec(36, c), Vec(36, 1.0)}), c, 1e-15);
    EXPECT_NEAR(metrics::s_measure({6, 6, Vec(36, c), Vec(36, 0.0)}), 1.0 - c, 1e-15);
  }
}

TEST(SMeasureTest, ObjectTermTranscription) {
  // alpha = 1 isolates the object term:
  //   u * O(fg) + (1 - u) * O(1 - bg),  O(x) = 2 mean / (mean^2 + 1 + std + eps), std with n - 1.
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    Vec y = random_mask(rng, 30);
    y[0] = 1.0;
    y[1] = 0.0;
    const Vec p = oracle::random_vec(rng, 30, 0, 1);
    auto score = [](const Vec& v) {
      double m = 0.0;
      for (double x : v) m += x;
      m /= double(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - m) * (x - m);
      const double sd = v.size() > 1 ? std::sqrt(ss / double(v.size() - 1)) : 0.0;
      return 2.0 * m / (m * m + 1.0 + sd + std::numeric_limits<double>::epsilon());
    };
    Vec fg, bg;
    for (std::size_t i = 0; i < 30; ++i) (y[i] == 1.0 ? fg : bg).push_back(y[i] == 1.0 ? p[i] : 1.0 - p[i]);
    const double u = double(fg.size()) / 30.0;
    const double want = std::clamp(u * score(fg) + (1.0 - u) * score(bg), 0.0, 1.0);
    EXPECT_NEAR(metrics::s_measure({5, 6, p, y}, 1.0), want, 1e-12);
  }
}

TEST(MetricPropertiesTest, RangeFlipAndIdentities) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t h = 2 + rng() % 12, w = 2 + rng() % 12;
    MaskPair p{h, w, oracle::random_vec(rng, h * w, 0, 1), random_rects(rng, h, w)};
    if (trial % 2 == 0) {
      const Vec r = random_rects(rng, h, w);
      for (std::size_t i = 0; i < h * w; ++i) p.pred[i] = 0.8 * r[i] + 0.2 * p.pred[i];
    }
    const auto tol = metrics::default_tolerance(h, w);
    const auto a = metrics::evaluate(p, tol), b = metrics::evaluate(flip(p), tol);
    for (double v : {a.dice, a.iou, a.mae, a.boundary_f, a.s_measure}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_GE(a.dice, a.iou);
    EXPECT_NEAR(a.dice, 2 * a.iou / (1 + a.iou), 1e-12);
    EXPECT_DOUBLE_EQ(a.dice, b.dice);
    EXPECT_DOUBLE_EQ(a.iou, b.iou);
    EXPECT_NEAR(a.mae, b.mae, 1e-15);
    EXPECT_DOUBLE_EQ(a.boundary_f, b.boundary_f);
    EXPECT_NEAR(a.s_measure, b.s_measure, 1e-12) << h << "x" << w;

    MaskPair inv = p;
    for (auto& v : inv.pred) v = 1.0 - v;
    for (auto& v : inv.label) v = 1.0 - v;
    EXPECT_NEAR(metrics::dice_iou_mae(inv).mae, a.mae, 1e-12);
  }
}

TEST(MetricPropertiesTest, MeanReport) {
  std::vector<metrics::MetricReport> r{{1, 1, 0, 1, 1}, {0, 0, 1, 0, 0.5}};
  auto m = metrics::mean_report(r);
  EXPECT_EQ(m.dice, 0.5);
  EXPECT_EQ(m.mae, 0.5);
  EXPECT_EQ(m.s_measure, 0.75);
}
