#include "polyseg/metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>

#include "polyseg/errors.hpp"

namespace polyseg::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMachEps = std::numeric_limits<double>::epsilon();

std::vector<unsigned char> binarize(std::span<const double> x, double threshold) {
  std::vector<unsigned char> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= threshold ? 1 : 0;
  return out;
}

constexpr double kFar = 1e20;

// Lower envelope of parabolas (Felzenszwalb-Huttenlocher), one row or column.
void edt_1d(const double* f, double* d, std::size_t n, std::vector<std::size_t>& v, std::vector<double>& z) {
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::size_t k = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (std::size_t q = 1; q < n; ++q) {
    const auto qd = static_cast<double>(q);
    double s;
    while (true) {
      const auto vk = static_cast<double>(v[k]);
      s = ((f[q] + qd * qd) - (f[v[k]] + vk * vk)) / (2.0 * qd - 2.0 * vk);
      if (s > z[k] || k == 0) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const auto qd = static_cast<double>(q);
    while (z[k + 1] < qd) ++k;
    const double diff = qd - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

double object_score(std::span<const double> values) {
  if (values.empty()) return 0.0;
  const auto n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double sigma = 0.0;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    sigma = std::sqrt(ss / (n - 1.0));
  }
  return 2.0 * mean / (mean * mean + 1.0 + sigma + kMachEps);
}

double s_object(const MaskPair& p) {
  std::vector<double> fg, bg;
  for (std::size_t i = 0; i < p.pred.size(); ++i) {
    if (p.label[i] > 0.5) {
      fg.push_back(p.pred[i]);
    } else {
      bg.push_back(1.0 - p.pred[i]);
    }
  }
  const double u = static_cast<double>(fg.size()) / static_cast<double>(p.pred.size());
  return u * object_score(fg) + (1.0 - u) * object_score(bg);
}

double region_ssim(const MaskPair& p, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  const std::size_t cnt = (r1 - r0) * (c1 - c0);
  if (cnt == 0) return 0.0;
  const auto n = static_cast<double>(cnt);
  double mx = 0.0, my = 0.0;
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) {
      mx += p.pred[r * p.width + c];
      my += p.label[r * p.width + c];
    }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) {
      const double dx = p.pred[r * p.width + c] - mx;
      const double dy = p.label[r * p.width + c] - my;
      sxx += dx * dx;
      syy += dy * dy;
      sxy += dx * dy;
    }
  const double norm = n - 1.0 + kMachEps;
  sxx /= norm;
  syy /= norm;
  sxy /= norm;
  const double a = 4.0 * mx * my * sxy;
  const double b = (mx * mx + my * my) * (sxx + syy);
  if (a != 0.0) return a / b;  // b >= |a| > 0
  return b == 0.0 ? 1.0 : 0.0;
}

// Split position along one axis: the label centroid in continuous pixel
// coordinates, rounded. With num / den the centroid, an exact half tie yields
// both neighbours so the caller can average them; this keeps the measure
// invariant under flips.
std::pair<std::size_t, std::size_t> split_candidates(std::uint64_t num, std::uint64_t den) {
  const std::uint64_t q = num / den, rem = num % den;
  if (2 * rem > den) return {q + 1, q + 1};
  if (2 * rem < den) return {q, q};
  return {q, q + 1};
}

double s_region_at(const MaskPair& p, std::size_t x, std::size_t y) {
  const std::size_t h = p.height, w = p.width;
  const double area = static_cast<double>(h * w);
  const double w1 = static_cast<double>(x * y) / area;
  const double w2 = static_cast<double>((w - x) * y) / area;
  const double w3 = static_cast<double>(x * (h - y)) / area;
  const double w4 = 1.0 - w1 - w2 - w3;
  return w1 * region_ssim(p, 0, y, 0, x) + w2 * region_ssim(p, 0, y, x, w) + w3 * region_ssim(p, y, h, 0, x) +
         w4 * region_ssim(p, y, h, x, w);
}

double s_region(const MaskPair& p) {
  const std::size_t h = p.height, w = p.width;
  // Centroid of pixel centres (c + 0.5) is sum(2c + 1) / (2 * total).
  std::uint64_t total = 0, nx = 0, ny = 0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      if (p.label[r * w + c] == 0.0) continue;
      ++total;
      nx += 2 * c + 1;
      ny += 2 * r + 1;
    }
  const auto xs = total == 0 ? split_candidates(w, 2) : split_candidates(nx, 2 * total);
  const auto ys = total == 0 ? split_candidates(h, 2) : split_candidates(ny, 2 * total);
  double sum = 0.0;
  for (std::size_t x : {xs.first, xs.second})
    for (std::size_t y : {ys.first, ys.second}) sum += s_region_at(p, x, y);
  return sum / 4.0;
}

}  // namespace

void MaskPair::validate() const {
  const std::size_t n = height * width;
  if (n == 0 || pred.size() != n || label.size() != n) {
    throw ShapeError(fmt::format("mask pair: {}x{} needs {} values, got pred {} / label {}", height, width, n,
                                 pred.size(), label.size()));
  }
  for (double v : pred)
    if (!std::isfinite(v)) throw NumericError("mask pair: prediction contains non-finite values");
  for (double v : label)
    if (v != 0.0 && v != 1.0) throw ShapeError(fmt::format("mask pair: label value {} is not binary", v));
}

Overlap dice_iou_mae(const MaskPair& pair, double threshold) {
  pair.validate();
  std::size_t inter = 0, ps = 0, gs = 0;
  double abs_err = 0.0;
  for (std::size_t i = 0; i < pair.pred.size(); ++i) {
    const bool p = pair.pred[i] >= threshold;
    const bool g = pair.label[i] > 0.5;
    inter += p && g;
    ps += p;
    gs += g;
    abs_err += std::abs(pair.pred[i] - pair.label[i]);
  }
  Overlap o;
  o.mae = abs_err / static_cast<double>(pair.pred.size());
  const std::size_t uni = ps + gs - inter;
  if (uni == 0) {
    o.dice = o.iou = 1.0;
  } else {
    o.dice = 2.0 * static_cast<double>(inter) / static_cast<double>(ps + gs);
    o.iou = static_cast<double>(inter) / static_cast<double>(uni);
  }
  return o;
}

std::vector<unsigned char> boundary_map(std::span<const unsigned char> mask, std::size_t h, std::size_t w) {
  std::vector<unsigned char> out(mask.size(), 0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (!mask[r * w + c]) continue;
      const bool edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w || !mask[(r - 1) * w + c] ||
                        !mask[(r + 1) * w + c] || !mask[r * w + c - 1] || !mask[r * w + c + 1];
      out[r * w + c] = edge ? 1 : 0;
    }
  }
  return out;
}

std::vector<double> squared_distance_transform(std::span<const unsigned char> sites, std::size_t h, std::size_t w) {
  std::vector<double> f(h * w);
  if (std::find(sites.begin(), sites.end(), 1) == sites.end()) return std::vector<double>(h * w, kInf);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = sites[i] ? 0.0 : kFar;
  std::vector<std::size_t> v;
  std::vector<double> z, col(h), out(std::max(h, w));
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) col[r] = f[r * w + c];
    edt_1d(col.data(), out.data(), h, v, z);
    for (std::size_t r = 0; r < h; ++r) f[r * w + c] = out[r];
  }
  for (std::size_t r = 0; r < h; ++r) {
    edt_1d(f.data() + r * w, out.data(), w, v, z);
    std::copy(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(w), f.begin() + static_cast<std::ptrdiff_t>(r * w));
  }
  return f;
}

double boundary_f(const MaskPair& pair, std::size_t tol_px, double threshold) {
  pair.validate();
  const std::size_t h = pair.height, w = pair.width;
  const auto pb = boundary_map(binarize(pair.pred, threshold), h, w);
  const auto gb = boundary_map(binarize(pair.label, 0.5), h, w);
  const auto np = std::count(pb.begin(), pb.end(), 1);
  const auto ng = std::count(gb.begin(), gb.end(), 1);
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  const auto dg = squared_distance_transform(gb, h, w);
  const auto dp = squared_distance_transform(pb, h, w);
  const double tol2 = static_cast<double>(tol_px * tol_px);
  std::size_t hit_p = 0, hit_g = 0;
  for (std::size_t i = 0; i < pb.size(); ++i) {
    if (pb[i] && dg[i] <= tol2) ++hit_p;
    if (gb[i] && dp[i] <= tol2) ++hit_g;
  }
  const double precision = static_cast<double>(hit_p) / static_cast<double>(np);
  const double recall = static_cast<double>(hit_g) / static_cast<double>(ng);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

std::size_t default_tolerance(std::size_t h, std::size_t w) {
  const double diag = std::hypot(static_cast<double>(h), static_cast<double>(w));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.008 * diag)));
}

double s_measure(const MaskPair& pair, double alpha) {
  pair.validate();
  double fg = 0.0, mp = 0.0;
  for (std::size_t i = 0; i < pair.pred.size(); ++i) {
    fg += pair.label[i];
    mp += pair.pred[i];
  }
  const auto n = static_cast<double>(pair.pred.size());
  fg /= n;
  mp /= n;
  double q;
  if (fg == 0.0) {
    q = 1.0 - mp;
  } else if (fg == 1.0) {
    q = mp;
  } else {
    q = alpha * s_object(pair) + (1.0 - alpha) * s_region(pair);
  }
  return std::clamp(q, 0.0, 1.0);
}

MetricReport evaluate(const MaskPair& pair, std::size_t tol_px) {
  const auto o = dice_iou_mae(pair);
  return {o.dice, o.iou, o.mae, boundary_f(pair, tol_px), s_measure(pair)};
}

MetricReport mean_report(std::span<const MetricReport> reports) {
  MetricReport m;
  if (reports.empty()) return m;
  for (const auto& r : reports) {
    m.dice += r.dice;
    m.iou += r.iou;
    m.mae += r.mae;
    m.boundary_f += r.boundary_f;
    m.s_measure += r.s_measure;
  }
  const auto n = static_cast<double>(reports.size());
  m.dice /= n;
  m.iou /= n;
  m.mae /= n;
  m.boundary_f /= n;
  m.s_measure /= n;
  return m;
}

}  // namespace polyseg::metrics
