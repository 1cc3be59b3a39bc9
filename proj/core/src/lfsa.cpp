#include "polyseg/lfsa.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "polyseg/errors.hpp"
#include "polyseg/ops.hpp"

namespace polyseg::lfsa {

LfsaParams::LfsaParams(Initializer& init, std::size_t q_channels, std::size_t v_channels, std::size_t d_out,
                       LfsaConfig cfg)
    : config(cfg) {
  if (cfg.radius < 1) throw ConfigError(fmt::format("lfsa: window radius must be >= 1, got {}", cfg.radius));
  if (!(cfg.eps > 0.0)) throw ConfigError("lfsa: eps must be > 0");
  const std::size_t side = 2 * cfg.radius + 1;
  w_q = init.uniform({d_out, q_channels}, q_channels);
  w_k = init.uniform({d_out, q_channels}, q_channels);
  w_v = init.uniform({d_out, v_channels}, v_channels);
  rel_pos = init.uniform({side * side, d_out}, d_out);
  omega1 = Tensor::scalar(1.0);
  omega2 = Tensor::scalar(1.0);
}

void LfsaParams::collect(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".w_q", w_q);
  reg.add(prefix + ".w_k", w_k);
  reg.add(prefix + ".w_v", w_v);
  reg.add(prefix + ".rel_pos", rel_pos);
  reg.add(prefix + ".omega1", omega1);
  reg.add(prefix + ".omega2", omega2);
}

MixCoefficients mix_coefficients(const Tensor& omega1, const Tensor& omega2, double eps) {
  Tensor w1 = relu(omega1);
  Tensor w2 = relu(omega2);
  Tensor denom = add_scalar(add(w1, w2), eps);
  return {div(w1, denom), div(w2, denom)};
}

namespace {

struct Window {
  std::size_t a0, a1, b0, b1;  // inclusive row range, inclusive col range
};

Window window_at(std::size_t i, std::size_t j, std::size_t h, std::size_t w, std::size_t r) {
  return {i >= r ? i - r : 0, std::min(h - 1, i + r), j >= r ? j - r : 0, std::min(w - 1, j + r)};
}

// Position-major copy: out[p * c + ch] = x[ch * n + p].
std::vector<double> to_position_major(std::span<const double> x, std::size_t c, std::size_t n) {
  std::vector<double> out(c * n);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < n; ++p) out[p * c + ch] = x[ch * n + p];
  return out;
}

}  // namespace

Tensor window_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& rel_pos, const Tensor& c1,
                        const Tensor& c2, std::size_t radius, AttentionTrace* trace) {
  if (radius < 1) throw ConfigError(fmt::format("window_attention: radius must be >= 1, got {}", radius));
  if (q.ndim() != 3 || k.shape() != q.shape() || v.ndim() != 3 || v.dim(1) != q.dim(1) || v.dim(2) != q.dim(2)) {
    throw ShapeError(fmt::format("window_attention: q {}, k {}, v {} must share d x H x W (v may differ in channels)",
                                 shape_str(q.shape()), shape_str(k.shape()), shape_str(v.shape())));
  }
  const std::size_t d = q.dim(0), h = q.dim(1), w = q.dim(2), dv = v.dim(0), n = h * w;
  const std::size_t side = 2 * radius + 1;
  if (rel_pos.ndim() != 2 || rel_pos.dim(0) != side * side || rel_pos.dim(1) != d) {
    throw ShapeError(fmt::format("window_attention: rel_pos {} must be {} x {}", shape_str(rel_pos.shape()), side * side, d));
  }
  if (c1.numel() != 1 || c2.numel() != 1) throw ShapeError("window_attention: c1, c2 must be scalars");

  const auto qp = to_position_major(q.data(), d, n);
  const auto kp = to_position_major(k.data(), d, n);
  const auto vp = to_position_major(v.data(), dv, n);
  auto rv = rel_pos.data();
  const double a1 = c1.item(), a2 = c2.item();

  // Saved per (query, window slot): softmax weight, q.k and q.r.
  std::vector<std::size_t> start(n + 1, 0);
  for (std::size_t p = 0; p < n; ++p) {
    const auto win = window_at(p / w, p % w, h, w, radius);
    start[p + 1] = start[p] + (win.a1 - win.a0 + 1) * (win.b1 - win.b0 + 1);
  }
  std::vector<double> alpha(start[n]), qk(start[n]), qr(start[n]);

  Tensor out({dv, h, w}, 0.0);
  auto ov = out.mutable_data();
  std::vector<double> y(dv);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t i = p / w, j = p % w;
    const auto win = window_at(i, j, h, w, radius);
    const double* qv = qp.data() + p * d;
    std::size_t slot = start[p];
    double mx = -INFINITY;
    for (std::size_t a = win.a0; a <= win.a1; ++a) {
      for (std::size_t b = win.b0; b <= win.b1; ++b, ++slot) {
        const double* kv = kp.data() + (a * w + b) * d;
        const double* r = rv.data() + ((a + radius - i) * side + (b + radius - j)) * d;
        double sk = 0.0, sr = 0.0;
        for (std::size_t ch = 0; ch < d; ++ch) {
          sk += qv[ch] * kv[ch];
          sr += qv[ch] * r[ch];
        }
        qk[slot] = sk;
        qr[slot] = sr;
        alpha[slot] = a1 * sk + a2 * sr;
        mx = std::max(mx, alpha[slot]);
      }
    }
    double z = 0.0;
    for (std::size_t s = start[p]; s < start[p + 1]; ++s) {
      alpha[s] = std::exp(alpha[s] - mx);
      z += alpha[s];
    }
    std::fill(y.begin(), y.end(), 0.0);
    slot = start[p];
    for (std::size_t a = win.a0; a <= win.a1; ++a) {
      for (std::size_t b = win.b0; b <= win.b1; ++b, ++slot) {
        alpha[slot] /= z;
        const double* vv = vp.data() + (a * w + b) * dv;
        for (std::size_t ch = 0; ch < dv; ++ch) y[ch] += alpha[slot] * vv[ch];
      }
    }
    for (std::size_t ch = 0; ch < dv; ++ch) ov[ch * n + p] = y[ch];
    if (trace) trace->weights.emplace_back(alpha.begin() + start[p], alpha.begin() + start[p + 1]);
  }

  Tape::active().record(
      "window_attention", {&q, &k, &v, &rel_pos, &c1, &c2}, out,
      [q, k, v, rel_pos, c1, c2, radius, d, h, w, dv, n, side, start = std::move(start), alpha = std::move(alpha),
       qk = std::move(qk), qr = std::move(qr)](std::span<const double> g) {
        const auto qp = to_position_major(q.data(), d, n);
        const auto kp = to_position_major(k.data(), d, n);
        const auto vp = to_position_major(v.data(), dv, n);
        const auto gp = to_position_major(g, dv, n);
        auto rv = rel_pos.data();
        const double a1 = c1.item(), a2 = c2.item();
        std::vector<double> gq(d * n, 0.0), gk(d * n, 0.0), gv(dv * n, 0.0), gr(side * side * d, 0.0);
        double gc1 = 0.0, gc2 = 0.0;
        std::vector<double> galpha;
        for (std::size_t p = 0; p < n; ++p) {
          const std::size_t i = p / w, j = p % w;
          const auto win = window_at(i, j, h, w, radius);
          const double* gy = gp.data() + p * dv;
          const double* qv = qp.data() + p * d;
          galpha.assign(start[p + 1] - start[p], 0.0);
          double dotsum = 0.0;
          std::size_t slot = start[p];
          for (std::size_t a = win.a0; a <= win.a1; ++a) {
            for (std::size_t b = win.b0; b <= win.b1; ++b, ++slot) {
              const std::size_t wp = a * w + b;
              const double* vv = vp.data() + wp * dv;
              double ga = 0.0;
              for (std::size_t ch = 0; ch < dv; ++ch) {
                ga += gy[ch] * vv[ch];
                gv[wp * dv + ch] += alpha[slot] * gy[ch];
              }
              galpha[slot - start[p]] = ga;
              dotsum += alpha[slot] * ga;
            }
          }
          slot = start[p];
          for (std::size_t a = win.a0; a <= win.a1; ++a) {
            for (std::size_t b = win.b0; b <= win.b1; ++b, ++slot) {
              const std::size_t wp = a * w + b;
              const double gs = alpha[slot] * (galpha[slot - start[p]] - dotsum);
              if (gs == 0.0) continue;
              gc1 += gs * qk[slot];
              gc2 += gs * qr[slot];
              const std::size_t roff = ((a + radius - i) * side + (b + radius - j)) * d;
              const double* kv = kp.data() + wp * d;
              const double* r = rv.data() + roff;
              for (std::size_t ch = 0; ch < d; ++ch) {
                gq[p * d + ch] += gs * (a1 * kv[ch] + a2 * r[ch]);
                gk[wp * d + ch] += gs * a1 * qv[ch];
                gr[roff + ch] += gs * a2 * qv[ch];
              }
            }
          }
        }
        auto scatter_back = [](const Tensor& t, const std::vector<double>& pm, std::size_t c, std::size_t n) {
          if (!t.requires_grad()) return;
          auto& gt = t.impl()->grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < n; ++p) gt[ch * n + p] += pm[p * c + ch];
        };
        scatter_back(q, gq, d, n);
        scatter_back(k, gk, d, n);
        scatter_back(v, gv, dv, n);
        if (rel_pos.requires_grad()) {
          auto& gt = rel_pos.impl()->grad_buffer();
          for (std::size_t i = 0; i < gr.size(); ++i) gt[i] += gr[i];
        }
        if (c1.requires_grad()) c1.impl()->grad_buffer()[0] += gc1;
        if (c2.requires_grad()) c2.impl()->grad_buffer()[0] += gc2;
      });
  return out;
}

Tensor lfsa_attend(const Tensor& q_src, const Tensor& kv_src, const LfsaParams& p, AttentionTrace* trace) {
  if (q_src.ndim() != 3 || kv_src.ndim() != 3) {
    throw ShapeError(fmt::format("lfsa_attend: expected C x H x W inputs, got {} and {}", shape_str(q_src.shape()),
                                 shape_str(kv_src.shape())));
  }
  if (q_src.dim(0) != p.w_q.dim(1) || kv_src.dim(0) != p.w_v.dim(1)) {
    throw ShapeError(fmt::format("lfsa_attend: channels {} / {} do not match projections {} / {}", q_src.dim(0),
                                 kv_src.dim(0), shape_str(p.w_q.shape()), shape_str(p.w_v.shape())));
  }
  const std::size_t h = q_src.dim(1), w = q_src.dim(2), n = h * w;
  const std::size_t d = p.d_out();
  Tensor kv = kv_src;
  if (kv.dim(1) != h || kv.dim(2) != w) kv = resample(kv, h, w, ResampleMode::bilinear);

  Tensor xq = reshape(q_src, {q_src.dim(0), n});
  Tensor xv = reshape(kv, {kv.dim(0), n});
  Tensor q = reshape(matmul(p.w_q, xq), {d, h, w});
  Tensor k = reshape(matmul(p.w_k, xq), {d, h, w});
  Tensor v = reshape(matmul(p.w_v, xv), {d, h, w});
  auto mix = mix_coefficients(p.omega1, p.omega2, p.config.eps);
  return window_attention(q, k, v, p.rel_pos, mix.c1, mix.c2, p.config.radius, trace);
}

DecoderFuseParams::DecoderFuseParams(Initializer& init, std::span<const std::size_t> ch, std::size_t out_channels,
                                     LfsaConfig config) {
  if (ch.size() != 4) throw ConfigError(fmt::format("decoder_fuse: need 4 decoder widths, got {}", ch.size()));
  std::size_t total = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    pairs[i] = LfsaParams(init, ch[i], ch[i + 1], ch[i], config);
    total += ch[i];
  }
  projection = Conv2d(init, total, out_channels, 1);
}

void DecoderFuseParams::collect(ParamRegistry& reg, const std::string& prefix) {
  for (std::size_t i = 0; i < 3; ++i) pairs[i].collect(reg, fmt::format("{}.pair{}", prefix, i + 1));
  projection.collect(reg, prefix + ".proj");
}

DecoderFuseResult decoder_fuse(std::span<const Tensor> maps, const DecoderFuseParams& p) {
  if (maps.size() < 4) throw ConfigError(fmt::format("decoder_fuse: need 4 decoder maps, got {}", maps.size()));
  DecoderFuseResult r;
  const std::size_t h = maps[3].dim(1), w = maps[3].dim(2);
  std::vector<Tensor> up;
  for (std::size_t i = 0; i < 3; ++i) {
    r.pairwise[i] = lfsa_attend(maps[i], maps[i + 1], p.pairs[i]);
    up.push_back(resample(r.pairwise[i], h, w, ResampleMode::bilinear));
  }
  r.concatenated = concat(up, 0);
  r.output = p.projection(r.concatenated);
  return r;
}

}  // namespace polyseg::lfsa
