#include "polyseg/ops.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "polyseg/errors.hpp"

namespace polyseg {
namespace {

std::vector<double>& gbuf(const Tensor& t) { return t.impl()->grad_buffer(); }

Tensor make_out(Shape shape) { return Tensor(std::move(shape), 0.0); }

// Broadcast layout of a binary op: either equal sizes or one side scalar.
struct BinaryLayout {
  Shape shape;
  bool a_scalar = false;
  bool b_scalar = false;
};

BinaryLayout binary_layout(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return {a.shape(), false, false};
  if (b.numel() == 1) return {a.shape(), false, true};
  if (a.numel() == 1) return {b.shape(), true, false};
  throw ShapeError(fmt::format("{}: incompatible shapes {} and {}", op, shape_str(a.shape()), shape_str(b.shape())));
}

// fwd(x, y) -> z ; da(x, y, z) and db(x, y, z) are the local partials.
template <typename Fwd, typename Da, typename Db>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  auto layout = binary_layout(a, b, name);
  Tensor out = make_out(layout.shape);
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.mutable_data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = fwd(av[layout.a_scalar ? 0 : i], bv[layout.b_scalar ? 0 : i]);
  }
  Tape::active().record(name, {&a, &b}, out, [a, b, out, layout, da, db](std::span<const double> g) {
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.data();
    if (a.requires_grad()) {
      auto& ga = gbuf(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ia = layout.a_scalar ? 0 : i;
        ga[ia] += g[i] * da(av[ia], bv[layout.b_scalar ? 0 : i], ov[i]);
      }
    }
    if (b.requires_grad()) {
      auto& gb = gbuf(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ib = layout.b_scalar ? 0 : i;
        gb[ib] += g[i] * db(av[layout.a_scalar ? 0 : i], bv[ib], ov[i]);
      }
    }
  });
  return out;
}

// fwd(x) -> y ; d(x, y) is the local derivative.
template <typename Fwd, typename D>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, D d) {
  Tensor out = make_out(x.shape());
  auto xv = x.data();
  auto ov = out.mutable_data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  Tape::active().record(name, {&x}, out, [x, out, d](std::span<const double> g) {
    auto xv = x.data();
    auto ov = out.data();
    auto& gx = gbuf(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * d(xv[i], ov[i]);
  });
  return out;
}

void require_chw(const Tensor& x, const char* op) {
  if (x.ndim() != 3) throw ShapeError(fmt::format("{}: expected C x H x W input, got {}", op, shape_str(x.shape())));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op("mul_scalar", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor exp(const Tensor& x) {
  return unary_op("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError(fmt::format("clamp: lo {} > hi {}", lo, hi));
  return unary_op(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor activation(const Tensor& x, Activation kind, double negative_slope) {
  switch (kind) {
    case Activation::relu:
      return unary_op(
          "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
    case Activation::leaky_relu:
      return unary_op(
          "leaky_relu", x, [s = negative_slope](double v) { return v > 0.0 ? v : s * v; },
          [s = negative_slope](double v, double) { return v > 0.0 ? 1.0 : s; });
    case Activation::gelu:
      return unary_op(
          "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
          [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
            return cdf + v * pdf;
          });
    case Activation::sigmoid:
      return unary_op(
          "sigmoid", x,
          [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
          },
          [](double, double y) { return y * (1.0 - y); });
  }
  throw ConfigError("unknown activation");
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  Tape::active().record("sum", {&x}, out, [x](std::span<const double> g) {
    auto& gx = gbuf(x);
    for (double& v : gx) v += g[0];
  });
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw ShapeError(fmt::format("dot: sizes differ, {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
  }
  return sum(mul(a, reshape(b, a.shape())));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError(fmt::format("matmul: incompatible shapes {} and {}", shape_str(a.shape()), shape_str(b.shape())));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_out({m, n});
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = ov.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  Tape::active().record("matmul", {&a, &b}, out, [a, b, m, k, n](std::span<const double> g) {
    auto av = a.data();
    auto bv = b.data();
    if (a.requires_grad()) {
      auto& ga = gbuf(a);  // g * b^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (b.requires_grad()) {
      auto& gb = gbuf(b);  // a^T * g
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
      }
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError(fmt::format("transpose: expected 2-D, got {}", shape_str(a.shape())));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out = make_out({c, r});
  auto av = a.data();
  auto ov = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[j * r + i] = av[i * c + j];
  Tape::active().record("transpose", {&a}, out, [a, r, c](std::span<const double> g) {
    auto& ga = gbuf(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError(fmt::format("reshape: cannot view {} as {}", shape_str(a.shape()), shape_str(shape)));
  }
  auto av = a.data();
  Tensor out(std::move(shape), std::vector<double>(av.begin(), av.end()));
  Tape::active().record("reshape", {&a}, out, [a](std::span<const double> g) {
    auto& ga = gbuf(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError(fmt::format("concat: axis {} invalid for {}", axis, shape_str(ref)));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    if (!ok) throw ShapeError(fmt::format("concat: {} does not match {} off axis {}", shape_str(s), shape_str(ref), axis));
    out_shape[axis] += s[axis];
  }
  const auto split = split_axis(out_shape, axis);
  Tensor out = make_out(out_shape);
  auto ov = out.mutable_data();
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * split.inner;
    auto pv = p.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(pv.begin() + o * chunk, chunk, ov.begin() + o * split.extent * split.inner + offset);
    }
    offset += chunk;
  }
  std::vector<Tensor> held(parts.begin(), parts.end());
  Tape::active().record("concat", parts, out, [held, offsets, split, axis](std::span<const double> g) {
    for (std::size_t k = 0; k < held.size(); ++k) {
      if (!held[k].requires_grad()) continue;
      auto& gp = gbuf(held[k]);
      const std::size_t chunk = held[k].dim(axis) * split.inner;
      for (std::size_t o = 0; o < split.outer; ++o) {
        const double* src = g.data() + o * split.extent * split.inner + offsets[k];
        for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
      }
    }
  });
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  if (axis >= s.size() || start + length > s[axis]) {
    throw ShapeError(fmt::format("slice: [{}, {}) out of range on axis {} of {}", start, start + length, axis, shape_str(s)));
  }
  Shape out_shape = s;
  out_shape[axis] = length;
  const auto split = split_axis(s, axis);
  const std::size_t chunk = length * split.inner;
  Tensor out = make_out(out_shape);
  auto av = a.data();
  auto ov = out.mutable_data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(av.begin() + o * split.extent * split.inner + start * split.inner, chunk, ov.begin() + o * chunk);
  }
  Tape::active().record("slice", {&a}, out, [a, split, chunk, start](std::span<const double> g) {
    auto& ga = gbuf(a);
    for (std::size_t o = 0; o < split.outer; ++o) {
      double* dst = ga.data() + o * split.extent * split.inner + start * split.inner;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[o * chunk + i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvGeometry {
  std::size_t cin, h, w, cout, cin_g, cout_g, k, stride, pad, groups, oh, ow;
};

// Valid output range [lo, hi) along one axis for kernel tap `tap`.
std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t tap, std::size_t stride,
                                                std::size_t pad) {
  // input index = o * stride + tap - pad must lie in [0, in)
  std::size_t lo = 0;
  if (tap < pad) lo = (pad - tap + stride - 1) / stride;
  if (in + pad <= tap) return {0, 0};
  std::size_t hi = (in - 1 + pad - tap) / stride + 1;
  hi = std::min(hi, out);
  if (lo >= hi) return {0, 0};
  return {lo, hi};
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dOptions opt) {
  require_chw(x, "conv2d");
  if (w.ndim() != 4) throw ShapeError(fmt::format("conv2d: weight must be 4-D, got {}", shape_str(w.shape())));
  if (opt.groups == 0 || opt.stride == 0) throw ConfigError("conv2d: stride and groups must be >= 1");
  ConvGeometry g{};
  g.cin = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cout = w.dim(0);
  g.k = w.dim(2);
  g.stride = opt.stride;
  g.pad = opt.pad;
  g.groups = opt.groups;
  if (w.dim(3) != g.k) throw ConfigError(fmt::format("conv2d: kernel must be square, got {}", shape_str(w.shape())));
  if (g.k % 2 == 0 && !(g.stride == g.k && g.pad == 0)) {
    throw ConfigError(fmt::format("conv2d: even kernel {} only allowed as a patch kernel (stride == k, pad == 0)", g.k));
  }
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw ConfigError(fmt::format("conv2d: channels in={} out={} not divisible by groups={}", g.cin, g.cout, g.groups));
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (w.dim(1) != g.cin_g) {
    throw ShapeError(fmt::format("conv2d: weight {} does not match input {} with groups={}", shape_str(w.shape()),
                                 shape_str(x.shape()), g.groups));
  }
  if (bias.defined() && bias.numel() != g.cout) {
    throw ShapeError(fmt::format("conv2d: bias {} for {} output channels", shape_str(bias.shape()), g.cout));
  }
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    throw ShapeError(fmt::format("conv2d: input {} smaller than kernel {} with pad {}", shape_str(x.shape()), g.k, g.pad));
  }
  g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;

  Tensor out = make_out({g.cout, g.oh, g.ow});
  auto xv = x.data();
  auto wv = w.data();
  auto ov = out.mutable_data();
  const std::size_t plane = g.oh * g.ow;
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t oc = 0; oc < g.cout; ++oc) std::fill_n(ov.begin() + oc * plane, plane, bv[oc]);
  }
  for (std::size_t oc = 0; oc < g.cout; ++oc) {
    const std::size_t grp = oc / g.cout_g;
    double* obase = ov.data() + oc * plane;
    for (std::size_t icg = 0; icg < g.cin_g; ++icg) {
      const double* xbase = xv.data() + (grp * g.cin_g + icg) * g.h * g.w;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const auto [oy0, oy1] = valid_range(g.oh, g.h, ky, g.stride, g.pad);
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const double wt = wv[((oc * g.cin_g + icg) * g.k + ky) * g.k + kx];
          if (wt == 0.0) continue;
          const auto [ox0, ox1] = valid_range(g.ow, g.w, kx, g.stride, g.pad);
          if (ox0 == ox1) continue;
          const std::size_t ix0 = ox0 * g.stride + kx - g.pad;
          for (std::size_t oy = oy0; oy < oy1; ++oy) {
            const double* xrow = xbase + (oy * g.stride + ky - g.pad) * g.w;
            double* orow = obase + oy * g.ow;
            for (std::size_t ox = ox0, ix = ix0; ox < ox1; ++ox, ix += g.stride) orow[ox] += wt * xrow[ix];
          }
        }
      }
    }
  }

  Tape::active().record("conv2d", {&x, &w, &bias}, out, [x, w, bias, g](std::span<const double> go) {
    auto xv = x.data();
    auto wv = w.data();
    const std::size_t plane = g.oh * g.ow;
    std::vector<double>* gx = x.requires_grad() ? &gbuf(x) : nullptr;
    std::vector<double>* gw = w.requires_grad() ? &gbuf(w) : nullptr;
    if (bias.defined() && bias.requires_grad()) {
      auto& gb = gbuf(bias);
      for (std::size_t oc = 0; oc < g.cout; ++oc) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += go[oc * plane + i];
        gb[oc] += acc;
      }
    }
    if (!gx && !gw) return;
    for (std::size_t oc = 0; oc < g.cout; ++oc) {
      const std::size_t grp = oc / g.cout_g;
      const double* gobase = go.data() + oc * plane;
      for (std::size_t icg = 0; icg < g.cin_g; ++icg) {
        const std::size_t ic = grp * g.cin_g + icg;
        const double* xbase = xv.data() + ic * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const auto [oy0, oy1] = valid_range(g.oh, g.h, ky, g.stride, g.pad);
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const std::size_t widx = ((oc * g.cin_g + icg) * g.k + ky) * g.k + kx;
            const double wt = wv[widx];
            const auto [ox0, ox1] = valid_range(g.ow, g.w, kx, g.stride, g.pad);
            if (ox0 == ox1) continue;
            const std::size_t ix0 = ox0 * g.stride + kx - g.pad;
            double wacc = 0.0;
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const std::size_t row_off = (oy * g.stride + ky - g.pad) * g.w;
              const double* grow = gobase + oy * g.ow;
              if (gw) {
                const double* xrow = xbase + row_off;
                for (std::size_t ox = ox0, ix = ix0; ox < ox1; ++ox, ix += g.stride) wacc += grow[ox] * xrow[ix];
              }
              if (gx && wt != 0.0) {
                double* gxrow = gx->data() + ic * g.h * g.w + row_off;
                for (std::size_t ox = ox0, ix = ix0; ox < ox1; ++ox, ix += g.stride) gxrow[ix] += wt * grow[ox];
              }
            }
            if (gw) (*gw)[widx] += wacc;
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) throw ShapeError(fmt::format("softmax: axis {} invalid for {}", axis, shape_str(x.shape())));
  const auto split = split_axis(x.shape(), axis);
  Tensor out = make_out(x.shape());
  auto xv = x.data();
  auto ov = out.mutable_data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t in = 0; in < split.inner; ++in) {
      const std::size_t base = o * split.extent * split.inner + in;
      double mx = -INFINITY;
      for (std::size_t e = 0; e < split.extent; ++e) mx = std::max(mx, xv[base + e * split.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < split.extent; ++e) {
        const double v = std::exp(xv[base + e * split.inner] - mx);
        ov[base + e * split.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < split.extent; ++e) ov[base + e * split.inner] /= z;
    }
  }
  Tape::active().record("softmax", {&x}, out, [x, out, split](std::span<const double> g) {
    auto yv = out.data();
    auto& gx = gbuf(x);
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t in = 0; in < split.inner; ++in) {
        const std::size_t base = o * split.extent * split.inner + in;
        double s = 0.0;
        for (std::size_t e = 0; e < split.extent; ++e) s += g[base + e * split.inner] * yv[base + e * split.inner];
        for (std::size_t e = 0; e < split.extent; ++e) {
          const std::size_t i = base + e * split.inner;
          gx[i] += yv[i] * (g[i] - s);
        }
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_chw(x, "layer_norm");
  if (!(eps > 0.0)) throw ConfigError(fmt::format("layer_norm: eps must be > 0, got {}", eps));
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError(fmt::format("layer_norm: gamma {} / beta {} for {} channels", shape_str(gamma.shape()),
                                 shape_str(beta.shape()), c));
  }
  Tensor out = make_out(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(n);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  auto ov = out.mutable_data();
  for (std::size_t p = 0; p < n; ++p) {
    double mu = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) mu += xv[ch * n + p];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double d = xv[ch * n + p] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[p] = is;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double h = (xv[ch * n + p] - mu) * is;
      xhat[ch * n + p] = h;
      ov[ch * n + p] = gv[ch] * h + bv[ch];
    }
  }
  Tape::active().record("layer_norm", {&x, &gamma, &beta}, out,
                        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), c, n](std::span<const double> g) {
    auto gv = gamma.data();
    if (gamma.requires_grad() || beta.requires_grad()) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double gg = 0.0, gb = 0.0;
        for (std::size_t p = 0; p < n; ++p) {
          gg += g[ch * n + p] * xhat[ch * n + p];
          gb += g[ch * n + p];
        }
        if (gamma.requires_grad()) gbuf(gamma)[ch] += gg;
        if (beta.requires_grad()) gbuf(beta)[ch] += gb;
      }
    }
    if (!x.requires_grad()) return;
    auto& gx = gbuf(x);
    const double inv_c = 1.0 / static_cast<double>(c);
    for (std::size_t p = 0; p < n; ++p) {
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double gh = g[ch * n + p] * gv[ch];
        m1 += gh;
        m2 += gh * xhat[ch * n + p];
      }
      m1 *= inv_c;
      m2 *= inv_c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double gh = g[ch * n + p] * gv[ch];
        gx[ch * n + p] += inv_std[p] * (gh - m1 - xhat[ch * n + p] * m2);
      }
    }
  });
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, std::vector<double>* batch_mean,
                  std::vector<double>* batch_var) {
  require_chw(x, "batch_norm");
  if (!(eps > 0.0)) throw ConfigError(fmt::format("batch_norm: eps must be > 0, got {}", eps));
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError(fmt::format("batch_norm: gamma {} / beta {} for {} channels", shape_str(gamma.shape()),
                                 shape_str(beta.shape()), c));
  }
  Tensor out = make_out(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(c);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  auto ov = out.mutable_data();
  if (batch_mean) batch_mean->assign(c, 0.0);
  if (batch_var) batch_var->assign(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* row = xv.data() + ch * n;
    double mu = 0.0;
    for (std::size_t p = 0; p < n; ++p) mu += row[p];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t p = 0; p < n; ++p) var += (row[p] - mu) * (row[p] - mu);
    var /= static_cast<double>(n);
    if (batch_mean) (*batch_mean)[ch] = mu;
    if (batch_var) (*batch_var)[ch] = var;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[ch] = is;
    for (std::size_t p = 0; p < n; ++p) {
      const double h = (row[p] - mu) * is;
      xhat[ch * n + p] = h;
      ov[ch * n + p] = gv[ch] * h + bv[ch];
    }
  }
  Tape::active().record("batch_norm", {&x, &gamma, &beta}, out,
                        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), c, n](std::span<const double> g) {
    auto gv = gamma.data();
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double gg = 0.0, gb = 0.0;
      for (std::size_t p = 0; p < n; ++p) {
        gg += g[ch * n + p] * xhat[ch * n + p];
        gb += g[ch * n + p];
      }
      if (gamma.requires_grad()) gbuf(gamma)[ch] += gg;
      if (beta.requires_grad()) gbuf(beta)[ch] += gb;
      if (x.requires_grad()) {
        // dL/dxhat = g * gamma; its mean is gb * gamma, its xhat-weighted mean gg * gamma.
        auto& gx = gbuf(x);
        const double m1 = gb * gv[ch] * inv_n;
        const double m2 = gg * gv[ch] * inv_n;
        for (std::size_t p = 0; p < n; ++p) {
          gx[ch * n + p] += inv_std[ch] * (g[ch * n + p] * gv[ch] - m1 - xhat[ch * n + p] * m2);
        }
      }
    }
  });
  return out;
}

Tensor frozen_batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::span<const double> mean,
                         std::span<const double> var, double eps) {
  require_chw(x, "frozen_batch_norm");
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  if (gamma.numel() != c || beta.numel() != c || mean.size() != c || var.size() != c) {
    throw ShapeError(fmt::format("frozen_batch_norm: statistics do not match {} channels", c));
  }
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(c);
  Tensor out = make_out(x.shape());
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  auto ov = out.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
    for (std::size_t p = 0; p < n; ++p) {
      const double h = (xv[ch * n + p] - mean[ch]) * inv_std[ch];
      xhat[ch * n + p] = h;
      ov[ch * n + p] = gv[ch] * h + bv[ch];
    }
  }
  Tape::active().record("frozen_batch_norm", {&x, &gamma, &beta}, out,
                        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), c, n](std::span<const double> g) {
    auto gv = gamma.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double gg = 0.0, gb = 0.0;
      for (std::size_t p = 0; p < n; ++p) {
        gg += g[ch * n + p] * xhat[ch * n + p];
        gb += g[ch * n + p];
      }
      if (gamma.requires_grad()) gbuf(gamma)[ch] += gg;
      if (beta.requires_grad()) gbuf(beta)[ch] += gb;
      if (x.requires_grad()) {
        auto& gx = gbuf(x);
        const double k = gv[ch] * inv_std[ch];
        for (std::size_t p = 0; p < n; ++p) gx[ch * n + p] += k * g[ch * n + p];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct Tap {
  std::size_t i0, i1;
  double frac;  // weight of i1
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, src - static_cast<double>(i0)};
    if (i1 == i0) taps[d].frac = 0.0;
  }
  return taps;
}

std::vector<std::size_t> nearest_taps(std::size_t in, std::size_t out) {
  std::vector<std::size_t> taps(out);
  for (std::size_t d = 0; d < out; ++d) taps[d] = std::min(d * in / out, in - 1);
  return taps;
}

}  // namespace

Tensor resample(const Tensor& x, std::size_t out_h, std::size_t out_w, ResampleMode mode) {
  require_chw(x, "resample");
  if (out_h == 0 || out_w == 0) throw ConfigError(fmt::format("resample: target size {}x{} must be >= 1", out_h, out_w));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) return reshape(x, x.shape());

  Tensor out = make_out({c, out_h, out_w});
  auto xv = x.data();
  auto ov = out.mutable_data();
  if (mode == ResampleMode::nearest) {
    auto ty = nearest_taps(h, out_h);
    auto tx = nearest_taps(w, out_w);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox)
          ov[(ch * out_h + oy) * out_w + ox] = xv[(ch * h + ty[oy]) * w + tx[ox]];
    Tape::active().record("resample_nearest", {&x}, out, [x, ty, tx, c, h, w](std::span<const double> g) {
      auto& gx = gbuf(x);
      const std::size_t oh = ty.size(), ow = tx.size();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) gx[(ch * h + ty[oy]) * w + tx[ox]] += g[(ch * oh + oy) * ow + ox];
    });
    return out;
  }

  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = xv.data() + ch * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const double top = (1.0 - b.frac) * plane[a.i0 * w + b.i0] + b.frac * plane[a.i0 * w + b.i1];
        const double bot = (1.0 - b.frac) * plane[a.i1 * w + b.i0] + b.frac * plane[a.i1 * w + b.i1];
        ov[(ch * out_h + oy) * out_w + ox] = (1.0 - a.frac) * top + a.frac * bot;
      }
    }
  }
  Tape::active().record("resample_bilinear", {&x}, out, [x, ty, tx, c, h, w](std::span<const double> g) {
    auto& gx = gbuf(x);
    const std::size_t oh = ty.size(), ow = tx.size();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* plane = gx.data() + ch * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const auto& a = ty[oy];
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const auto& b = tx[ox];
          const double gv = g[(ch * oh + oy) * ow + ox];
          plane[a.i0 * w + b.i0] += gv * (1.0 - a.frac) * (1.0 - b.frac);
          plane[a.i0 * w + b.i1] += gv * (1.0 - a.frac) * b.frac;
          plane[a.i1 * w + b.i0] += gv * a.frac * (1.0 - b.frac);
          plane[a.i1 * w + b.i1] += gv * a.frac * b.frac;
        }
      }
    }
  });
  return out;
}

}  // namespace polyseg
