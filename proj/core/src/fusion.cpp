#include "polyseg/fusion.hpp"

#include <fmt/format.h>

#include "polyseg/errors.hpp"
#include "polyseg/ops.hpp"

namespace polyseg::fusion {

std::string_view method_name(Method m) {
  switch (m) {
    case Method::fnf: return "fnf";
    case Method::uf: return "uf";
    case Method::sf: return "sf";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  if (s == "fnf") return Method::fnf;
  if (s == "uf") return Method::uf;
  if (s == "sf") return Method::sf;
  throw ConfigError(fmt::format("fusion method must be one of fnf, uf, sf; got '{}'", s));
}

namespace {

Tensor weighted_sum(std::span<const Tensor> inputs, const Tensor& coeffs) {
  Tensor out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor term = mul(slice(coeffs, 0, i, 1), inputs[i]);
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

void check_inputs(std::span<const Tensor> inputs, const Tensor& w, const char* who) {
  if (inputs.empty()) throw ShapeError(fmt::format("{}: no inputs", who));
  bool same = true;
  for (const auto& t : inputs) same = same && t.shape() == inputs[0].shape();
  if (!same) {
    std::vector<std::string> shapes;
    for (const auto& t : inputs) shapes.push_back(shape_str(t.shape()));
    throw ShapeError(fmt::format("{}: input shapes differ: {}", who, fmt::join(shapes, ", ")));
  }
  if (w.ndim() != 1 || w.numel() != inputs.size()) {
    throw ShapeError(fmt::format("{}: need {} weights, got {}", who, inputs.size(), shape_str(w.shape())));
  }
}

}  // namespace

Tensor fnf_coefficients(const Tensor& w, double eps) {
  if (w.ndim() != 1 || w.numel() != kFnfWeights) {
    throw ShapeError(fmt::format("fnf: need {} weights, got {}", kFnfWeights, shape_str(w.shape())));
  }
  if (!(eps > 0.0)) throw ConfigError("fnf: eps must be > 0");
  Tensor nonneg = relu(w);
  return div(nonneg, add_scalar(sum(nonneg), eps));
}

Tensor fnf(const Tensor& i1, const Tensor& i2, const Tensor& i3, const Tensor& w, double eps) {
  if (i1.shape() != i2.shape() || i1.shape() != i3.shape()) {
    throw ShapeError(fmt::format("fnf: input shapes differ: {}, {}, {}", shape_str(i1.shape()), shape_str(i2.shape()),
                                 shape_str(i3.shape())));
  }
  Tensor c = fnf_coefficients(w, eps);
  std::vector<Tensor> terms{i1,
                            i2,
                            i3,
                            mul_scalar(add(i1, i2), 0.5),
                            mul_scalar(add(i1, i3), 0.5),
                            mul_scalar(add(i2, i3), 0.5)};
  return weighted_sum(terms, c);
}

Tensor uf(std::span<const Tensor> inputs, const Tensor& w) {
  check_inputs(inputs, w, "uf");
  return weighted_sum(inputs, w);
}

Tensor sf(std::span<const Tensor> inputs, const Tensor& w) {
  check_inputs(inputs, w, "sf");
  return weighted_sum(inputs, softmax(w, 0));
}

FusionParams::FusionParams(Method m) : method(m), weights(Shape{m == Method::fnf ? kFnfWeights : 3}, 1.0) {}

Tensor FusionParams::operator()(const Tensor& i1, const Tensor& i2, const Tensor& i3) const {
  switch (method) {
    case Method::fnf: return fnf(i1, i2, i3, weights);
    case Method::uf: {
      std::vector<Tensor> in{i1, i2, i3};
      return uf(in, weights);
    }
    case Method::sf: {
      std::vector<Tensor> in{i1, i2, i3};
      return sf(in, weights);
    }
  }
  throw ConfigError("fusion: unknown method");
}

void FusionParams::collect(ParamRegistry& reg, const std::string& prefix) { reg.add(prefix + ".weights", weights); }

}  // namespace polyseg::fusion
