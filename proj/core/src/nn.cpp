#include "polyseg/nn.hpp"

#include <fmt/format.h>

#include <cmath>

#include "polyseg/errors.hpp"

namespace polyseg {

void ParamRegistry::add(std::string name, Tensor& t, ParamKind kind) {
  if (find(name)) throw ConfigError(fmt::format("duplicate parameter name '{}'", name));
  if (kind == ParamKind::trainable) t.set_requires_grad(true);
  entries_.push_back({std::move(name), &t, kind});
}

std::vector<NamedParam> ParamRegistry::trainable() const {
  std::vector<NamedParam> out;
  for (const auto& e : entries_)
    if (e.kind == ParamKind::trainable) out.push_back(e);
  return out;
}

std::size_t ParamRegistry::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.kind == ParamKind::trainable) n += e.tensor->numel();
  return n;
}

const NamedParam* ParamRegistry::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

Tensor Initializer::uniform(Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  return uniform_range(std::move(shape), -bound, bound);
}

Tensor Initializer::uniform_range(Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng_);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Initializer::constant(Shape shape, double value) { return Tensor(std::move(shape), value); }

Conv2d::Conv2d(Initializer& init, std::size_t in, std::size_t out, std::size_t k, Conv2dOptions opt, bool with_bias)
    : options(opt) {
  if (opt.groups == 0 || in % opt.groups != 0) {
    throw ConfigError(fmt::format("Conv2d: {} input channels not divisible by {} groups", in, opt.groups));
  }
  const std::size_t fan_in = in / opt.groups * k * k;
  weight = init.uniform({out, in / opt.groups, k, k}, fan_in);
  if (with_bias) bias = init.uniform({out}, fan_in);
}

void Conv2d::collect(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".weight", weight);
  if (bias.defined()) reg.add(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::size_t channels, double eps_)
    : gamma(Tensor::ones({channels})), beta(Tensor::zeros({channels})), eps(eps_) {}

void LayerNorm::collect(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".gamma", gamma);
  reg.add(prefix + ".beta", beta);
}

BatchNorm::BatchNorm(std::size_t channels, double eps_, double momentum_)
    : gamma(Tensor::ones({channels})),
      beta(Tensor::zeros({channels})),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::ones({channels})),
      eps(eps_),
      momentum(momentum_) {}

std::vector<Tensor> BatchNorm::operator()(std::span<const Tensor> batch, bool training) {
  if (batch.empty()) return {};
  const std::size_t c = gamma.numel();
  for (const auto& x : batch) {
    if (x.ndim() != 3 || x.dim(0) != c) {
      throw ShapeError(fmt::format("BatchNorm: expected {} channels, got {}", c, shape_str(x.shape())));
    }
  }
  std::vector<Tensor> out;
  out.reserve(batch.size());
  if (!training) {
    for (const auto& x : batch) {
      out.push_back(frozen_batch_norm(x, gamma, beta, running_mean.data(), running_var.data(), eps));
    }
    return out;
  }

  // Stack the batch along width so one batch_norm call sees every sample.
  std::vector<double> mean_b, var_b;
  Tensor stacked = batch.size() == 1 ? batch[0] : concat(batch, 2);
  Tensor normed = batch_norm(stacked, gamma, beta, eps, &mean_b, &var_b);
  const std::size_t count = stacked.dim(1) * stacked.dim(2);
  auto rm = running_mean.mutable_data();
  auto rv = running_var.mutable_data();
  const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mean_b[ch];
    rv[ch] = (1.0 - momentum) * rv[ch] + momentum * var_b[ch] * unbias;
  }
  if (batch.size() == 1) {
    out.push_back(normed);
    return out;
  }
  std::size_t offset = 0;
  for (const auto& x : batch) {
    out.push_back(slice(normed, 2, offset, x.dim(2)));
    offset += x.dim(2);
  }
  return out;
}

void BatchNorm::collect(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".gamma", gamma);
  reg.add(prefix + ".beta", beta);
  reg.add(prefix + ".running_mean", running_mean, ParamKind::buffer);
  reg.add(prefix + ".running_var", running_var, ParamKind::buffer);
}

}  // namespace polyseg
