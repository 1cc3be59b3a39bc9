#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "polyseg/ops.hpp"
#include "polyseg/tensor.hpp"

namespace polyseg {

enum class ParamKind : std::uint8_t { trainable = 0, buffer = 1 };

struct NamedParam {
  std::string name;
  Tensor* tensor;
  ParamKind kind;
};

/// Flat, ordered view of a model's named tensors. Pointers refer to members
/// of the owning modules, which must outlive the registry.
class ParamRegistry {
 public:
  void add(std::string name, Tensor& t, ParamKind kind = ParamKind::trainable);
  const std::vector<NamedParam>& entries() const { return entries_; }
  std::vector<NamedParam> trainable() const;
  std::size_t trainable_count() const;  // scalar parameters
  const NamedParam* find(const std::string& name) const;

 private:
  std::vector<NamedParam> entries_;
};

/// Seeded parameter initializer. Weights are uniform in
/// [-1/sqrt(fan_in), 1/sqrt(fan_in)].
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor uniform(Shape shape, std::size_t fan_in);
  Tensor uniform_range(Shape shape, double lo, double hi);
  Tensor constant(Shape shape, double value);
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

/// Convolution with weight [C_out, C_in/groups, k, k] and optional bias.
struct Conv2d {
  Tensor weight;
  Tensor bias;
  Conv2dOptions options;

  Conv2d() = default;
  Conv2d(Initializer& init, std::size_t in, std::size_t out, std::size_t k, Conv2dOptions opt = {},
         bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, options); }
  void collect(ParamRegistry& reg, const std::string& prefix);
};

/// Channel-wise layer norm for C x H x W maps.
struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-6;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t channels, double eps = 1e-6);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
  void collect(ParamRegistry& reg, const std::string& prefix);
};

/// Batch norm over a batch of C x H x W maps. Training mode normalizes with
/// the statistics of the whole batch and updates running estimates; eval mode
/// applies the frozen running estimates.
struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels, double eps = 1e-5, double momentum = 0.1);
  std::vector<Tensor> operator()(std::span<const Tensor> batch, bool training);
  void collect(ParamRegistry& reg, const std::string& prefix);
};

}  // namespace polyseg
