#pragma once

#include <span>
#include <string>
#include <vector>

#include "polyseg/graph.hpp"
#include "polyseg/nn.hpp"
#include "polyseg/tensor.hpp"

namespace polyseg::dbfeb {

struct DbfebConfig {
  std::size_t heads = 4;
  std::size_t max_hops = 3;
  graph::Connectivity connectivity = graph::Connectivity::four;
  graph::EdgeCost edge_cost = graph::EdgeCost::feature_l2;
  std::size_t hidden = 0;  // structural attention width; 0 means "same as C"
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
};

/// Parameters of the dual-graph feature enhancement block for C channels.
struct DbfebParams {
  std::size_t channels = 0;
  DbfebConfig config;
  // spatial graph
  Conv2d conv_b;
  Conv2d conv_c;
  Conv2d conv_d;
  // structural graph
  graph::SpathParams spath;
  Tensor struct_out;  // [C x D], maps node outputs back to C channels
  // fusion f: 1x1 conv 2C -> C, then batch norm
  Conv2d fuse;
  BatchNorm fuse_norm;

  DbfebParams() = default;
  DbfebParams(Initializer& init, std::size_t channels, DbfebConfig config = {});
  void collect(ParamRegistry& reg, const std::string& prefix);
};

struct SpatialResult {
  Tensor attention;  // N x N, entry (i, j) is the weight of pixel i on pixel j
  Tensor output;     // C x H x W
};

/// S = softmax over i of (B_i . C_j); O_j = sum_i D_i S[i, j];
/// output = ReLU(reshape(O) + A).
SpatialResult spatial_branch_detailed(const Tensor& a, const DbfebParams& p);
inline Tensor spatial_branch(const Tensor& a, const DbfebParams& p) { return spatial_branch_detailed(a, p).output; }

struct StructuralResult {
  Tensor output;                         // C x H x W
  std::vector<graph::PathSet> paths;     // per node
  std::vector<Tensor> weights;           // per node, head-averaged attention over its targets
};

/// Grid graph over the map, shortest paths to every node within max_hops,
/// shortest-path attention per node, projection back to C channels, residual
/// add with a. Nodes without targets contribute nothing.
StructuralResult structural_branch_detailed(const Tensor& a, const DbfebParams& p, std::size_t k_heads,
                                            std::size_t max_hops);
inline Tensor structural_branch(const Tensor& a, const DbfebParams& p, std::size_t k_heads, std::size_t max_hops) {
  return structural_branch_detailed(a, p, k_heads, max_hops).output;
}

/// Y = BN(conv1x1(concat(spatial(A), structural(A)))) for every sample; the
/// batch norm sees the whole batch in training mode.
std::vector<Tensor> dbfeb_forward(std::span<const Tensor> batch, DbfebParams& p, bool training);
Tensor dbfeb_forward(const Tensor& a, DbfebParams& p, bool training);

}  // namespace polyseg::dbfeb
