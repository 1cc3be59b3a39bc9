#include "polyseg/dbfeb.hpp"

#include <fmt/format.h>

#include "polyseg/errors.hpp"
#include "polyseg/ops.hpp"

namespace polyseg::dbfeb {

DbfebParams::DbfebParams(Initializer& init, std::size_t c, DbfebConfig cfg) : channels(c), config(cfg) {
  if (c < 1) throw ConfigError("dbfeb: channels must be >= 1");
  const std::size_t hidden = cfg.hidden == 0 ? c : cfg.hidden;
  config.hidden = hidden;
  conv_b = Conv2d(init, c, c, 1);
  conv_c = Conv2d(init, c, c, 1);
  conv_d = Conv2d(init, c, c, 1);
  spath = graph::SpathParams(init, c, hidden, cfg.heads);
  struct_out = init.uniform({c, hidden}, hidden);
  fuse = Conv2d(init, 2 * c, c, 1);
  fuse_norm = BatchNorm(c, cfg.bn_eps, cfg.bn_momentum);
}

void DbfebParams::collect(ParamRegistry& reg, const std::string& prefix) {
  conv_b.collect(reg, prefix + ".spatial.conv_b");
  conv_c.collect(reg, prefix + ".spatial.conv_c");
  conv_d.collect(reg, prefix + ".spatial.conv_d");
  spath.collect(reg, prefix + ".structural.spath");
  reg.add(prefix + ".structural.out_proj", struct_out);
  fuse.collect(reg, prefix + ".fuse.conv");
  fuse_norm.collect(reg, prefix + ".fuse.bn");
}

namespace {

void check_input(const Tensor& a, const DbfebParams& p, const char* who) {
  if (a.ndim() != 3 || a.dim(0) != p.channels) {
    throw ShapeError(fmt::format("{}: input {} but block has {} channels", who, shape_str(a.shape()), p.channels));
  }
  if (a.dim(1) * a.dim(2) == 0) throw ShapeError(fmt::format("{}: empty spatial extent", who));
}

}  // namespace

SpatialResult spatial_branch_detailed(const Tensor& a, const DbfebParams& p) {
  check_input(a, p, "spatial_branch");
  const std::size_t c = a.dim(0), n = a.dim(1) * a.dim(2);
  Tensor b = reshape(p.conv_b(a), {c, n});
  Tensor cm = reshape(p.conv_c(a), {c, n});
  Tensor d = reshape(p.conv_d(a), {c, n});
  Tensor logits = matmul(transpose(b), cm);  // (i, j) = B_i . C_j
  Tensor attn = softmax(logits, 0);          // normalized over i
  Tensor o = matmul(d, attn);                // O_j = sum_i D_i S[i, j]
  Tensor out = relu(add(reshape(o, a.shape()), a));
  return {attn, out};
}

StructuralResult structural_branch_detailed(const Tensor& a, const DbfebParams& p, std::size_t k_heads,
                                            std::size_t max_hops) {
  check_input(a, p, "structural_branch");
  if (k_heads != p.spath.heads()) {
    throw ConfigError(fmt::format("structural_branch: K={} but parameters hold {} heads", k_heads, p.spath.heads()));
  }
  const std::size_t c = a.dim(0), n = a.dim(1) * a.dim(2);
  const std::size_t hidden = p.spath.hidden();

  const auto g = graph::build_grid_graph(a, p.config.connectivity, p.config.edge_cost);
  Tensor nodes = transpose(reshape(a, {c, n}));  // N x C

  StructuralResult result;
  std::vector<Tensor> rows;
  rows.reserve(n);
  bool any_targets = false;
  for (std::size_t i = 0; i < n; ++i) {
    auto ps = graph::dijkstra(g, i, max_hops);
    if (ps.entries.empty()) {
      rows.push_back(Tensor::zeros({1, hidden}));
      result.weights.emplace_back();
    } else {
      any_targets = true;
      Tensor paths = matmul(graph::path_mean_matrix(g, ps), nodes);  // T x C
      Tensor center = slice(nodes, 0, i, 1);
      auto att = graph::spath_attention(center, paths, p.spath);
      rows.push_back(reshape(att.output, {1, hidden}));
      result.weights.push_back(att.weights);
    }
    result.paths.push_back(std::move(ps));
  }
  if (!any_targets) {
    result.output = reshape(a, a.shape());
    return result;
  }
  Tensor node_out = concat(rows, 0);                       // N x D
  Tensor mapped = matmul(p.struct_out, transpose(node_out));  // C x N
  result.output = add(a, reshape(mapped, a.shape()));
  return result;
}

std::vector<Tensor> dbfeb_forward(std::span<const Tensor> batch, DbfebParams& p, bool training) {
  std::vector<Tensor> fused;
  fused.reserve(batch.size());
  for (const auto& a : batch) {
    Tensor sp = spatial_branch(a, p);
    Tensor st = structural_branch(a, p, p.spath.heads(), p.config.max_hops);
    std::vector<Tensor> parts{sp, st};
    fused.push_back(p.fuse(concat(parts, 0)));
  }
  return p.fuse_norm(fused, training);
}

Tensor dbfeb_forward(const Tensor& a, DbfebParams& p, bool training) {
  std::vector<Tensor> one{a};
  return dbfeb_forward(one, p, training).front();
}

}  // namespace polyseg::dbfeb
