#include "polyseg/graph.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <ostream>
#include <queue>

#include "polyseg/errors.hpp"
#include "polyseg/ops.hpp"

namespace polyseg::graph {

std::size_t GridGraph::num_edges() const {
  std::size_t n = 0;
  for (const auto& adj : adjacency) n += adj.size();
  return n / 2;
}

void GridGraph::validate() const {
  const std::size_t n = num_nodes();
  if (node_features.size() != n * channels) throw ConfigError("graph: feature table size mismatch");
  for (std::size_t u = 0; u < n; ++u) {
    for (const auto& e : adjacency[u]) {
      if (e.to >= n) throw ConfigError(fmt::format("graph: edge {}->{} leaves the node range", u, e.to));
      if (!std::isfinite(e.cost) || e.cost < 0.0) {
        throw ConfigError(fmt::format("graph: edge {}->{} has invalid cost {}", u, e.to, e.cost));
      }
      const auto& back = adjacency[e.to];
      const bool symmetric = std::any_of(back.begin(), back.end(), [&](const Edge& b) { return b.to == u && b.cost == e.cost; });
      if (!symmetric) throw ConfigError(fmt::format("graph: edge {}->{} has no reverse twin", u, e.to));
    }
  }
}

GridGraph make_graph(std::size_t num_nodes, std::span<const std::tuple<std::size_t, std::size_t, double>> edges,
                     std::size_t channels, std::vector<double> features) {
  GridGraph g;
  g.height = 1;
  g.width = num_nodes;
  g.channels = channels;
  g.adjacency.resize(num_nodes);
  g.node_features = features.empty() ? std::vector<double>(num_nodes * channels, 0.0) : std::move(features);
  for (const auto& [u, v, c] : edges) {
    if (u >= num_nodes || v >= num_nodes || u == v) throw ConfigError(fmt::format("graph: bad edge {}-{}", u, v));
    g.adjacency[u].push_back({v, c});
    g.adjacency[v].push_back({u, c});
  }
  for (auto& adj : g.adjacency) std::sort(adj.begin(), adj.end(), [](const Edge& a, const Edge& b) { return a.to < b.to; });
  g.validate();
  return g;
}

GridGraph build_grid_graph(const Tensor& x, Connectivity connectivity, EdgeCost cost) {
  if (x.ndim() != 3) throw ShapeError(fmt::format("build_grid_graph: expected C x H x W, got {}", shape_str(x.shape())));
  GridGraph g;
  g.channels = x.dim(0);
  g.height = x.dim(1);
  g.width = x.dim(2);
  const std::size_t n = g.height * g.width;
  if (n == 0) throw ShapeError("build_grid_graph: empty map");
  g.adjacency.resize(n);
  g.node_features.resize(n * g.channels);
  auto xv = x.data();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < n; ++i) g.node_features[i * g.channels + c] = xv[c * n + i];

  auto edge_cost = [&](std::size_t a, std::size_t b) {
    if (cost == EdgeCost::uniform) return 1.0;
    double s = 0.0;
    for (std::size_t c = 0; c < g.channels; ++c) {
      const double d = g.node_features[a * g.channels + c] - g.node_features[b * g.channels + c];
      s += d * d;
    }
    return std::sqrt(s);
  };
  auto link = [&](std::size_t a, std::size_t b) {
    const double c = edge_cost(a, b);
    g.adjacency[a].push_back({b, c});
    g.adjacency[b].push_back({a, c});
  };
  for (std::size_t r = 0; r < g.height; ++r) {
    for (std::size_t c = 0; c < g.width; ++c) {
      const std::size_t id = r * g.width + c;
      if (c + 1 < g.width) link(id, id + 1);
      if (r + 1 < g.height) link(id, id + g.width);
      if (connectivity == Connectivity::eight && r + 1 < g.height) {
        if (c + 1 < g.width) link(id, id + g.width + 1);
        if (c > 0) link(id, id + g.width - 1);
      }
    }
  }
  for (auto& adj : g.adjacency) std::sort(adj.begin(), adj.end(), [](const Edge& a, const Edge& b) { return a.to < b.to; });
  return g;
}

namespace {

double edge_cost_between(const GridGraph& g, std::size_t u, std::size_t v) {
  for (const auto& e : g.adjacency[u])
    if (e.to == v) return e.cost;
  throw ConfigError(fmt::format("graph: no edge {}-{}", u, v));
}

}  // namespace

PathSet dijkstra(const GridGraph& g, std::size_t source, std::size_t max_hops) {
  const std::size_t n = g.num_nodes();
  if (source >= n) throw ConfigError(fmt::format("dijkstra: source {} >= {} nodes", source, n));
  if (max_hops < 1) throw ConfigError("dijkstra: max_hops must be >= 1");
  constexpr auto kNone = std::numeric_limits<std::size_t>::max();

  std::vector<std::size_t> hops(n, kNone);
  hops[source] = 0;
  std::deque<std::size_t> frontier{source};
  while (!frontier.empty()) {
    const std::size_t u = frontier.front();
    frontier.pop_front();
    if (hops[u] == max_hops) continue;
    for (const auto& e : g.adjacency[u]) {
      if (hops[e.to] == kNone) {
        hops[e.to] = hops[u] + 1;
        frontier.push_back(e.to);
      }
    }
  }

  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> pred(n, kNone);
  std::vector<bool> done(n, false);
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  dist[source] = 0.0;
  heap.push({0.0, source});
  while (!heap.empty()) {
    const auto [d, u] = heap.top();
    heap.pop();
    if (done[u]) continue;
    done[u] = true;
    for (const auto& e : g.adjacency[u]) {
      const std::size_t v = e.to;
      if (hops[v] == kNone || done[v]) continue;
      const double nd = d + e.cost;
      if (nd < dist[v]) {
        dist[v] = nd;
        pred[v] = u;
        heap.push({nd, v});
      } else if (nd == dist[v] && u < pred[v]) {
        pred[v] = u;
      }
    }
  }

  PathSet ps;
  ps.center = source;
  for (std::size_t v = 0; v < n; ++v) {
    if (v == source || hops[v] == kNone || !done[v]) continue;
    PathEntry entry;
    entry.target = v;
    entry.hops = hops[v];
    for (std::size_t cur = v; cur != kNone; cur = pred[cur]) entry.nodes.push_back(cur);
    std::reverse(entry.nodes.begin(), entry.nodes.end());
    entry.cost = 0.0;
    for (std::size_t i = 1; i < entry.nodes.size(); ++i) {
      entry.cost += edge_cost_between(g, entry.nodes[i - 1], entry.nodes[i]);
    }
    ps.entries.push_back(std::move(entry));
  }
  return ps;
}

Tensor path_mean_matrix(const GridGraph& g, const PathSet& p) {
  const std::size_t t = p.entries.size();
  std::vector<double> m(t * g.num_nodes(), 0.0);
  for (std::size_t e = 0; e < t; ++e) {
    const auto& nodes = p.entries[e].nodes;
    const double w = 1.0 / static_cast<double>(nodes.size());
    for (std::size_t id : nodes) m[e * g.num_nodes() + id] += w;
  }
  return Tensor({t, g.num_nodes()}, std::move(m));
}

std::vector<std::vector<double>> path_features(const GridGraph& g, const PathSet& p) {
  std::vector<std::vector<double>> out;
  out.reserve(p.entries.size());
  for (const auto& e : p.entries) {
    std::vector<double> f(g.channels, 0.0);
    for (std::size_t id : e.nodes) {
      auto nf = g.features(id);
      for (std::size_t c = 0; c < g.channels; ++c) f[c] += nf[c];
    }
    for (double& v : f) v /= static_cast<double>(e.nodes.size());
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------

SpathParams::SpathParams(Initializer& init, std::size_t in_channels, std::size_t hidden, std::size_t heads) {
  if (heads < 1) throw ConfigError("spath attention: K must be >= 1");
  for (std::size_t k = 0; k < heads; ++k) {
    head_proj.push_back(init.uniform({hidden, in_channels}, in_channels));
    att_center.push_back(init.uniform({hidden}, hidden));
    att_path.push_back(init.uniform({hidden}, hidden));
  }
  value_proj = init.uniform({hidden, in_channels}, in_channels);
}

void SpathParams::collect(ParamRegistry& reg, const std::string& prefix) {
  for (std::size_t k = 0; k < heads(); ++k) {
    reg.add(fmt::format("{}.head{}.proj", prefix, k), head_proj[k]);
    reg.add(fmt::format("{}.head{}.att_center", prefix, k), att_center[k]);
    reg.add(fmt::format("{}.head{}.att_path", prefix, k), att_path[k]);
  }
  reg.add(prefix + ".value_proj", value_proj);
}

SpathResult spath_attention(const Tensor& center, const Tensor& paths, const SpathParams& params) {
  const std::size_t k_heads = params.heads();
  if (k_heads < 1) throw ConfigError("spath_attention: K must be >= 1");
  if (params.att_center.size() != k_heads || params.att_path.size() != k_heads) {
    throw ConfigError("spath_attention: per-head parameter lists differ in length");
  }
  const std::size_t c = params.in_channels();
  const std::size_t d = params.hidden();
  if (center.numel() != c) {
    throw ConfigError(fmt::format("spath_attention: center has {} features, projections expect {}", center.numel(), c));
  }
  if (paths.ndim() != 2 || paths.dim(1) != c || paths.dim(0) == 0) {
    throw ConfigError(fmt::format("spath_attention: paths {} must be T x {} with T >= 1", shape_str(paths.shape()), c));
  }
  const std::size_t t = paths.dim(0);
  Tensor h = reshape(center, {c, 1});

  SpathResult result;
  Tensor acc;
  for (std::size_t k = 0; k < k_heads; ++k) {
    const Tensor& w = params.head_proj[k];
    if (w.ndim() != 2 || w.dim(0) != d || w.dim(1) != c) throw ConfigError("spath_attention: ragged head projections");
    Tensor hc = matmul(w, h);                                                   // D x 1
    Tensor score_c = matmul(reshape(params.att_center[k], {1, d}), hc);         // 1 x 1
    Tensor pp = matmul(paths, transpose(w));                                    // T x D
    Tensor score_p = matmul(pp, reshape(params.att_path[k], {d, 1}));           // T x 1
    Tensor e = leaky_relu(add(reshape(score_p, {t}), score_c), params.negative_slope);
    Tensor alpha = softmax(e, 0);
    result.head_alpha.push_back(alpha);
    acc = acc.defined() ? add(acc, alpha) : alpha;
  }
  result.weights = mul_scalar(acc, 1.0 / static_cast<double>(k_heads));
  Tensor values = matmul(paths, transpose(params.value_proj));  // T x D
  result.output = reshape(matmul(reshape(result.weights, {1, t}), values), {d});
  return result;
}

void dump_graph(std::ostream& os, const GridGraph& g) {
  os << fmt::format("graph nodes {} edges {} grid {}x{}\n", g.num_nodes(), g.num_edges(), g.height, g.width);
  for (std::size_t u = 0; u < g.num_nodes(); ++u)
    for (const auto& e : g.adjacency[u])
      if (u < e.to) os << fmt::format("edge {} {} {:.17g}\n", u, e.to, e.cost);
}

void dump_paths(std::ostream& os, const PathSet& p) {
  for (const auto& e : p.entries) {
    os << fmt::format("path {} {} {} {:.17g} {}\n", p.center, e.target, e.hops, e.cost, fmt::join(e.nodes, " "));
  }
}

}  // namespace polyseg::graph
