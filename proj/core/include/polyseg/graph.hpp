#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "polyseg/nn.hpp"
#include "polyseg/tensor.hpp"

namespace polyseg::graph {

enum class Connectivity { four = 4, eight = 8 };
enum class EdgeCost { feature_l2, uniform };

struct Edge {
  std::size_t to;
  double cost;
};

/// Undirected weighted graph whose nodes are the spatial locations of a
/// C x H x W feature map (node id = row * W + col).
struct GridGraph {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::vector<Edge>> adjacency;
  /// node_features[id * channels + c]
  std::vector<double> node_features;

  std::size_t num_nodes() const { return adjacency.size(); }
  std::pair<std::size_t, std::size_t> coords(std::size_t id) const { return {id / width, id % width}; }
  std::size_t num_edges() const;  // undirected
  std::span<const double> features(std::size_t id) const {
    return {node_features.data() + id * channels, channels};
  }
  /// Throws ConfigError if costs are negative/non-finite, ids out of range or
  /// adjacency asymmetric.
  void validate() const;
};

/// Builds a graph over an arbitrary node set; used for non-grid tests.
GridGraph make_graph(std::size_t num_nodes, std::span<const std::tuple<std::size_t, std::size_t, double>> edges,
                     std::size_t channels = 0, std::vector<double> features = {});

GridGraph build_grid_graph(const Tensor& x, Connectivity connectivity, EdgeCost cost);

struct PathEntry {
  std::size_t target;
  std::size_t hops;  // breadth-first hop distance from the center
  std::vector<std::size_t> nodes;  // center ... target
  double cost;
};

struct PathSet {
  std::size_t center = 0;
  std::vector<PathEntry> entries;  // ascending target id
};

/// Shortest weighted paths from `source` to every node within `max_hops`
/// breadth-first hops. Search is confined to that hop ball; equal-cost
/// predecessors resolve to the smaller node id.
PathSet dijkstra(const GridGraph& g, std::size_t source, std::size_t max_hops);

/// Averaging matrix [entries x num_nodes]: row e holds 1/len on each node of
/// path e, so (matrix * node_features) gives mean path features.
Tensor path_mean_matrix(const GridGraph& g, const PathSet& p);

/// Mean of node features along each stored path (endpoints included); one
/// row per entry.
std::vector<std::vector<double>> path_features(const GridGraph& g, const PathSet& p);

/// Learned transforms of the shortest-path attention: one projection and one
/// split attention vector per head, plus a shared value projection.
struct SpathParams {
  std::vector<Tensor> head_proj;     // K x [D x C]
  std::vector<Tensor> att_center;    // K x [D]
  std::vector<Tensor> att_path;      // K x [D]
  Tensor value_proj;                 // [D x C]
  double negative_slope = 0.2;

  SpathParams() = default;
  SpathParams(Initializer& init, std::size_t in_channels, std::size_t hidden, std::size_t heads);
  std::size_t heads() const { return head_proj.size(); }
  std::size_t in_channels() const { return value_proj.dim(1); }
  std::size_t hidden() const { return value_proj.dim(0); }
  void collect(ParamRegistry& reg, const std::string& prefix);
};

struct SpathResult {
  std::vector<Tensor> head_alpha;  // K x [T], per-head softmax over targets
  Tensor weights;                  // [T], head mean of alpha
  Tensor output;                   // [D]
};

/// Attention of one center over its T path features:
///   alpha_k = softmax_j(leaky_relu(a_c,k . W_k h + a_p,k . W_k p_j))
///   weights = mean_k alpha_k
///   output  = sum_j weights_j * (W_v p_j)
/// center is [C] (or [1 x C]); paths is [T x C] with T >= 1.
SpathResult spath_attention(const Tensor& center, const Tensor& paths, const SpathParams& params);

/// Plain-text listing, one edge ("edge u v cost") or path
/// ("path center target hops cost n0 n1 ...") per line.
void dump_graph(std::ostream& os, const GridGraph& g);
void dump_paths(std::ostream& os, const PathSet& p);

}  // namespace polyseg::graph
