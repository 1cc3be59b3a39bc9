#include <benchmark/benchmark.h>

#include "polyseg/graph.hpp"
#include "polyseg/harness/model.hpp"
#include "polyseg/lfsa.hpp"
#include "polyseg/nn.hpp"
#include "polyseg/ops.hpp"

using namespace polyseg;

static void BM_Conv2d3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  Initializer init(1);
  Tensor x = init.uniform_range({c, s, s}, -1, 1), w = init.uniform_range({c, c, 3, 3}, -1, 1);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, {}, {1, 1, 1}));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(c * c * s * s * 9));
}
BENCHMARK(BM_Conv2d3x3)->Args({8, 32})->Args({16, 32})->Args({32, 16});

static void BM_Conv2dDepthwise7x7(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Initializer init(2);
  Tensor x = init.uniform_range({c, 16, 16}, -1, 1), w = init.uniform_range({c, 1, 7, 7}, -1, 1);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, {}, {1, 3, c}));
}
BENCHMARK(BM_Conv2dDepthwise7x7)->Arg(16)->Arg(64);

static void BM_DijkstraHopBall(benchmark::State& state) {
  const auto s = static_cast<std::size_t>(state.range(0));
  const auto hops = static_cast<std::size_t>(state.range(1));
  Initializer init(3);
  Tensor x = init.uniform_range({4, s, s}, -1, 1);
  const auto g = graph::build_grid_graph(x, graph::Connectivity::four, graph::EdgeCost::feature_l2);
  std::size_t src = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(graph::dijkstra(g, src, hops));
    src = (src + 1) % g.num_nodes();
  }
}
BENCHMARK(BM_DijkstraHopBall)->Args({8, 3})->Args({16, 3})->Args({16, 6});

static void BM_WindowAttention(benchmark::State& state) {
  const auto s = static_cast<std::size_t>(state.range(0));
  const auto r = static_cast<std::size_t>(state.range(1));
  Initializer init(4);
  lfsa::LfsaParams p(init, 16, 16, 16, {r, 1e-4});
  Tensor x = init.uniform_range({16, s, s}, -1, 1);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(lfsa::lfsa_attend(x, x, p));
}
BENCHMARK(BM_WindowAttention)->Args({8, 1})->Args({16, 1})->Args({16, 3});

static void BM_ModelForward(benchmark::State& state) {
  const auto size = static_cast<std::size_t>(state.range(0));
  harness::ModelSpec spec;
  harness::Model model(spec, 1);
  Tensor image = Initializer(5).uniform_range({3, size, size}, 0, 1);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(image, false));
}
BENCHMARK(BM_ModelForward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_ModelTrainStep(benchmark::State& state) {
  harness::ModelSpec spec;
  harness::Model model(spec, 1);
  Tensor image = Initializer(6).uniform_range({3, 64, 64}, 0, 1);
  for (auto _ : state) {
    auto out = model.forward(image, true);
    backward(sum(out.fused));
  }
}
BENCHMARK(BM_ModelTrainStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
