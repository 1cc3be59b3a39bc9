#include "polyseg/harness/gradsuite.hpp"

#include <random>

#include "polyseg/dbfeb.hpp"
#include "polyseg/fusion.hpp"
#include "polyseg/harness/data.hpp"
#include "polyseg/harness/model.hpp"
#include "polyseg/lfsa.hpp"
#include "polyseg/loss.hpp"
#include "polyseg/ops.hpp"

namespace polyseg::harness {

namespace {

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}
  Tensor uniform(Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = d(rng_);
    return t;
  }
  Tensor binary(Shape shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = (rng_() & 1u) ? 1.0 : 0.0;
    return t;
  }
  Tensor param(Shape shape, double lo = -1.0, double hi = 1.0) { return uniform(std::move(shape), lo, hi).set_requires_grad(); }

 private:
  std::mt19937_64 rng_;
};

// Random linear functional so every output element matters.
Tensor probe(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

std::size_t largest(const std::vector<GradCheckInput>& in) {
  std::size_t m = 0;
  for (const auto& i : in) m = std::max(m, i.tensor.numel());
  return m;
}

}  // namespace

std::vector<GradSuiteResult> run_gradient_suite(std::uint64_t seed, bool include_model) {
  std::vector<GradSuiteResult> results;
  Gen g(seed);
  GradCheckOptions opt;
  opt.seed = seed;

  auto run = [&](const std::string& name, const std::function<Tensor()>& f, const std::vector<GradCheckInput>& in,
                 const GradCheckOptions& o) { results.push_back({name, grad_check(f, in, o), largest(in)}); };

  {
    Tensor x = g.param({2, 6, 6}), w = g.param({3, 2, 3, 3}), b = g.param({3}), r = g.uniform({3, 6, 6});
    run("conv2d", [=] { return probe(conv2d(x, w, b, {.stride = 1, .pad = 1}), r); },
        {{"x", x}, {"w", w}, {"b", b}}, opt);
  }
  {
    Tensor x = g.param({4, 7, 7}), w = g.param({4, 2, 3, 3}), r = g.uniform({4, 4, 4});
    run("conv2d_strided_grouped", [=] { return probe(conv2d(x, w, {}, {.stride = 2, .pad = 1, .groups = 2}), r); },
        {{"x", x}, {"w", w}}, opt);
  }
  {
    Tensor x = g.param({4, 3, 3}), gamma = g.param({4}, 0.5, 1.5), beta = g.param({4}), r = g.uniform({4, 3, 3});
    run("layer_norm", [=] { return probe(layer_norm(x, gamma, beta, 1e-6), r); },
        {{"x", x}, {"gamma", gamma}, {"beta", beta}}, opt);
  }
  {
    Tensor x = g.param({5, 4}), r0 = g.uniform({5, 4}), r1 = g.uniform({5, 4});
    run("softmax", [=] { return add(probe(softmax(x, 0), r0), probe(softmax(x, 1), r1)); }, {{"x", x}}, opt);
  }
  {
    Initializer init(seed + 1);
    auto p = std::make_shared<dbfeb::DbfebParams>(init, 4);
    ParamRegistry reg;
    p->collect(reg, "dbfeb");
    Tensor a = g.param({4, 3, 3}), r = g.uniform({4, 3, 3});
    run("spatial_branch", [=] { return probe(dbfeb::spatial_branch(a, *p), r); },
        {{"a", a}, {"conv_b.w", p->conv_b.weight}, {"conv_c.w", p->conv_c.weight}, {"conv_d.w", p->conv_d.weight},
         {"conv_d.b", p->conv_d.bias}},
        opt);
  }
  {
    Initializer init(seed + 2);
    dbfeb::DbfebConfig cfg;
    cfg.heads = 2;
    auto p = std::make_shared<dbfeb::DbfebParams>(init, 3, cfg);
    ParamRegistry reg;
    p->collect(reg, "dbfeb");
    Tensor a = g.param({3, 3, 3}), r = g.uniform({3, 3, 3});
    run("structural_branch", [=] { return probe(dbfeb::structural_branch(a, *p, 2, 3), r); },
        {{"a", a},
         {"head_proj0", p->spath.head_proj[0]},
         {"att_center1", p->spath.att_center[1]},
         {"att_path0", p->spath.att_path[0]},
         {"value_proj", p->spath.value_proj},
         {"out_proj", p->struct_out}},
        opt);
  }
  {
    Initializer init(seed + 3);
    auto p = std::make_shared<dbfeb::DbfebParams>(init, 3);
    ParamRegistry reg;
    p->collect(reg, "dbfeb");
    Tensor a0 = g.param({3, 2, 2}), a1 = g.param({3, 2, 2}), r0 = g.uniform({3, 2, 2}), r1 = g.uniform({3, 2, 2});
    run("dbfeb_block",
        [=] {
          std::vector<Tensor> batch{a0, a1};
          auto y = dbfeb::dbfeb_forward(batch, *p, true);
          return add(probe(y[0], r0), probe(y[1], r1));
        },
        {{"a0", a0}, {"a1", a1}, {"fuse.w", p->fuse.weight}, {"bn.gamma", p->fuse_norm.gamma}}, opt);
  }
  {
    Initializer init(seed + 4);
    auto p = std::make_shared<lfsa::LfsaParams>(init, 4, 3, 4, lfsa::LfsaConfig{.radius = 2, .eps = 1e-4});
    p->omega1.mutable_data()[0] = 0.7;
    p->omega2.mutable_data()[0] = 1.3;
    ParamRegistry reg;
    p->collect(reg, "lfsa");
    Tensor q = g.param({4, 4, 4}), kv = g.param({3, 2, 2}), r = g.uniform({4, 4, 4});
    run("lfsa_attend", [=] { return probe(lfsa::lfsa_attend(q, kv, *p), r); },
        {{"q_src", q},
         {"kv_src", kv},
         {"w_q", p->w_q},
         {"w_k", p->w_k},
         {"w_v", p->w_v},
         {"rel_pos", p->rel_pos},
         {"omega1", p->omega1},
         {"omega2", p->omega2}},
        opt);
  }
  {
    Tensor i1 = g.param({2, 3, 3}), i2 = g.param({2, 3, 3}), i3 = g.param({2, 3, 3}), r = g.uniform({2, 3, 3});
    Tensor w6 = g.param({6}, 0.2, 2.0), w3 = g.param({3}, -1.0, 1.0);
    std::vector<GradCheckInput> base{{"i1", i1}, {"i2", i2}, {"i3", i3}};
    auto with = [&](const char* n, const Tensor& w) {
      auto v = base;
      v.push_back({n, w});
      return v;
    };
    run("fnf", [=] { return probe(fusion::fnf(i1, i2, i3, w6), r); }, with("w", w6), opt);
    run("uf",
        [=] {
          std::vector<Tensor> in{i1, i2, i3};
          return probe(fusion::uf(in, w3), r);
        },
        with("w", w3), opt);
    run("sf",
        [=] {
          std::vector<Tensor> in{i1, i2, i3};
          return probe(fusion::sf(in, w3), r);
        },
        with("w", w3), opt);
  }
  {
    Tensor logits = g.param({1, 6, 6}, -3.0, 3.0), y = g.binary({1, 6, 6});
    run("bce_dice", [=] { return loss::bce_dice(sigmoid(logits), y, 0.5); }, {{"logits", logits}}, opt);
    std::vector<Tensor> side;
    for (int i = 0; i < 4; ++i) side.push_back(g.param({1, 6, 6}, -3.0, 3.0));
    run("total_loss",
        [=] {
          std::vector<Tensor> probs;
          for (const auto& s : side) probs.push_back(sigmoid(s));
          return loss::total_loss(probs, sigmoid(logits), y);
        },
        {{"fused_logits", logits}, {"side1_logits", side[0]}, {"side4_logits", side[3]}}, opt);
  }

  if (include_model) {
    ModelSpec spec;
    auto model = std::make_shared<Model>(spec, seed + 5);
    const auto data = gen_synthetic(2, 64, seed + 6, SyntheticParams{});
    std::vector<Tensor> images{data[0].image, data[1].image};
    std::vector<Tensor> masks{data[0].mask, data[1].mask};
    auto f = [=] {
      auto outs = model->forward(images, true);
      Tensor total = loss::total_loss(outs[0].stages, outs[0].fused, masks[0]);
      return add(total, loss::total_loss(outs[1].stages, outs[1].fused, masks[1]));
    };
    std::vector<GradCheckInput> in;
    for (const char* name : {"encoder.stem.bias", "encoder.stage4.block0.norm.gamma", "dbfeb.spatial.conv_b.bias",
                             "dbfeb.structural.spath.head0.att_path", "dbfeb.fuse.bn.gamma", "decoder.d2.norm.gamma",
                             "lfsa.pair1.omega2", "lfsa.pair3.omega1", "lfsa.pair3.w_q", "fusion.weights", "head.out.bias",
                             "head.refine1.bias", "head.side1.bias"}) {
      const NamedParam* p = model->params().find(name);
      if (p && p->tensor->numel() <= 512) in.push_back({name, *p->tensor});
    }
    // Many ReLU units sit downstream of every parameter here; a smaller step
    // keeps the central difference from straddling their kinks.
    GradCheckOptions mo = opt;
    mo.h = 1e-6;
    mo.max_coords = 6;
    run("desk_model", f, in, mo);
  }
  return results;
}

}  // namespace polyseg::harness
