#include <CLI11.hpp>
#include <fmt/format.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>

#include "polyseg/errors.hpp"
#include "polyseg/harness/data.hpp"
#include "polyseg/harness/gradsuite.hpp"
#include "polyseg/harness/spec.hpp"
#include "polyseg/harness/trainer.hpp"

namespace fs = std::filesystem;
using namespace polyseg;
using namespace polyseg::harness;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> size;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::string> fusion;
  std::optional<bool> convnext, dbfeb, lfsa;
  std::optional<std::string> out;

  void attach(CLI::App* app, bool model_flags) {
    app->add_option("--config", config, "INI experiment file");
    app->add_option("--seed", seed, "Random seed");
    app->add_option("--size", size, "Image side length in pixels");
    app->add_option("--out", out, "Output directory");
    if (!model_flags) return;
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--fusion", fusion, "Fusion method")->check(CLI::IsMember({"fnf", "uf", "sf"}));
    app->add_option("--toggle-convnext", convnext, "ConvNext blocks on/off");
    app->add_option("--toggle-dbfeb", dbfeb, "Dual-graph bottleneck on/off");
    app->add_option("--toggle-lfsa", lfsa, "Location-fused self-attention on/off");
  }

  ExperimentSpec resolve() const {
    ExperimentSpec s = config.empty() ? ExperimentSpec{} : load_spec(config);
    if (seed) s.seed = *seed;
    if (size) s.image_size = *size;
    if (epochs) s.epochs = *epochs;
    if (lr) s.optimizer.lr = *lr;
    if (fusion) s.model.fusion = fusion::parse_method(*fusion);
    if (convnext) s.model.toggles.convnext = *convnext;
    if (dbfeb) s.model.toggles.dbfeb = *dbfeb;
    if (lfsa) s.model.toggles.lfsa = *lfsa;
    if (out) s.out_dir = *out;
    s.validate();
    return s;
  }
};

int cmd_gen(const Overrides& o, std::size_t samples) {
  ExperimentSpec spec = o.resolve();
  spec.data.samples = samples;
  const auto data = gen_synthetic(samples, spec.image_size, spec.seed, spec.data.synthetic);
  fs::create_directories(spec.out_dir / "images");
  fs::create_directories(spec.out_dir / "masks");
  std::ofstream prov(spec.out_dir / "provenance.jsonl", std::ios::trunc);
  const std::size_t s = spec.image_size, n = s * s;
  for (const auto& sample : data) {
    Image8 rgb{s, s, 3, std::vector<std::uint8_t>(3 * n)};
    auto px = sample.image.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 3; ++c) rgb.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(px[c * n + i] * 255.0));
    write_png(spec.out_dir / "images" / (sample.id + ".png"), rgb);
    std::vector<std::uint8_t> m(n);
    for (std::size_t i = 0; i < n; ++i) m[i] = sample.mask[i] > 0.5;
    write_mask_png(spec.out_dir / "masks" / (sample.id + ".png"), m, s, s);
    nlohmann::ordered_json j;
    j["id"] = sample.id;
    j["seed"] = spec.seed;
    j["size"] = s;
    j["specular_spots"] = sample.specular_spots;
    j["noise"] = spec.data.synthetic.noise;
    j["blobs"] = nlohmann::json::array();
    for (const auto& b : sample.blobs) j["blobs"].push_back({{"cy", b.cy}, {"cx", b.cx}, {"ry", b.ry}, {"rx", b.rx}, {"theta", b.theta}});
    prov << j.dump() << "\n";
  }
  fmt::print("wrote {} samples to {}\n", data.size(), spec.out_dir.string());
  return kOk;
}

int cmd_train(const Overrides& o, bool quiet) {
  const ExperimentSpec spec = o.resolve();
  TrainOptions opts;
  if (!quiet) {
    opts.on_epoch = [](const EpochLog& e) {
      fmt::print("epoch {:4d}  loss {:.5f}  train_dice {:.4f}{}\n", e.epoch, e.train_loss, e.train_dice,
                 e.val_dice ? fmt::format("  val_dice {:.4f}", *e.val_dice) : std::string());
      std::fflush(stdout);
    };
  }
  const auto r = run_train(spec, opts);
  fmt::print("best epoch {} (dice {:.4f}); outputs in {}\n", r.best_epoch, r.best_dice, spec.out_dir.string());
  return kOk;
}

int cmd_eval(const Overrides& o, const std::string& checkpoint, const std::string& split) {
  const ExperimentSpec spec = o.resolve();
  const fs::path ckpt = checkpoint.empty() ? spec.out_dir / "checkpoint.bin" : fs::path(checkpoint);
  const auto r = run_eval(spec, ckpt, parse_eval_split(split), spec.out_dir);
  fmt::print("{} images  dice {:.4f}  iou {:.4f}  mae {:.4f}  boundary_f {:.4f}  s_measure {:.4f}\n", r.ids.size(),
             r.mean.dice, r.mean.iou, r.mean.mae, r.mean.boundary_f, r.mean.s_measure);
  return kOk;
}

int cmd_ablate(const Overrides& o) {
  const ExperimentSpec spec = o.resolve();
  const auto rows = run_ablation(spec, [](const AblationRow& r) {
    fmt::print("{:6} {:3}  convnext={} dbfeb={} lfsa={} fusion={}  loss {:.5f}  dice {:.4f}\n", r.group, r.label,
               int(r.toggles.convnext), int(r.toggles.dbfeb), int(r.toggles.lfsa), fusion::method_name(r.method),
               r.final_loss, r.metrics.dice);
    std::fflush(stdout);
  });
  write_ablation_csv(spec.out_dir / "ablation.csv", rows);
  fmt::print("wrote {}\n", (spec.out_dir / "ablation.csv").string());
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, bool skip_model) {
  const auto results = run_gradient_suite(seed, !skip_model);
  bool ok = true;
  for (const auto& r : results) {
    fmt::print("{:4} {:24} max_rel_err {:.3e}  (largest input {} elements)\n", r.report.passed() ? "ok" : "FAIL", r.name,
               r.report.max_rel_error, r.input_elements);
    if (!r.report.passed()) fmt::print("{}\n", r.report.summary());
    ok = ok && r.report.passed();
  }
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"polyseg: polyp segmentation building blocks, training and evaluation"};
  app.require_subcommand(1);

  Overrides gen_o, train_o, eval_o, ablate_o;
  std::size_t gen_samples = 8;
  auto* gen = app.add_subcommand("gen", "Write synthetic image/mask PNG pairs");
  gen_o.attach(gen, false);
  gen->add_option("--samples", gen_samples, "Number of samples")->check(CLI::PositiveNumber);

  bool quiet = false;
  auto* train = app.add_subcommand("train", "Train a model and write checkpoints and logs");
  train_o.attach(train, true);
  train->add_flag("--quiet", quiet, "No per-epoch output");

  std::string checkpoint, split = "all";
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint; writes metrics.csv, metrics.jsonl, masks/");
  eval_o.attach(eval, true);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file (default <out>/checkpoint.bin)");
  eval->add_option("--split", split, "all, train or val")->check(CLI::IsMember({"all", "train", "val"}));

  auto* ablate = app.add_subcommand("ablate", "Run the module and fusion ablation matrix");
  ablate_o.attach(ablate, true);

  std::uint64_t gc_seed = 1;
  bool gc_skip_model = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--seed", gc_seed, "Random seed");
  gradcheck->add_flag("--skip-model", gc_skip_model, "Only the building blocks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen(gen_o, gen_samples);
    if (train->parsed()) return cmd_train(train_o, quiet);
    if (eval->parsed()) return cmd_eval(eval_o, checkpoint, split);
    if (ablate->parsed()) return cmd_ablate(ablate_o);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_seed, gc_skip_model);
  } catch (const ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kConfig;
  } catch (const ShapeError& e) {
    fmt::print(stderr, "shape error: {}\n", e.what());
    return kConfig;
  } catch (const UsageError& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return kConfig;
  } catch (const NumericError& e) {
    fmt::print(stderr, "numeric failure: {}\n", e.what());
    return kNumeric;
  } catch (const IoError& e) {
    fmt::print(stderr, "i/o error: {}\n", e.what());
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    fmt::print(stderr, "i/o error: {}\n", e.what());
    return kIo;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kFailure;
  }
  return kFailure;
}
