#include "polyseg/harness/trainer.hpp"

#include <fmt/format.h>
#include <fmt/os.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>

#include "polyseg/errors.hpp"
#include "polyseg/harness/checkpoint.hpp"
#include "polyseg/loss.hpp"
#include "polyseg/ops.hpp"

namespace polyseg::harness {

namespace {

std::vector<std::size_t> epoch_order(const std::vector<std::size_t>& train, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order = train;
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + epoch);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

metrics::MaskPair make_pair(const Tensor& prob, const Tensor& mask) {
  metrics::MaskPair p;
  p.height = mask.dim(1);
  p.width = mask.dim(2);
  p.pred.assign(prob.data().begin(), prob.data().end());
  p.label.assign(mask.data().begin(), mask.data().end());
  return p;
}

std::string num(double v) { return fmt::format("{:.9f}", v); }

}  // namespace

std::vector<Tensor> predict(Model& model, const std::vector<Sample>& data, const std::vector<std::size_t>& indices) {
  NoGradGuard no_grad;
  std::vector<Tensor> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(model.forward(data.at(i).image, false).fused);
  return out;
}

double mean_dice(Model& model, const std::vector<Sample>& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) return 0.0;
  const auto probs = predict(model, data, indices);
  double total = 0.0;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    total += metrics::dice_iou_mae(make_pair(probs[k], data[indices[k]].mask)).dice;
  }
  return total / static_cast<double>(indices.size());
}

TrainResult train_model(const ExperimentSpec& spec, Model& model, Adam& opt, const std::vector<Sample>& data,
                        const Split& split, const TrainOptions& options) {
  namespace fs = std::filesystem;
  if (split.train.empty()) throw ConfigError("train: empty training split");
  TrainResult result;
  std::optional<fmt::ostream> log_file;
  std::optional<fmt::ostream> grad_file;
  if (options.write_outputs) {
    fs::create_directories(spec.out_dir);
    std::ofstream(spec.out_dir / "config.ini") << to_ini(spec);
    log_file.emplace(fmt::output_file((spec.out_dir / "train_log.csv").string()));
    log_file->print("epoch,train_loss,train_dice,val_dice\n");
    grad_file.emplace(fmt::output_file((spec.out_dir / "grad_norms.csv").string()));
    grad_file->print("epoch,module,grad_norm\n");
  }

  bool have_best = false;
  for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    const auto order = epoch_order(split.train, spec.seed, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
      const std::size_t end = std::min(order.size(), start + spec.batch_size);
      std::vector<Tensor> images;
      for (std::size_t k = start; k < end; ++k) images.push_back(data[order[k]].image);
      Tape::active().clear();
      auto outs = model.forward(images, true);
      Tensor total;
      for (std::size_t k = 0; k < outs.size(); ++k) {
        Tensor l = loss::total_loss(outs[k].stages, outs[k].fused, data[order[start + k]].mask, spec.bce_weight);
        total = total.defined() ? add(total, l) : l;
      }
      Tensor batch_loss = mul_scalar(total, 1.0 / static_cast<double>(outs.size()));
      const double value = batch_loss.item();
      if (!std::isfinite(value)) {
        Tape::active().clear();
        throw NumericError(fmt::format("non-finite loss {} at epoch {}, step {} (samples {}..{})", value, epoch,
                                       batches + 1, start, end - 1));
      }
      backward(batch_loss);
      if (batches == 0) {
        auto norms = grad_norms_by_module(model.params());
        if (epoch == 1) result.first_step_grad_norms = norms;
        if (grad_file) {
          for (const auto& [name, norm] : norms) grad_file->print("{},{},{}\n", epoch, name, num(norm));
        }
      }
      opt.step();
      loss_sum += value;
      ++batches;
    }

    EpochLog row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(batches);
    row.train_dice = mean_dice(model, data, split.train);
    if (!split.val.empty()) row.val_dice = mean_dice(model, data, split.val);
    result.log.push_back(row);
    if (log_file) {
      log_file->print("{},{},{},{}\n", epoch, num(row.train_loss), num(row.train_dice),
                      row.val_dice ? num(*row.val_dice) : std::string());
    }

    const double score = row.val_dice.value_or(row.train_dice);
    if (!have_best || score > result.best_dice) {
      have_best = true;
      result.best_dice = score;
      result.best_epoch = epoch;
      if (options.write_outputs) save_checkpoint(spec.out_dir / "checkpoint_best.bin", model, &opt);
    }
    if (options.on_epoch) options.on_epoch(row);
  }
  if (options.write_outputs) save_checkpoint(spec.out_dir / "checkpoint.bin", model, &opt);
  return result;
}

TrainResult run_train(const ExperimentSpec& spec, const TrainOptions& options) {
  spec.validate();
  const auto data = load_data(spec);
  const auto split = split_indices(data.size(), spec.data.val_fraction, spec.seed);
  Model model(spec.model, spec.seed);
  Adam opt(model.params(), spec.optimizer);
  return train_model(spec, model, opt, data, split, options);
}

EvalResult evaluate_model(Model& model, const std::vector<Sample>& data, const std::vector<std::size_t>& indices,
                          std::size_t boundary_tol) {
  EvalResult r;
  const auto probs = predict(model, data, indices);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& s = data[indices[k]];
    const auto pair = make_pair(probs[k], s.mask);
    const std::size_t tol = boundary_tol > 0 ? boundary_tol : metrics::default_tolerance(pair.height, pair.width);
    r.ids.push_back(s.id);
    r.per_image.push_back(metrics::evaluate(pair, tol));
    std::vector<std::uint8_t> bin(pair.pred.size());
    for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = pair.pred[i] >= metrics::kThreshold ? 1 : 0;
    r.masks.push_back(std::move(bin));
  }
  r.mean = metrics::mean_report(r.per_image);
  return r;
}

void write_eval_outputs(const std::filesystem::path& dir, const EvalResult& r, std::size_t height, std::size_t width,
                        bool write_masks) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto row = [](const std::string& id, const metrics::MetricReport& m) {
    return fmt::format("{},{},{},{},{},{}\n", id, num(m.dice), num(m.iou), num(m.mae), num(m.boundary_f),
                       num(m.s_measure));
  };
  auto as_json = [](const std::string& id, const metrics::MetricReport& m) {
    nlohmann::ordered_json j;
    j["id"] = id;
    j["dice"] = m.dice;
    j["iou"] = m.iou;
    j["mae"] = m.mae;
    j["boundary_f"] = m.boundary_f;
    j["s_measure"] = m.s_measure;
    return j.dump() + "\n";
  };
  std::ofstream csv(dir / "metrics.csv", std::ios::trunc);
  std::ofstream jsonl(dir / "metrics.jsonl", std::ios::trunc);
  if (!csv || !jsonl) throw IoError(fmt::format("cannot write metrics under {}", dir.string()));
  csv << "id,dice,iou,mae,boundary_f,s_measure\n";
  for (std::size_t i = 0; i < r.ids.size(); ++i) {
    csv << row(r.ids[i], r.per_image[i]);
    jsonl << as_json(r.ids[i], r.per_image[i]);
  }
  csv << row("mean", r.mean);
  jsonl << as_json("mean", r.mean);
  if (!csv || !jsonl) throw IoError(fmt::format("failed writing metrics under {}", dir.string()));
  if (write_masks) {
    fs::create_directories(dir / "masks");
    for (std::size_t i = 0; i < r.ids.size(); ++i) write_mask_png(dir / "masks" / (r.ids[i] + ".png"), r.masks[i], height, width);
  }
}

EvalSplit parse_eval_split(const std::string& s) {
  if (s == "all") return EvalSplit::all;
  if (s == "train") return EvalSplit::train;
  if (s == "val") return EvalSplit::val;
  throw ConfigError(fmt::format("split must be all, train or val; got '{}'", s));
}

EvalResult run_eval(const ExperimentSpec& spec, const std::filesystem::path& checkpoint, EvalSplit which,
                    const std::filesystem::path& out_dir) {
  spec.validate();
  const auto data = load_data(spec);
  const auto split = split_indices(data.size(), spec.data.val_fraction, spec.seed);
  std::vector<std::size_t> indices;
  switch (which) {
    case EvalSplit::all:
      for (std::size_t i = 0; i < data.size(); ++i) indices.push_back(i);
      break;
    case EvalSplit::train: indices = split.train; break;
    case EvalSplit::val: indices = split.val; break;
  }
  if (indices.empty()) throw ConfigError("eval: the selected split is empty");
  Model model(spec.model, spec.seed);
  load_checkpoint(checkpoint, model, nullptr);
  auto r = evaluate_model(model, data, indices, spec.boundary_tol);
  write_eval_outputs(out_dir, r, spec.image_size, spec.image_size, spec.write_masks);
  return r;
}

std::vector<AblationRow> run_ablation(const ExperimentSpec& base, const std::function<void(const AblationRow&)>& on_row) {
  base.validate();
  const auto data = load_data(base);
  const auto split = split_indices(data.size(), base.data.val_fraction, base.seed);
  const auto& eval_idx = split.val.empty() ? split.train : split.val;

  struct Plan {
    const char* group;
    const char* label;
    Toggles toggles;
    fusion::Method method;
  };
  const std::vector<Plan> plans = {
      {"module", "A", {true, true, true}, fusion::Method::fnf},
      {"module", "B", {true, true, false}, fusion::Method::fnf},
      {"module", "C", {true, false, true}, fusion::Method::fnf},
      {"module", "D", {false, true, true}, fusion::Method::fnf},
      {"module", "E", {false, false, false}, fusion::Method::fnf},
      {"fusion", "UF", {true, true, true}, fusion::Method::uf},
      {"fusion", "SF", {true, true, true}, fusion::Method::sf},
      {"fusion", "FNF", {true, true, true}, fusion::Method::fnf},
  };

  std::vector<AblationRow> rows;
  for (const auto& plan : plans) {
    AblationRow row;
    row.group = plan.group;
    row.label = plan.label;
    row.toggles = plan.toggles;
    row.method = plan.method;
    const AblationRow* same = nullptr;
    for (const auto& done : rows) {
      if (done.toggles == plan.toggles && done.method == plan.method) same = &done;
    }
    if (same) {  // identical configuration already trained from the same seed
      row.parameters = same->parameters;
      row.final_loss = same->final_loss;
      row.metrics = same->metrics;
    } else {
      ExperimentSpec spec = base;
      spec.model.toggles = plan.toggles;
      spec.model.fusion = plan.method;
      Model model(spec.model, spec.seed);
      Adam opt(model.params(), spec.optimizer);
      TrainOptions quiet;
      quiet.write_outputs = false;
      const auto tr = train_model(spec, model, opt, data, split, quiet);
      row.parameters = model.parameter_count();
      row.final_loss = tr.log.empty() ? 0.0 : tr.log.back().train_loss;
      row.metrics = evaluate_model(model, data, eval_idx, spec.boundary_tol).mean;
    }
    rows.push_back(row);
    if (on_row) on_row(rows.back());
  }
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
  out << "group,row,convnext,dbfeb,lfsa,fusion,parameters,final_loss,dice,iou,mae,boundary_f,s_measure\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{}\n", r.group, r.label, int(r.toggles.convnext),
                       int(r.toggles.dbfeb), int(r.toggles.lfsa), fusion::method_name(r.method), r.parameters,
                       num(r.final_loss), num(r.metrics.dice), num(r.metrics.iou), num(r.metrics.mae),
                       num(r.metrics.boundary_f), num(r.metrics.s_measure));
  }
  if (!out) throw IoError(fmt::format("failed writing {}", path.string()));
}

}  // namespace polyseg::harness
