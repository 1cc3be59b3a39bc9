#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "polyseg/harness/data.hpp"
#include "polyseg/harness/model.hpp"
#include "polyseg/harness/optim.hpp"
#include "polyseg/harness/spec.hpp"
#include "polyseg/metrics.hpp"

namespace polyseg::harness {

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean batch loss over the epoch
  double train_dice = 0.0;  // eval-mode Dice on the training split after the epoch
  std::optional<double> val_dice;
};

struct TrainOptions {
  bool write_outputs = true;  // checkpoints, train_log.csv, grad_norms.csv, config.ini
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_dice = 0.0;
  std::map<std::string, double> first_step_grad_norms;
};

/// Optimizes the summed deep-supervision loss over the training split for
/// spec.epochs epochs. Deterministic given the spec. Throws NumericError on a
/// non-finite loss.
TrainResult train_model(const ExperimentSpec& spec, Model& model, Adam& opt, const std::vector<Sample>& data,
                        const Split& split, const TrainOptions& options = {});

/// Data + model + optimizer from the spec, then train_model.
TrainResult run_train(const ExperimentSpec& spec, const TrainOptions& options = {});

/// Eval-mode fused probability maps (1 x H x W) for the selected samples.
std::vector<Tensor> predict(Model& model, const std::vector<Sample>& data, const std::vector<std::size_t>& indices);

/// Mean eval-mode Dice of the fused output.
double mean_dice(Model& model, const std::vector<Sample>& data, const std::vector<std::size_t>& indices);

struct EvalResult {
  std::vector<std::string> ids;
  std::vector<metrics::MetricReport> per_image;
  metrics::MetricReport mean;
  std::vector<std::vector<std::uint8_t>> masks;  // binarized predictions
};

EvalResult evaluate_model(Model& model, const std::vector<Sample>& data, const std::vector<std::size_t>& indices,
                          std::size_t boundary_tol);

/// metrics.csv, metrics.jsonl and optionally masks/<id>.png under dir.
void write_eval_outputs(const std::filesystem::path& dir, const EvalResult& r, std::size_t height, std::size_t width,
                        bool write_masks);

enum class EvalSplit { all, train, val };
EvalSplit parse_eval_split(const std::string& s);

/// Loads the checkpoint into a model built from the spec and evaluates it.
EvalResult run_eval(const ExperimentSpec& spec, const std::filesystem::path& checkpoint, EvalSplit which,
                    const std::filesystem::path& out_dir);

struct AblationRow {
  std::string group;  // "module" or "fusion"
  std::string label;  // A..E or UF/SF/FNF
  Toggles toggles;
  fusion::Method method = fusion::Method::fnf;
  std::size_t parameters = 0;
  double final_loss = 0.0;
  metrics::MetricReport metrics;
};

/// Five module rows (A all on, B no LFSA, C no DBFEB, D no ConvNext, E all
/// off; all with FNF) and three fusion rows (UF, SF, FNF; all modules on),
/// trained from the same seed and data, evaluated on the validation split (or
/// the training split when there is none).
std::vector<AblationRow> run_ablation(const ExperimentSpec& base,
                                      const std::function<void(const AblationRow&)>& on_row = {});
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

}  // namespace polyseg::harness
