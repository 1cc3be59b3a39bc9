#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "polyseg/backbone.hpp"
#include "polyseg/dbfeb.hpp"
#include "polyseg/fusion.hpp"
#include "polyseg/lfsa.hpp"

namespace polyseg::harness {

struct Toggles {
  bool convnext = true;
  bool dbfeb = true;
  bool lfsa = true;
  bool operator==(const Toggles&) const = default;
};

struct ModelSpec {
  backbone::EncoderConfig encoder;
  Toggles toggles;
  fusion::Method fusion = fusion::Method::fnf;
  dbfeb::DbfebConfig dbfeb;
  lfsa::LfsaConfig lfsa;
  std::size_t refine_channels = 8;  // full-resolution refinement; 0 disables
  std::size_t in_channels = 3;
};

struct OptimizerSpec {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

enum class DataSource { synthetic, directory };

struct SyntheticParams {
  std::size_t min_blobs = 1;
  std::size_t max_blobs = 3;
  double min_radius = 0.12;  // fraction of the image side
  double max_radius = 0.28;
  double contrast = 0.12;    // blob vs background intensity shift
  double texture = 0.05;     // amplitude of the shared smooth texture
  double noise = 0.02;       // per-pixel gaussian noise std
  std::size_t max_specular = 2;
};

struct DataSpec {
  DataSource source = DataSource::synthetic;
  std::size_t samples = 8;
  std::filesystem::path directory;  // images/*.png + masks/*.png
  double val_fraction = 0.25;
  SyntheticParams synthetic;
};

struct ExperimentSpec {
  std::uint64_t seed = 7;
  std::size_t image_size = 64;
  std::size_t epochs = 200;
  std::size_t batch_size = 2;
  double bce_weight = 0.5;
  std::size_t boundary_tol = 0;  // 0: derive from the image diagonal
  bool write_masks = true;
  std::filesystem::path out_dir = "runs/default";
  ModelSpec model;
  OptimizerSpec optimizer;
  DataSpec data;

  void validate() const;  // ConfigError
};

/// INI text: `key = value` lines grouped in [run], [model], [dbfeb], [lfsa],
/// [optimizer], [data], [synthetic] sections. Unknown sections or keys are
/// rejected; missing keys keep their defaults.
ExperimentSpec parse_spec(const std::string& text);
ExperimentSpec load_spec(const std::filesystem::path& path);
std::string to_ini(const ExperimentSpec& spec);

/// Hash of everything that determines the parameter layout, as 16 hex digits.
std::string config_hash(const ModelSpec& model);

}  // namespace polyseg::harness
