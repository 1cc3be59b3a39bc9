#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "polyseg/backbone.hpp"
#include "polyseg/dbfeb.hpp"
#include "polyseg/fusion.hpp"
#include "polyseg/harness/spec.hpp"
#include "polyseg/lfsa.hpp"
#include "polyseg/nn.hpp"

namespace polyseg::harness {

/// Per-sample predictions, all probabilities of shape 1 x H x W.
struct ModelOutput {
  std::array<Tensor, 4> stages;  // deep-supervision heads on d1..d4
  Tensor fused;
};

/// Encoder -> bottleneck (DBFEB or identity) -> four decoder stages -> LFSA
/// chain (or plain concatenation) -> three-way fusion with the shallow
/// encoder map and the bottleneck -> prediction head.
class Model {
 public:
  Model(const ModelSpec& spec, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  std::vector<ModelOutput> forward(std::span<const Tensor> images, bool training);
  ModelOutput forward(const Tensor& image, bool training);

  ParamRegistry& params() { return registry_; }
  const ParamRegistry& params() const { return registry_; }
  std::size_t parameter_count() const { return registry_.trainable_count(); }
  const ModelSpec& spec() const { return spec_; }

  /// Top-level module a parameter name belongs to ("encoder", "dbfeb", ...).
  static std::string module_of(const std::string& param_name);

 private:
  struct DecoderStage {
    Conv2d conv;  // 3x3 over [upsampled previous, skip]
    LayerNorm norm;
  };

  ModelSpec spec_;
  backbone::Encoder encoder_;
  std::optional<dbfeb::DbfebParams> dbfeb_;
  std::array<DecoderStage, 4> decoder_;
  std::optional<lfsa::DecoderFuseParams> lfsa_;
  Conv2d plain_merge_;  // 1x1 over concatenated d1..d4 when LFSA is off
  Conv2d proj_encoder_;
  Conv2d proj_bottleneck_;
  fusion::FusionParams fusion_;
  Conv2d head_;
  Conv2d refine_a_;
  Conv2d refine_b_;
  std::array<Conv2d, 4> side_heads_;
  ParamRegistry registry_;
};

}  // namespace polyseg::harness
