#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "polyseg/harness/model.hpp"
#include "polyseg/harness/optim.hpp"

namespace polyseg::harness {

/// Byte layout (all integers and doubles little-endian):
///
///   "PSEGCKPT"                      8 bytes magic
///   u32 version                     currently 1
///   u32 n, n bytes                  config hash (hex text)
///   u64 optimizer steps
///   u64 entry count
///   per entry:
///     u32 n, n bytes                parameter name
///     u8 kind                       0 trainable, 1 buffer
///     u32 ndim, ndim x u64          shape
///     numel x f64                   values
///     u8 has_moments                1 for trainable entries with optimizer state
///     [numel x f64 m, numel x f64 v]
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Written to a temporary sibling and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Model& model, Adam* optimizer);

/// Restores parameters (and optimizer state when given). Throws VersionError
/// on a config hash or format version mismatch, IoError on a malformed file.
void load_checkpoint(const std::filesystem::path& path, Model& model, Adam* optimizer);

/// Config hash stored in a checkpoint file.
std::string checkpoint_hash(const std::filesystem::path& path);

}  // namespace polyseg::harness
