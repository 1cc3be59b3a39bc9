#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "polyseg/harness/spec.hpp"
#include "polyseg/tensor.hpp"

namespace polyseg::harness {

struct Ellipse {
  double cy = 0.0, cx = 0.0;  // pixel units, centers at +0.5
  double ry = 0.0, rx = 0.0;
  double theta = 0.0;

  bool contains(double y, double x) const;
};

struct Sample {
  std::string id;
  Tensor image;  // 3 x S x S in [0, 1]
  Tensor mask;   // 1 x S x S in {0, 1}
  std::vector<Ellipse> blobs;
  std::size_t specular_spots = 0;
};

/// Low-contrast elliptical blobs on a smooth textured background plus small
/// specular highlights. Sample i depends only on (seed, i, size, params).
std::vector<Sample> gen_synthetic(std::size_t n, std::size_t size, std::uint64_t seed, const SyntheticParams& params);

/// Reads <dir>/images/<name>.png and <dir>/masks/<name>.png pairs, resized to
/// size x size (bilinear for images, nearest for masks; masks binarized at 128).
std::vector<Sample> load_directory(const std::filesystem::path& dir, std::size_t size);

/// Synthetic or directory data per the spec.
std::vector<Sample> load_data(const ExperimentSpec& spec);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Seed-stable shuffle; floor(n * val_fraction) samples go to validation,
/// always leaving at least one training sample.
Split split_indices(std::size_t n, double val_fraction, std::uint64_t seed);

struct Image8 {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& img);

/// 0/255 grayscale PNG of a {0,1} map.
void write_mask_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask, std::size_t height,
                    std::size_t width);

}  // namespace polyseg::harness
