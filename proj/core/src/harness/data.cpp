#include "polyseg/harness/data.hpp"

#include <fmt/format.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>
#include <random>

#include "polyseg/errors.hpp"
#include "polyseg/ops.hpp"

namespace polyseg::harness {

bool Ellipse::contains(double y, double x) const {
  const double dy = y - cy, dx = x - cx;
  const double c = std::cos(theta), s = std::sin(theta);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
}

namespace {

Sample make_sample(std::size_t index, std::size_t size, std::uint64_t seed, const SyntheticParams& p) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto s = static_cast<double>(size);
  const std::size_t n = size * size;

  Sample out;
  out.id = fmt::format("syn_{:04d}", index);

  // Pinkish mucosa base colour with a shared low-frequency texture.
  std::array<double, 3> base{0.70 + 0.1 * unit(rng), 0.42 + 0.08 * unit(rng), 0.36 + 0.08 * unit(rng)};
  struct Wave {
    double ky, kx, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i) {
    const double freq = (1.0 + 3.0 * unit(rng)) * 2.0 * std::numbers::pi / s;
    const double dir = 2.0 * std::numbers::pi * unit(rng);
    waves.push_back({freq * std::sin(dir), freq * std::cos(dir), 2.0 * std::numbers::pi * unit(rng), 0.5 + unit(rng)});
  }

  const std::size_t count = p.min_blobs + static_cast<std::size_t>(unit(rng) * static_cast<double>(p.max_blobs - p.min_blobs + 1));
  const std::size_t blobs = std::min(count, p.max_blobs);
  for (std::size_t b = 0; b < blobs; ++b) {
    Ellipse e;
    e.ry = s * (p.min_radius + (p.max_radius - p.min_radius) * unit(rng));
    e.rx = s * (p.min_radius + (p.max_radius - p.min_radius) * unit(rng));
    const double r = std::max(e.ry, e.rx);
    e.cy = r + (s - 2.0 * r) * unit(rng);
    e.cx = r + (s - 2.0 * r) * unit(rng);
    e.theta = std::numbers::pi * unit(rng);
    out.blobs.push_back(e);
  }

  std::vector<double> mask(n, 0.0);
  std::vector<double> img(3 * n);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      double tex = 0.0;
      for (const auto& w : waves) tex += w.amp * std::sin(w.ky * py + w.kx * px + w.phase);
      tex *= p.texture / 2.0;
      double shade = 0.0;
      for (const auto& e : out.blobs) {
        if (e.contains(py, px)) {
          mask[y * size + x] = 1.0;
          // Dome-like shading: slightly brighter and redder towards the centre.
          const double dy = (py - e.cy) / e.ry, dx = (px - e.cx) / e.rx;
          shade = std::max(shade, 1.0 - 0.5 * (dy * dy + dx * dx));
        }
      }
      const std::array<double, 3> tint{1.0, -0.6, -0.4};
      for (std::size_t c = 0; c < 3; ++c) {
        img[c * n + y * size + x] = base[c] + tex + p.contrast * shade * tint[c];
      }
    }
  }

  if (p.max_specular > 0) {
    out.specular_spots = static_cast<std::size_t>(unit(rng) * static_cast<double>(p.max_specular + 1));
    out.specular_spots = std::min(out.specular_spots, p.max_specular);
    for (std::size_t k = 0; k < out.specular_spots; ++k) {
      const double cy = s * unit(rng), cx = s * unit(rng);
      const double rad = 0.5 + s / 32.0 * unit(rng);
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
          const double g = std::exp(-(dy * dy + dx * dx) / (2.0 * rad * rad));
          for (std::size_t c = 0; c < 3; ++c) {
            double& v = img[c * n + y * size + x];
            v = v + (0.98 - v) * g;
          }
        }
      }
    }
  }

  if (p.noise > 0.0) {
    for (auto& v : img) v += p.noise * gauss(rng);
  }
  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);

  out.image = Tensor({3, size, size}, std::move(img));
  out.mask = Tensor({1, size, size}, std::move(mask));
  return out;
}

}  // namespace

std::vector<Sample> gen_synthetic(std::size_t n, std::size_t size, std::uint64_t seed, const SyntheticParams& params) {
  if (n < 1) throw ConfigError("gen_synthetic: need at least one sample");
  if (size < 16) throw ConfigError(fmt::format("gen_synthetic: size must be >= 16, got {}", size));
  if (params.min_blobs < 1 || params.max_blobs < params.min_blobs) {
    throw ConfigError("gen_synthetic: blob counts must satisfy 1 <= min <= max");
  }
  if (!(params.min_radius > 0.0) || params.max_radius < params.min_radius || params.max_radius > 0.5 ||
      params.min_radius * static_cast<double>(size) < 1.0) {
    throw ConfigError("gen_synthetic: radii must satisfy 1px <= min*size, min <= max <= 0.5");
  }
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_sample(i, size, seed, params));
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

}  // namespace

Image8 read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError(fmt::format("cannot open {}", path.string()));
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  Image8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(fmt::format("{} is not a readable PNG", path.string()));
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_expand(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.pixels.resize(img.width * img.height * img.channels);
  rows.resize(img.height);
  for (std::size_t r = 0; r < img.height; ++r) rows[r] = img.pixels.data() + r * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError("write_png: only gray or RGB images");
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError(fmt::format("cannot write {}", path.string()));
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(img.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(fmt::format("failed writing {}", path.string()));
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto* base = const_cast<std::uint8_t*>(img.pixels.data());
  for (std::size_t r = 0; r < img.height; ++r) rows[r] = base + r * img.width * img.channels;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_mask_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask, std::size_t height,
                    std::size_t width) {
  Image8 img{height, width, 1, std::vector<std::uint8_t>(height * width)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
  write_png(path, img);
}

std::vector<Sample> load_directory(const std::filesystem::path& dir, std::size_t size) {
  namespace fs = std::filesystem;
  const fs::path images = dir / "images", masks = dir / "masks";
  if (!fs::is_directory(images) || !fs::is_directory(masks)) {
    throw IoError(fmt::format("{} must contain images/ and masks/", dir.string()));
  }
  std::vector<fs::path> names;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.path().extension() == ".png") names.push_back(entry.path().filename());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError(fmt::format("no PNG images under {}", images.string()));

  NoGradGuard no_grad;
  std::vector<Sample> out;
  for (const auto& name : names) {
    const Image8 im = read_png(images / name);
    if (!fs::exists(masks / name)) throw IoError(fmt::format("missing mask for {}", name.string()));
    const Image8 mk = read_png(masks / name);
    if (mk.height != im.height || mk.width != im.width) {
      throw IoError(fmt::format("{}: image {}x{} vs mask {}x{}", name.string(), im.height, im.width, mk.height, mk.width));
    }
    const std::size_t n = im.height * im.width;
    std::vector<double> rgb(3 * n), m(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src = im.channels >= 3 ? c : 0;
        rgb[c * n + i] = im.pixels[i * im.channels + src] / 255.0;
      }
      m[i] = mk.pixels[i * mk.channels] >= 128 ? 1.0 : 0.0;
    }
    Sample s;
    s.id = name.stem().string();
    s.image = resample(Tensor({3, im.height, im.width}, std::move(rgb)), size, size, ResampleMode::bilinear);
    s.mask = resample(Tensor({1, im.height, im.width}, std::move(m)), size, size, ResampleMode::nearest);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Sample> load_data(const ExperimentSpec& spec) {
  if (spec.data.source == DataSource::directory) return load_directory(spec.data.directory, spec.image_size);
  return gen_synthetic(spec.data.samples, spec.image_size, spec.seed, spec.data.synthetic);
}

Split split_indices(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  // Fisher-Yates with an explicit modulo draw so the order does not depend
  // on the standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  std::size_t n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_fraction));
  if (n_val >= n) n_val = n - 1;
  Split s;
  s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

}  // namespace polyseg::harness
