#include "polyseg/harness/checkpoint.hpp"

#include <fmt/format.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "polyseg/errors.hpp"

namespace polyseg::harness {

namespace {

constexpr char kMagic[8] = {'P', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <typename T>
  void uint(T v) {
    unsigned char b[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out_.write(reinterpret_cast<const char*>(b), sizeof(T));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string origin) : in_(in), origin_(std::move(origin)) {}
  template <typename T>
  T uint() {
    unsigned char b[sizeof(T)];
    raw(reinterpret_cast<char*>(b), sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b[i]) << (8 * i));
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string str() {
    const auto n = uint<std::uint32_t>();
    if (n > (1u << 20)) throw IoError(fmt::format("{}: implausible string length {}", origin_, n));
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  void raw(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw IoError(fmt::format("{}: truncated checkpoint", origin_));
  }

 private:
  std::ifstream& in_;
  std::string origin_;
};

std::string read_header(Reader& r, const std::string& origin) {
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw IoError(fmt::format("{}: not a polyseg checkpoint", origin));
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError(fmt::format("{}: checkpoint format version {} (expected {})", origin, version, kCheckpointVersion));
  }
  return r.str();
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, Adam* optimizer) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write {}", tmp.string()));
    Writer w(out);
    out.write(kMagic, 8);
    w.uint(kCheckpointVersion);
    w.str(config_hash(model.spec()));
    w.uint(static_cast<std::uint64_t>(optimizer ? optimizer->steps() : 0));

    const auto& entries = model.params().entries();
    w.uint(static_cast<std::uint64_t>(entries.size()));
    std::size_t trainable_index = 0;
    for (const auto& e : entries) {
      w.str(e.name);
      w.uint(static_cast<std::uint8_t>(e.kind));
      const auto& shape = e.tensor->shape();
      w.uint(static_cast<std::uint32_t>(shape.size()));
      for (auto d : shape) w.uint(static_cast<std::uint64_t>(d));
      for (double v : e.tensor->data()) w.f64(v);
      const bool moments = optimizer && e.kind == ParamKind::trainable;
      w.uint(static_cast<std::uint8_t>(moments ? 1 : 0));
      if (moments) {
        for (double v : optimizer->first_moments()[trainable_index]) w.f64(v);
        for (double v : optimizer->second_moments()[trainable_index]) w.f64(v);
      }
      if (e.kind == ParamKind::trainable) ++trainable_index;
    }
    out.flush();
    if (!out) throw IoError(fmt::format("failed writing {}", tmp.string()));
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError(fmt::format("cannot move {} into place: {}", path.string(), ec.message()));
}

std::string checkpoint_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read {}", path.string()));
  Reader r(in, path.string());
  return read_header(r, path.string());
}

void load_checkpoint(const std::filesystem::path& path, Model& model, Adam* optimizer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read {}", path.string()));
  const std::string origin = path.string();
  Reader r(in, origin);
  const std::string found = read_header(r, origin);
  const std::string expected = config_hash(model.spec());
  if (found != expected) {
    throw VersionError(fmt::format("{}: incompatible checkpoint, expected config hash {} but found {}", origin, expected,
                                   found));
  }
  const auto steps = r.uint<std::uint64_t>();
  const auto count = r.uint<std::uint64_t>();

  std::map<std::string, std::size_t> trainable_index;
  {
    std::size_t i = 0;
    for (const auto& p : model.params().trainable()) trainable_index[p.name] = i++;
  }
  if (count != model.params().entries().size()) {
    throw IoError(fmt::format("{}: {} entries but the model has {}", origin, count, model.params().entries().size()));
  }
  for (std::uint64_t n = 0; n < count; ++n) {
    const std::string name = r.str();
    const NamedParam* target = model.params().find(name);
    if (!target) throw IoError(fmt::format("{}: unknown parameter '{}'", origin, name));
    const auto kind = r.uint<std::uint8_t>();
    if (kind != static_cast<std::uint8_t>(target->kind)) throw IoError(fmt::format("{}: kind mismatch for '{}'", origin, name));
    const auto ndim = r.uint<std::uint32_t>();
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(r.uint<std::uint64_t>());
    if (shape != target->tensor->shape()) {
      throw IoError(fmt::format("{}: '{}' has shape {} but the model expects {}", origin, name, shape_str(shape),
                                shape_str(target->tensor->shape())));
    }
    auto& data = target->tensor->impl()->data;
    for (auto& v : data) v = r.f64();
    const auto has_moments = r.uint<std::uint8_t>();
    if (has_moments) {
      std::vector<double> m(data.size()), v(data.size());
      for (auto& x : m) x = r.f64();
      for (auto& x : v) x = r.f64();
      if (optimizer) {
        const auto idx = trainable_index.at(name);
        optimizer->first_moments()[idx] = std::move(m);
        optimizer->second_moments()[idx] = std::move(v);
      }
    }
  }
  if (optimizer) optimizer->set_steps(steps);
}

}  // namespace polyseg::harness
