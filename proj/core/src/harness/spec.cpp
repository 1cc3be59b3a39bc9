#include "polyseg/harness/spec.hpp"

#include <fmt/format.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "polyseg/errors.hpp"

namespace polyseg::harness {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  T value{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError(fmt::format("config: '{}' is not a valid number for {}", raw, key));
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError(fmt::format("config: {} must be true or false, got '{}'", key, raw));
}

std::array<std::size_t, 4> parse_quad(const std::string& key, const std::string& raw) {
  std::array<std::size_t, 4> out{};
  std::stringstream ss(raw);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == 4) break;
    out[i++] = parse_number<std::size_t>(key, item);
  }
  if (i != 4 || std::getline(ss, item)) {
    throw ConfigError(fmt::format("config: {} needs exactly 4 comma-separated values, got '{}'", key, raw));
  }
  return out;
}

struct Field {
  const char* section;
  const char* key;
  bool model;  // participates in the config hash
  std::function<std::string(const ExperimentSpec&)> get;
  std::function<void(ExperimentSpec&, const std::string&)> set;
};

#define POLYSEG_NUM(sec, name, member, type, is_model)                                          \
  Field {                                                                                       \
    sec, name, is_model, [](const ExperimentSpec& s) { return fmt::format("{}", s.member); },    \
        [](ExperimentSpec& s, const std::string& v) { s.member = parse_number<type>(name, v); } \
  }
#define POLYSEG_BOOL(sec, name, member, is_model)                                                \
  Field {                                                                                        \
    sec, name, is_model, [](const ExperimentSpec& s) { return std::string(s.member ? "true" : "false"); }, \
        [](ExperimentSpec& s, const std::string& v) { s.member = parse_bool(name, v); }          \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      POLYSEG_NUM("run", "seed", seed, std::uint64_t, false),
      POLYSEG_NUM("run", "image_size", image_size, std::size_t, false),
      POLYSEG_NUM("run", "epochs", epochs, std::size_t, false),
      POLYSEG_NUM("run", "batch_size", batch_size, std::size_t, false),
      POLYSEG_NUM("run", "bce_weight", bce_weight, double, false),
      POLYSEG_NUM("run", "boundary_tol", boundary_tol, std::size_t, false),
      POLYSEG_BOOL("run", "write_masks", write_masks, false),
      Field{"run", "out_dir", false, [](const ExperimentSpec& s) { return s.out_dir.string(); },
            [](ExperimentSpec& s, const std::string& v) { s.out_dir = trim(v); }},

      POLYSEG_BOOL("model", "convnext", model.toggles.convnext, true),
      POLYSEG_BOOL("model", "dbfeb", model.toggles.dbfeb, true),
      POLYSEG_BOOL("model", "lfsa", model.toggles.lfsa, true),
      Field{"model", "fusion", true, [](const ExperimentSpec& s) { return std::string(fusion::method_name(s.model.fusion)); },
            [](ExperimentSpec& s, const std::string& v) { s.model.fusion = fusion::parse_method(trim(v)); }},
      Field{"model", "stage_channels", true,
            [](const ExperimentSpec& s) { return fmt::format("{}", fmt::join(s.model.encoder.stage_channels, ",")); },
            [](ExperimentSpec& s, const std::string& v) { s.model.encoder.stage_channels = parse_quad("stage_channels", v); }},
      Field{"model", "stage_depths", true,
            [](const ExperimentSpec& s) { return fmt::format("{}", fmt::join(s.model.encoder.stage_depths, ",")); },
            [](ExperimentSpec& s, const std::string& v) { s.model.encoder.stage_depths = parse_quad("stage_depths", v); }},
      POLYSEG_NUM("model", "stem_stride", model.encoder.stem_stride, std::size_t, true),
      POLYSEG_NUM("model", "refine_channels", model.refine_channels, std::size_t, true),
      POLYSEG_NUM("model", "in_channels", model.in_channels, std::size_t, true),

      POLYSEG_NUM("dbfeb", "heads", model.dbfeb.heads, std::size_t, true),
      POLYSEG_NUM("dbfeb", "max_hops", model.dbfeb.max_hops, std::size_t, true),
      Field{"dbfeb", "connectivity", true,
            [](const ExperimentSpec& s) { return fmt::format("{}", static_cast<int>(s.model.dbfeb.connectivity)); },
            [](ExperimentSpec& s, const std::string& v) {
              const auto n = parse_number<int>("connectivity", v);
              if (n != 4 && n != 8) throw ConfigError(fmt::format("config: connectivity must be 4 or 8, got {}", n));
              s.model.dbfeb.connectivity = static_cast<graph::Connectivity>(n);
            }},
      Field{"dbfeb", "edge_cost", true,
            [](const ExperimentSpec& s) {
              return std::string(s.model.dbfeb.edge_cost == graph::EdgeCost::uniform ? "uniform" : "feature_l2");
            },
            [](ExperimentSpec& s, const std::string& v) {
              const auto t = trim(v);
              if (t == "uniform") {
                s.model.dbfeb.edge_cost = graph::EdgeCost::uniform;
              } else if (t == "feature_l2") {
                s.model.dbfeb.edge_cost = graph::EdgeCost::feature_l2;
              } else {
                throw ConfigError(fmt::format("config: edge_cost must be feature_l2 or uniform, got '{}'", v));
              }
            }},
      POLYSEG_NUM("dbfeb", "hidden", model.dbfeb.hidden, std::size_t, true),
      POLYSEG_NUM("dbfeb", "bn_eps", model.dbfeb.bn_eps, double, true),
      POLYSEG_NUM("dbfeb", "bn_momentum", model.dbfeb.bn_momentum, double, true),

      POLYSEG_NUM("lfsa", "radius", model.lfsa.radius, std::size_t, true),
      POLYSEG_NUM("lfsa", "eps", model.lfsa.eps, double, true),

      POLYSEG_NUM("optimizer", "lr", optimizer.lr, double, false),
      POLYSEG_NUM("optimizer", "beta1", optimizer.beta1, double, false),
      POLYSEG_NUM("optimizer", "beta2", optimizer.beta2, double, false),
      POLYSEG_NUM("optimizer", "eps", optimizer.eps, double, false),

      Field{"data", "source", false,
            [](const ExperimentSpec& s) {
              return std::string(s.data.source == DataSource::directory ? "directory" : "synthetic");
            },
            [](ExperimentSpec& s, const std::string& v) {
              const auto t = trim(v);
              if (t == "synthetic") {
                s.data.source = DataSource::synthetic;
              } else if (t == "directory") {
                s.data.source = DataSource::directory;
              } else {
                throw ConfigError(fmt::format("config: data source must be synthetic or directory, got '{}'", v));
              }
            }},
      POLYSEG_NUM("data", "samples", data.samples, std::size_t, false),
      Field{"data", "directory", false, [](const ExperimentSpec& s) { return s.data.directory.string(); },
            [](ExperimentSpec& s, const std::string& v) { s.data.directory = trim(v); }},
      POLYSEG_NUM("data", "val_fraction", data.val_fraction, double, false),

      POLYSEG_NUM("synthetic", "min_blobs", data.synthetic.min_blobs, std::size_t, false),
      POLYSEG_NUM("synthetic", "max_blobs", data.synthetic.max_blobs, std::size_t, false),
      POLYSEG_NUM("synthetic", "min_radius", data.synthetic.min_radius, double, false),
      POLYSEG_NUM("synthetic", "max_radius", data.synthetic.max_radius, double, false),
      POLYSEG_NUM("synthetic", "contrast", data.synthetic.contrast, double, false),
      POLYSEG_NUM("synthetic", "texture", data.synthetic.texture, double, false),
      POLYSEG_NUM("synthetic", "noise", data.synthetic.noise, double, false),
      POLYSEG_NUM("synthetic", "max_specular", data.synthetic.max_specular, std::size_t, false),
  };
  return table;
}

#undef POLYSEG_NUM
#undef POLYSEG_BOOL

std::string serialize(const ExperimentSpec& spec, bool model_only) {
  std::string out;
  std::string current;
  for (const auto& f : fields()) {
    if (model_only && !f.model) continue;
    if (current != f.section) {
      if (!current.empty()) out += "\n";
      current = f.section;
      out += fmt::format("[{}]\n", current);
    }
    out += fmt::format("{} = {}\n", f.key, f.get(spec));
  }
  return out;
}

}  // namespace

void ExperimentSpec::validate() const {
  model.encoder.validate();
  if (image_size < 16) throw ConfigError(fmt::format("image_size must be >= 16, got {}", image_size));
  const std::size_t f = model.encoder.downsample_factor();
  if (image_size % f != 0) throw ConfigError(fmt::format("image_size {} must be divisible by {}", image_size, f));
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(bce_weight >= 0.0 && bce_weight <= 1.0)) throw ConfigError("bce_weight must lie in [0, 1]");
  if (model.in_channels != 3) throw ConfigError("in_channels must be 3 (RGB)");
  if (model.dbfeb.heads < 1) throw ConfigError("dbfeb heads must be >= 1");
  if (model.dbfeb.max_hops < 1) throw ConfigError("dbfeb max_hops must be >= 1");
  if (model.lfsa.radius < 1) throw ConfigError("lfsa radius must be >= 1");
  if (!(model.lfsa.eps > 0.0)) throw ConfigError("lfsa eps must be > 0");
  if (!(optimizer.lr >= 0.0)) throw ConfigError("optimizer lr must be >= 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (!(optimizer.eps > 0.0)) throw ConfigError("optimizer eps must be > 0");
  if (data.samples < 1) throw ConfigError("data samples must be >= 1");
  if (!(data.val_fraction >= 0.0 && data.val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
  if (data.source == DataSource::directory && data.directory.empty()) {
    throw ConfigError("data source 'directory' needs data.directory");
  }
  const auto& s = data.synthetic;
  if (s.min_blobs < 1 || s.max_blobs < s.min_blobs) throw ConfigError("synthetic blob counts must satisfy 1 <= min <= max");
  if (!(s.min_radius > 0.0 && s.max_radius >= s.min_radius && s.max_radius <= 0.5)) {
    throw ConfigError("synthetic radii must satisfy 0 < min <= max <= 0.5");
  }
  if (!(s.noise >= 0.0 && s.texture >= 0.0)) throw ConfigError("synthetic noise and texture must be >= 0");
}

ExperimentSpec parse_spec(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(fmt::format("config: {} (line {})", e.message(), e.line()));
  }
  ExperimentSpec spec;
  for (const auto& [section, body] : tree) {
    bool known_section = false;
    for (const auto& f : fields()) known_section = known_section || section == f.section;
    if (!known_section) {
      if (body.empty()) throw ConfigError(fmt::format("config: key '{}' must sit inside a [section]", section));
      throw ConfigError(fmt::format("config: unknown section [{}]", section));
    }
    for (const auto& [key, value] : body) {
      const Field* match = nullptr;
      for (const auto& f : fields()) {
        if (section == f.section && key == f.key) match = &f;
      }
      if (!match) throw ConfigError(fmt::format("config: unknown key '{}' in [{}]", key, section));
      match->set(spec, value.data());
    }
  }
  spec.validate();
  return spec;
}

ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot read config file {}", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_spec(ss.str());
}

std::string to_ini(const ExperimentSpec& spec) { return serialize(spec, false); }

std::string config_hash(const ModelSpec& model) {
  ExperimentSpec probe;
  probe.model = model;
  const std::string canon = serialize(probe, true);
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

}  // namespace polyseg::harness
