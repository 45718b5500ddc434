#pragma once

// The full forecast network and its checkpoint format.
//
//   stem conv (k = stem_kernel) + channel norm
//   stage 0: depths[0] blocks at stage_dims[0]
//   stage i > 0: depth-scaling layer stage_dims[i-1] -> stage_dims[i], then depths[i] blocks
//   final conv k3 at stage_dims.back(), head conv k1 -> out_channels
//
// Parameter count, with d = stage_dims, r(c) = max(c / reduction_ratio, 1):
//   stem      d0*Cin*k^2 + d0 + 2*d0
//   scale i   2*d[i-1] + 9*d[i]*d[i-1] + d[i]
//   block(c)  50c + 2c + (4c^2 + 4c) + (4c^2 + c) + c       [dw, norm, pw1, pw2, gamma]
//             + se ? (2*r(c)*c + r(c) + c) : 0
//   final     9*dL^2 + dL
//   head      Cout*dL + Cout

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "karina/io.hpp"
#include "karina/layers.hpp"

namespace karina {

struct ModelConfig {
  std::size_t in_channels = 67;
  std::size_t out_channels = 67;
  std::vector<std::size_t> stage_dims{96, 192, 384, 768};
  std::vector<std::size_t> depths{3, 3, 9, 3};
  std::size_t stem_kernel = 3;
  PaddingMode padding_mode = PaddingMode::Geocyclic;
  bool se_enabled = true;
  std::size_t reduction_ratio = 4;
  double layer_scale_init = 1e-6;
  double drop_path_rate = 0.0;
  // Grid the model was trained on; 0 accepts any extent.
  std::size_t n_lat = 0;
  std::size_t n_lon = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const {
    auto bad = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("model config: " + field + " " + why);
    };
    if (in_channels == 0) bad("in_channels", "must be >= 1");
    if (out_channels == 0) bad("out_channels", "must be >= 1");
    if (stage_dims.empty()) bad("stage_dims", "must be non-empty");
    if (stage_dims.size() != depths.size()) bad("depths", "must have one entry per stage dim");
    for (std::size_t i = 0; i < stage_dims.size(); ++i) {
      if (stage_dims[i] == 0) bad("stage_dims", "entries must be >= 1");
      if (i && stage_dims[i] <= stage_dims[i - 1]) bad("stage_dims", "must be strictly increasing");
    }
    if (stem_kernel % 2 == 0) bad("stem_kernel", "must be odd");
    if (reduction_ratio < 1) bad("reduction_ratio", "must be >= 1");
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) bad("drop_path_rate", "must lie in [0, 1)");
    if (n_lon % 2 != 0) bad("n_lon", "must be even");
  }

  /// Canonical key=value lines, fixed order; also the checkpoint header block.
  std::vector<std::pair<std::string, std::string>> to_pairs() const {
    auto list = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    auto real = [](double d) {
      std::ostringstream os;
      os << std::setprecision(17) << d;
      return os.str();
    };
    return {{"in_channels", std::to_string(in_channels)},
            {"out_channels", std::to_string(out_channels)},
            {"stage_dims", list(stage_dims)},
            {"depths", list(depths)},
            {"stem_kernel", std::to_string(stem_kernel)},
            {"padding", to_string(padding_mode)},
            {"se", se_enabled ? "true" : "false"},
            {"reduction_ratio", std::to_string(reduction_ratio)},
            {"layer_scale_init", real(layer_scale_init)},
            {"drop_path_rate", real(drop_path_rate)},
            {"n_lat", std::to_string(n_lat)},
            {"n_lon", std::to_string(n_lon)}};
  }

  std::string to_text() const {
    std::string s;
    for (const auto& [k, v] : to_pairs()) s += k + "=" + v + "\n";
    return s;
  }

  /// Sets one field from its canonical key; unknown keys throw.
  void set(const std::string& key, const std::string& value) {
    auto u = [&](const std::string& v) -> std::size_t {
      std::size_t pos = 0;
      const unsigned long long x = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("model config: bad integer for " + key + ": " + v);
      return static_cast<std::size_t>(x);
    };
    auto list = [&](const std::string& v) {
      std::vector<std::size_t> out;
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) out.push_back(u(item));
      return out;
    };
    try {
      if (key == "in_channels") in_channels = u(value);
      else if (key == "out_channels") out_channels = u(value);
      else if (key == "stage_dims") stage_dims = list(value);
      else if (key == "depths") depths = list(value);
      else if (key == "stem_kernel") stem_kernel = u(value);
      else if (key == "padding") padding_mode = parse_padding_mode(value);
      else if (key == "se") {
        if (value != "true" && value != "false")
          throw std::invalid_argument("model config: se must be true|false, got " + value);
        se_enabled = value == "true";
      } else if (key == "reduction_ratio") reduction_ratio = u(value);
      else if (key == "layer_scale_init") layer_scale_init = std::stod(value);
      else if (key == "drop_path_rate") drop_path_rate = std::stod(value);
      else if (key == "n_lat") n_lat = u(value);
      else if (key == "n_lon") n_lon = u(value);
      else throw std::invalid_argument("model config: unknown key '" + key + "'");
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const std::invalid_argument*>(&e) && std::string(e.what()).rfind("model config", 0) == 0)
        throw;
      throw std::invalid_argument("model config: bad value for " + key + ": '" + value + "'");
    }
  }

  static ModelConfig from_text(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("model config: malformed line '" + line + "'");
      c.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return c;
  }

  /// Name of the first field (canonical order) that differs, or "" when equal.
  std::string first_difference(const ModelConfig& o) const {
    const auto a = to_pairs(), b = o.to_pairs();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].second != b[i].second) return a[i].first;
    return {};
  }

  bool operator==(const ModelConfig& o) const { return first_difference(o).empty(); }
};

/// Closed-form parameter count (see the table at the top of this file).
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const auto& d = c.stage_dims;
  const std::size_t k = c.stem_kernel;
  std::size_t n = d[0] * c.in_channels * k * k + 3 * d[0];
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i) n += 2 * d[i - 1] + 9 * d[i] * d[i - 1] + d[i];
    const std::size_t ch = d[i];
    std::size_t block = 50 * ch + 2 * ch + (4 * ch * ch + 4 * ch) + (4 * ch * ch + ch) + ch;
    if (c.se_enabled) {
      const std::size_t r = std::max<std::size_t>(ch / c.reduction_ratio, 1);
      block += 2 * r * ch + r + ch;
    }
    n += c.depths[i] * block;
  }
  const std::size_t dl = d.back();
  n += 9 * dl * dl + dl + c.out_channels * dl + c.out_channels;
  return n;
}

template <class T>
class KarinaModel {
 public:
  /// Fresh network, initialized deterministically from `seed`.
  static KarinaModel build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    KarinaModel m;
    m.config_ = config;
    std::mt19937_64 rng(seed);
    ParamFactory<T> f(m.params_, rng);
    m.assemble(f);
    return m;
  }

  /// Network over existing tensors looked up by parameter name. Every name the
  /// config needs must be present and no extra names are accepted.
  static KarinaModel from_parameters(const ModelConfig& config,
                                     const std::map<std::string, Tensor<T>>& tensors) {
    config.validate();
    KarinaModel m;
    m.config_ = config;
    ParamFactory<T> f(m.params_, tensors);
    m.assemble(f);
    if (m.params_.size() != tensors.size()) {
      for (const auto& [name, t] : tensors)
        if (!m.find(name)) throw std::invalid_argument("unexpected parameter '" + name + "'");
    }
    return m;
  }

  const ModelConfig& config() const { return config_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  const Parameter<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Same values (shared storage), independent gradient slots.
  KarinaModel replica() const {
    std::map<std::string, Tensor<T>> m;
    for (const auto& p : params_) m.emplace(p.name, p.tensor.replica());
    auto r = from_parameters(config_, m);
    r.mode_ = mode_;
    return r;
  }

  /// Deep copy with values converted to precision U.
  template <class U>
  KarinaModel<U> cast() const {
    std::map<std::string, Tensor<U>> m;
    for (const auto& p : params_) {
      std::vector<U> v(p.tensor.data().begin(), p.tensor.data().end());
      m.emplace(p.name, Tensor<U>::parameter(p.tensor.shape(), std::move(v)));
    }
    auto r = KarinaModel<U>::from_parameters(config_, m);
    r.set_mode(mode_);
    return r;
  }

  KarinaModel clone() const { return cast<T>(); }

  /// One-step prediction x[in_channels,H,W] -> [out_channels,H,W] in normalized space.
  /// `rng` drives drop path and is only consulted in train mode.
  Tensor<T> forward(const Tensor<T>& x, std::mt19937_64* rng = nullptr) const {
    if (x.rank() != 3 || x.dim(0) != config_.in_channels)
      throw ShapeError("forward: expected [" + std::to_string(config_.in_channels) +
                       ",H,W] input, got " + to_string(x.shape()));
    if ((config_.n_lat && x.dim(1) != config_.n_lat) || (config_.n_lon && x.dim(2) != config_.n_lon))
      throw ShapeError("forward: input grid " + std::to_string(x.dim(1)) + "x" +
                       std::to_string(x.dim(2)) + " does not match model grid " +
                       std::to_string(config_.n_lat) + "x" + std::to_string(config_.n_lon));
    if (config_.padding_mode == PaddingMode::Geocyclic && x.dim(2) % 2 != 0)
      throw ShapeError("forward: geocyclic padding needs an even longitude count");
    Tensor<T> y = stem_norm_(stem_(x));
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      if (s > 0) y = scales_[s - 1](y);
      for (const auto& b : stages_[s]) y = b(y, mode_, rng);
    }
    return head_(final_(y));
  }

 private:
  void assemble(ParamFactory<T>& f) {
    const auto& c = config_;
    const auto mode = c.padding_mode;
    stem_ = Conv2d<T>::build({c.in_channels, c.stage_dims[0], c.stem_kernel, 1, mode}, f, "stem.conv");
    stem_norm_ = LayerNorm<T>::build(c.stage_dims[0], f, "stem.norm");
    std::size_t total_blocks = 0;
    for (auto d : c.depths) total_blocks += d;
    std::size_t block_index = 0;
    stages_.assign(c.stage_dims.size(), {});
    for (std::size_t s = 0; s < c.stage_dims.size(); ++s) {
      const std::string prefix = "stages." + std::to_string(s);
      if (s > 0)
        scales_.push_back(DepthScale<T>::build(c.stage_dims[s - 1], c.stage_dims[s], mode, f, prefix + ".scale"));
      for (std::size_t b = 0; b < c.depths[s]; ++b, ++block_index) {
        BlockSpec bs;
        bs.dim = c.stage_dims[s];
        bs.layer_scale_init = c.layer_scale_init;
        bs.drop_path_rate = total_blocks > 1 ? c.drop_path_rate * static_cast<double>(block_index) /
                                                   static_cast<double>(total_blocks - 1)
                                             : c.drop_path_rate;
        bs.se_enabled = c.se_enabled;
        bs.reduction_ratio = c.reduction_ratio;
        bs.padding_mode = mode;
        stages_[s].push_back(ConvNextBlock<T>::build(bs, f, prefix + ".blocks." + std::to_string(b)));
      }
    }
    const std::size_t dl = c.stage_dims.back();
    final_ = Conv2d<T>::build({dl, dl, 3, 1, mode}, f, "final.conv");
    head_ = Conv2d<T>::build({dl, c.out_channels, 1, 1, mode}, f, "head.conv");
  }

  ModelConfig config_;
  Mode mode_ = Mode::Eval;
  std::vector<Parameter<T>> params_;
  Conv2d<T> stem_;
  LayerNorm<T> stem_norm_;
  std::vector<DepthScale<T>> scales_;
  std::vector<std::vector<ConvNextBlock<T>>> stages_;
  Conv2d<T> final_, head_;
};

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   "KRNA"                      4 bytes
//   version                     u32 (= 1)
//   config length, config text  u32 + bytes (ModelConfig::to_text)
//   per parameter, model order:
//     name length, name         u32 + bytes
//     rank, extents             u32 + rank * u32
//     values                    numel * f32
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
std::size_t checkpoint_size(const KarinaModel<T>& model) {
  std::size_t n = 4 + 4 + 4 + model.config().to_text().size();
  for (const auto& p : model.parameters())
    n += 4 + p.name.size() + 4 + 4 * p.tensor.rank() + 4 * p.tensor.numel();
  return n;
}

template <class T>
void save_checkpoint(const KarinaModel<T>& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write("KRNA", 4);
  io::put_u32(os, kCheckpointVersion);
  const std::string cfg = model.config().to_text();
  io::put_u32(os, static_cast<std::uint32_t>(cfg.size()));
  io::put_bytes(os, cfg);
  std::vector<float> buf;
  for (const auto& p : model.parameters()) {
    io::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    io::put_bytes(os, p.name);
    io::put_u32(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto e : p.tensor.shape()) io::put_u32(os, static_cast<std::uint32_t>(e));
    buf.assign(p.tensor.data().begin(), p.tensor.data().end());
    io::put_f32_array(os, buf.data(), buf.size());
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

template <class T = float>
KarinaModel<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  io::Reader r(is, path.string());
  if (r.bytes(4, "magic") != "KRNA") throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = r.u32("config length");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_text(r.bytes(cfg_len, "config block"));
  } catch (const std::invalid_argument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  std::map<std::string, Tensor<T>> tensors;
  std::vector<float> buf;
  while (!r.at_end()) {
    const auto name = r.bytes(r.u32("parameter name length"), "parameter name");
    const auto rank = r.u32("parameter rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.u32("parameter extent");
    buf.resize(karina::numel(shape));
    r.f32_array(buf.data(), buf.size(), "parameter values");
    if (!tensors.emplace(name, Tensor<T>::parameter(shape, std::vector<T>(buf.begin(), buf.end()))).second)
      throw FormatError(path.string() + ": duplicate parameter '" + name + "'");
  }
  try {
    auto m = KarinaModel<T>::from_parameters(cfg, tensors);
    return m;
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": parameter set does not match config: " + e.what());
  }
}

/// Loads and requires the stored config to equal `expected`; the error names
/// the first divergent field.
template <class T = float>
KarinaModel<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  auto m = load_checkpoint<T>(path);
  const auto diff = m.config().first_difference(expected);
  if (!diff.empty()) {
    std::string got, want;
    for (const auto& [k, v] : m.config().to_pairs())
      if (k == diff) got = v;
    for (const auto& [k, v] : expected.to_pairs())
      if (k == diff) want = v;
    throw FormatError(path.string() + ": config mismatch in field '" + diff + "' (checkpoint " + got +
                      ", expected " + want + ")");
  }
  return m;
}

}  // namespace karina
