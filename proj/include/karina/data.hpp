#pragma once

// Gridded binary files, z-score statistics, paired training views and the
// synthetic spherical generator.
//
// GridFile layout (little-endian):
//   "GFLD"                                   4 bytes
//   version, n_time, n_channel, n_lat, n_lon 5 x u32
//   per channel: name length, name          u32 + bytes
//   dates                                    n_time x i32 (days since 1970-01-01)
//   payload                                  f32, time-major then channel, lat, lon

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "karina/grid.hpp"
#include "karina/io.hpp"

namespace karina {

inline constexpr std::uint32_t kGridFileVersion = 1;

struct GridFile {
  std::vector<std::string> channels;
  std::vector<std::int32_t> dates;  // days since 1970-01-01
  std::size_t n_lat = 0, n_lon = 0;
  std::vector<float> data;

  std::size_t n_time() const { return dates.size(); }
  std::size_t n_channel() const { return channels.size(); }
  std::size_t plane() const { return n_lat * n_lon; }
  std::size_t frame_size() const { return n_channel() * plane(); }

  const float* frame(std::size_t t) const { return data.data() + t * frame_size(); }
  float* frame(std::size_t t) { return data.data() + t * frame_size(); }
  std::vector<float> frame_copy(std::size_t t) const {
    return {frame(t), frame(t) + frame_size()};
  }

  /// Index of a named channel; throws when absent.
  std::size_t channel_index(const std::string& name) const {
    for (std::size_t c = 0; c < channels.size(); ++c)
      if (channels[c] == name) return c;
    throw std::invalid_argument("grid file has no channel '" + name + "'");
  }
  bool has_channel(const std::string& name) const {
    return std::find(channels.begin(), channels.end(), name) != channels.end();
  }

  GridSpec grid() const { return GridSpec::regular(n_lat, n_lon); }

  /// Frames [t0, t1) as a new file.
  GridFile slice(std::size_t t0, std::size_t t1) const {
    if (t0 > t1 || t1 > n_time())
      throw std::out_of_range("grid file slice [" + std::to_string(t0) + "," + std::to_string(t1) +
                              ") outside " + std::to_string(n_time()) + " frames");
    GridFile g;
    g.channels = channels;
    g.n_lat = n_lat;
    g.n_lon = n_lon;
    g.dates.assign(dates.begin() + static_cast<std::ptrdiff_t>(t0), dates.begin() + static_cast<std::ptrdiff_t>(t1));
    g.data.assign(data.begin() + static_cast<std::ptrdiff_t>(t0 * frame_size()),
                  data.begin() + static_cast<std::ptrdiff_t>(t1 * frame_size()));
    return g;
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& c : channels)
      if (!seen.insert(c).second) throw FormatError("duplicate channel name '" + c + "'");
    if (data.size() != n_time() * frame_size())
      throw FormatError("payload holds " + std::to_string(data.size()) + " values, expected " +
                        std::to_string(n_time() * frame_size()));
  }
};

inline std::size_t grid_file_size(const GridFile& g) {
  std::size_t names = 0;
  for (const auto& c : g.channels) names += c.size();
  return 4 * (6 + g.n_channel() + g.n_time()) + names + 4 * g.data.size();
}

inline void write_grid(const std::filesystem::path& path, const GridFile& g) {
  g.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open grid file for writing: " + path.string());
  os.write("GFLD", 4);
  io::put_u32(os, kGridFileVersion);
  io::put_u32(os, static_cast<std::uint32_t>(g.n_time()));
  io::put_u32(os, static_cast<std::uint32_t>(g.n_channel()));
  io::put_u32(os, static_cast<std::uint32_t>(g.n_lat));
  io::put_u32(os, static_cast<std::uint32_t>(g.n_lon));
  for (const auto& c : g.channels) {
    io::put_u32(os, static_cast<std::uint32_t>(c.size()));
    io::put_bytes(os, c);
  }
  for (auto d : g.dates) io::put_i32(os, d);
  io::put_f32_array(os, g.data.data(), g.data.size());
  if (!os) throw std::runtime_error("failed writing grid file " + path.string());
}

inline GridFile read_grid(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open grid file " + path.string());
  const std::string src = path.string();
  io::Reader r(is, src);
  if (r.bytes(4, "magic") != "GFLD") throw FormatError(src + ": not a grid file (bad magic)");
  const auto version = r.u32("version");
  if (version != kGridFileVersion)
    throw FormatError(src + ": unsupported grid file version " + std::to_string(version));
  GridFile g;
  const std::size_t n_time = r.u32("n_time"), n_channel = r.u32("n_channel");
  g.n_lat = r.u32("n_lat");
  g.n_lon = r.u32("n_lon");
  for (std::size_t c = 0; c < n_channel; ++c) g.channels.push_back(r.bytes(r.u32("channel name length"), "channel name"));
  g.dates.resize(n_time);
  for (auto& d : g.dates) d = r.i32("dates");
  std::set<std::string> seen;
  for (const auto& c : g.channels)
    if (!seen.insert(c).second) throw FormatError(src + ": duplicate channel name '" + c + "'");
  const std::size_t expected = n_time * n_channel * g.n_lat * g.n_lon;
  g.data.resize(expected);
  const std::size_t payload_at = r.offset();
  try {
    r.f32_array(g.data.data(), expected, "payload");
  } catch (const FormatError&) {
    throw FormatError(src + ": truncated payload, expected " + std::to_string(payload_at + 4 * expected) +
                      " bytes, file has " + std::to_string(std::filesystem::file_size(path)));
  }
  if (!r.at_end())
    throw FormatError(src + ": trailing bytes after payload, expected " +
                      std::to_string(payload_at + 4 * expected) + " bytes, file has " +
                      std::to_string(std::filesystem::file_size(path)));
  return g;
}

// ---------------------------------------------------------------------------
// Normalization

struct NormStats {
  std::vector<std::string> channels;
  std::vector<double> mean, stdev;
  std::vector<bool> constant;

  std::size_t size() const { return channels.size(); }

  void normalize(float* frame, std::size_t plane) const {
    for (std::size_t c = 0; c < size(); ++c) {
      const double m = mean[c], s = stdev[c];
      float* p = frame + c * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<float>((p[i] - m) / s);
    }
  }
  void denormalize(float* frame, std::size_t plane) const {
    for (std::size_t c = 0; c < size(); ++c) {
      const double m = mean[c], s = stdev[c];
      float* p = frame + c * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<float>(p[i] * s + m);
    }
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "channels=" << size() << "\n";
    for (std::size_t c = 0; c < size(); ++c)
      os << channels[c] << ".mean=" << mean[c] << "\n"
         << channels[c] << ".std=" << stdev[c] << "\n"
         << channels[c] << ".constant=" << (constant[c] ? "true" : "false") << "\n";
    return os.str();
  }

  static NormStats from_text(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    NormStats s;
    std::map<std::string, std::size_t> index;
    auto slot = [&](const std::string& name) {
      auto it = index.find(name);
      if (it != index.end()) return it->second;
      index[name] = s.channels.size();
      s.channels.push_back(name);
      s.mean.push_back(0.0);
      s.stdev.push_back(1.0);
      s.constant.push_back(false);
      return s.channels.size() - 1;
    };
    std::size_t declared = 0;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("norm stats: malformed line '" + line + "'");
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "channels") {
        declared = std::stoul(value);
        continue;
      }
      const auto dot = key.rfind('.');
      if (dot == std::string::npos) throw FormatError("norm stats: malformed key '" + key + "'");
      const std::size_t c = slot(key.substr(0, dot));
      const std::string field = key.substr(dot + 1);
      if (field == "mean") s.mean[c] = std::stod(value);
      else if (field == "std") s.stdev[c] = std::stod(value);
      else if (field == "constant") s.constant[c] = value == "true";
      else throw FormatError("norm stats: unknown field '" + field + "'");
    }
    if (declared != s.size())
      throw FormatError("norm stats: declared " + std::to_string(declared) + " channels, found " +
                        std::to_string(s.size()));
    return s;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write norm stats " + path.string());
    os << to_text();
  }
  static NormStats load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open norm stats " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return from_text(ss.str());
  }

  bool operator==(const NormStats& o) const {
    return channels == o.channels && mean == o.mean && stdev == o.stdev && constant == o.constant;
  }
};

/// Per-channel mean and population std over every frame of `train`.
/// Channels with zero spread get std = 1 and the constant flag.
inline NormStats compute_norm_stats(const GridFile& train) {
  if (train.n_time() == 0) throw std::invalid_argument("norm stats: empty training split");
  NormStats s;
  s.channels = train.channels;
  const std::size_t P = train.plane();
  const double n = static_cast<double>(train.n_time() * P);
  for (std::size_t c = 0; c < train.n_channel(); ++c) {
    double sum = 0.0;
    for (std::size_t t = 0; t < train.n_time(); ++t) {
      const float* p = train.frame(t) + c * P;
      for (std::size_t i = 0; i < P; ++i) sum += p[i];
    }
    const double mean = sum / n;
    double ss = 0.0;
    for (std::size_t t = 0; t < train.n_time(); ++t) {
      const float* p = train.frame(t) + c * P;
      for (std::size_t i = 0; i < P; ++i) ss += (p[i] - mean) * (p[i] - mean);
    }
    const double sd = std::sqrt(ss / n);
    const bool flat = !(sd > 1e-12 * std::max(1.0, std::abs(mean)));
    s.mean.push_back(mean);
    s.stdev.push_back(flat ? 1.0 : sd);
    s.constant.push_back(flat);
  }
  return s;
}

inline GridFile normalized(GridFile g, const NormStats& s) {
  if (g.channels != s.channels) throw std::invalid_argument("normalize: channel list differs from stats");
  for (std::size_t t = 0; t < g.n_time(); ++t) s.normalize(g.frame(t), g.plane());
  return g;
}

inline GridFile denormalized(GridFile g, const NormStats& s) {
  if (g.channels != s.channels) throw std::invalid_argument("denormalize: channel list differs from stats");
  for (std::size_t t = 0; t < g.n_time(); ++t) s.denormalize(g.frame(t), g.plane());
  return g;
}

// ---------------------------------------------------------------------------
// Synthetic spherical dynamics

inline const std::vector<std::string>& synthetic_channel_vocabulary() {
  static const std::vector<std::string> v{"Z500", "T850", "Q700", "U250", "V250", "T2M",
                                          "MSL",  "SP",   "TCWV", "SKT",  "Z850", "T500"};
  return v;
}

struct SyntheticSpec {
  std::size_t n_lat = 16, n_lon = 32;
  std::size_t n_days = 360;
  std::int32_t start_date = 17532;  // 2018-01-01
  std::uint64_t seed = 0;
  std::size_t n_blob_channels = 2;
  std::size_t blobs_per_channel = 3;
  double tilt_deg = 90.0;          // rotation axis tilt from the north pole toward 0E
  double speed_deg_per_day = 10.0; // solid-body angular speed
  double blob_width_min_deg = 15.0, blob_width_max_deg = 30.0;
  double noise_amplitude = 0.0;
  double seasonal_amplitude = 0.0;  // seasonal term added to blob channels
  bool orography = true;            // static "OROG" channel
  bool seasonal_channel = true;     // "TISR" annual-cycle channel

  void validate() const {
    if (n_lat == 0 || n_lon == 0 || n_lon % 2) throw std::invalid_argument("synthetic: n_lon must be even and the grid non-empty");
    if (n_days == 0) throw std::invalid_argument("synthetic: n_days must be >= 1");
    if (speed_deg_per_day == 0.0) throw std::invalid_argument("synthetic: speed must be nonzero");
    if (!(tilt_deg >= 0.0 && tilt_deg <= 90.0)) throw std::invalid_argument("synthetic: tilt must lie in [0, 90]");
    if (n_blob_channels > synthetic_channel_vocabulary().size())
      throw std::invalid_argument("synthetic: at most " + std::to_string(synthetic_channel_vocabulary().size()) +
                                  " blob channels");
    if (!(blob_width_min_deg > 0.0 && blob_width_max_deg >= blob_width_min_deg))
      throw std::invalid_argument("synthetic: blob widths must satisfy 0 < min <= max");
    if (noise_amplitude < 0.0) throw std::invalid_argument("synthetic: noise amplitude must be >= 0");
  }
};

/// Analytic field sampler; frames at fractional days give the sub-daily lag views.
class SyntheticField {
 public:
  explicit SyntheticField(const SyntheticSpec& spec) : spec_(spec), grid_(GridSpec::regular(spec.n_lat, spec.n_lon)) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double tilt = spec.tilt_deg * kDeg;
    ct_ = std::cos(tilt);
    st_ = std::sin(tilt);
    if (spec.tilt_deg == 0.0) ct_ = 1.0, st_ = 0.0;
    for (std::size_t c = 0; c < spec.n_blob_channels; ++c) {
      channels_.push_back(synthetic_channel_vocabulary()[c]);
      Channel ch;
      ch.base = 10.0 * static_cast<double>(c + 1);
      ch.phase = 2.0 * std::numbers::pi * u(rng);
      for (std::size_t b = 0; b < spec.blobs_per_channel; ++b) {
        Blob bl;
        double lat, lon;
        if (c == 0 && b == 0) {
          lat = 0.0;  // crosses both poles when the axis lies in the equator plane
          lon = 90.0;
        } else {
          lat = std::asin(2.0 * u(rng) - 1.0) / kDeg;
          lon = 360.0 * u(rng);
        }
        const auto [fl, fn] = to_frame(lat, lon);
        bl.sin_lat = std::sin(fl * kDeg);
        bl.cos_lat = std::cos(fl * kDeg);
        bl.lon = fn;
        bl.width = spec.blob_width_min_deg + (spec.blob_width_max_deg - spec.blob_width_min_deg) * u(rng);
        bl.amplitude = (b % 2 == 0 ? 1.0 : -1.0) * (5.0 + 5.0 * u(rng));
        ch.blobs.push_back(bl);
      }
      blob_channels_.push_back(ch);
    }
    if (spec.seasonal_channel) channels_.push_back("TISR");
    if (spec.orography) {
      channels_.push_back("OROG");
      build_orography(rng);
    }
    // Frame coordinates of every grid point.
    for (std::size_t j = 0; j < spec.n_lat; ++j)
      for (std::size_t i = 0; i < spec.n_lon; ++i) {
        const auto [fl, fn] = to_frame(grid_.lat_centers[j], grid_.lon_centers[i]);
        pt_sin_.push_back(std::sin(fl * kDeg));
        pt_cos_.push_back(std::cos(fl * kDeg));
        pt_lon_.push_back(fn);
        geo_sin_.push_back(std::sin(grid_.lat_centers[j] * kDeg));
      }
  }

  const std::vector<std::string>& channels() const { return channels_; }
  const GridSpec& grid() const { return grid_; }
  const SyntheticSpec& spec() const { return spec_; }

  /// Frame at `t` days after the start date (fractional t allowed).
  std::vector<float> frame(double t) const {
    const std::size_t P = grid_.points();
    std::vector<float> out(channels_.size() * P);
    const double shift = spec_.speed_deg_per_day * t;
    const double season = std::cos(2.0 * std::numbers::pi * (spec_.start_date + t) / 365.25);
    for (std::size_t c = 0; c < blob_channels_.size(); ++c) {
      const auto& ch = blob_channels_[c];
      const double seasonal_c =
          spec_.seasonal_amplitude *
          std::cos(2.0 * std::numbers::pi * (spec_.start_date + t) / 365.25 + ch.phase);
      for (std::size_t p = 0; p < P; ++p) {
        // Rotate the point back by the elapsed angle about the frame axis.
        const double rel = wrap360(pt_lon_[p] - shift);
        double v = ch.base + seasonal_c * geo_sin_[p];
        for (const auto& b : ch.blobs) {
          const double cosd = pt_sin_[p] * b.sin_lat + pt_cos_[p] * b.cos_lat * std::cos((rel - b.lon) * kDeg);
          const double d = std::acos(std::clamp(cosd, -1.0, 1.0)) / kDeg;
          v += b.amplitude * std::exp(-0.5 * (d / b.width) * (d / b.width));
        }
        out[c * P + p] = static_cast<float>(v);
      }
    }
    std::size_t c = blob_channels_.size();
    if (spec_.seasonal_channel) {
      // Insolation-like: equatorial maximum tilted toward the summer hemisphere.
      for (std::size_t j = 0; j < spec_.n_lat; ++j) {
        const double lat = grid_.lat_centers[j] * kDeg;
        const double v = 100.0 * (std::cos(lat) + 0.4 * std::sin(lat) * season);
        for (std::size_t i = 0; i < spec_.n_lon; ++i) out[c * P + j * spec_.n_lon + i] = static_cast<float>(v);
      }
      ++c;
    }
    if (spec_.orography) {
      std::copy(orography_.begin(), orography_.end(), out.begin() + static_cast<std::ptrdiff_t>(c * P));
      ++c;
    }
    if (spec_.noise_amplitude > 0.0) {
      // Seeded by the instant so every view of the same time agrees.
      const auto key = static_cast<std::uint64_t>(std::llround(t * 1440.0));
      std::seed_seq seq{static_cast<std::uint32_t>(spec_.seed), static_cast<std::uint32_t>(spec_.seed >> 32),
                        static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
      std::mt19937_64 rng(seq);
      std::normal_distribution<double> n(0.0, spec_.noise_amplitude);
      for (std::size_t k = 0; k < blob_channels_.size() * P; ++k) out[k] += static_cast<float>(n(rng));
    }
    return out;
  }

 private:
  static constexpr double kDeg = std::numbers::pi / 180.0;

  static double wrap360(double x) {
    double r = std::fmod(x, 360.0);
    if (r < 0.0) r += 360.0;
    return r;
  }

  /// (lat, lon) in degrees -> coordinates about the tilted rotation axis.
  std::pair<double, double> to_frame(double lat, double lon) const {
    if (st_ == 0.0) return {lat, wrap360(lon)};
    const double cl = std::cos(lat * kDeg), x = cl * std::cos(lon * kDeg), y = cl * std::sin(lon * kDeg),
                 z = std::sin(lat * kDeg);
    // Axis n = (sin tilt, 0, cos tilt); rotate n onto +z about the y axis.
    const double xr = x * ct_ - z * st_, zr = x * st_ + z * ct_;
    return {std::asin(std::clamp(zr, -1.0, 1.0)) / kDeg, wrap360(std::atan2(y, xr) / kDeg)};
  }

  /// Static terrain: seeded Gaussian ridges with centres uniform on the sphere.
  void build_orography(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    struct Ridge {
      double sin_lat, cos_lat, lon, width, height;
    };
    std::vector<Ridge> ridges(kRidges);
    for (auto& r : ridges) {
      const double lat = std::asin(2.0 * u(rng) - 1.0);
      r.sin_lat = std::sin(lat);
      r.cos_lat = std::cos(lat);
      r.lon = 360.0 * u(rng);
      r.width = 10.0 + 15.0 * u(rng);
      r.height = 0.5 + 1.5 * u(rng);
    }
    orography_.assign(grid_.points(), 0.0f);
    for (std::size_t j = 0; j < spec_.n_lat; ++j)
      for (std::size_t i = 0; i < spec_.n_lon; ++i) {
        const double sl = std::sin(grid_.lat_centers[j] * kDeg), cl = std::cos(grid_.lat_centers[j] * kDeg);
        double h = 0.0;
        for (const auto& r : ridges) {
          const double cosd = sl * r.sin_lat + cl * r.cos_lat * std::cos((grid_.lon_centers[i] - r.lon) * kDeg);
          const double d = std::acos(std::clamp(cosd, -1.0, 1.0)) / kDeg;
          h += r.height * std::exp(-0.5 * (d / r.width) * (d / r.width));
        }
        orography_[j * spec_.n_lon + i] = static_cast<float>(h);
      }
  }

  static constexpr std::size_t kRidges = 12;

  struct Blob {
    double sin_lat, cos_lat, lon, width, amplitude;
  };
  struct Channel {
    double base = 0.0, phase = 0.0;
    std::vector<Blob> blobs;
  };

  SyntheticSpec spec_;
  GridSpec grid_;
  double ct_ = 1.0, st_ = 0.0;
  std::vector<std::string> channels_;
  std::vector<Channel> blob_channels_;
  std::vector<double> pt_sin_, pt_cos_, pt_lon_, geo_sin_;
  std::vector<float> orography_;
};

/// Daily frames for days 0..n_days-1 after spec.start_date.
inline GridFile generate_synthetic(const SyntheticSpec& spec) {
  SyntheticField f(spec);
  GridFile g;
  g.channels = f.channels();
  g.n_lat = spec.n_lat;
  g.n_lon = spec.n_lon;
  g.data.reserve(spec.n_days * g.frame_size());
  for (std::size_t k = 0; k < spec.n_days; ++k) {
    g.dates.push_back(spec.start_date + static_cast<std::int32_t>(k));
    const auto fr = f.frame(static_cast<double>(k));
    g.data.insert(g.data.end(), fr.begin(), fr.end());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Training pairs

/// Indexable (input, target) source in normalized space.
struct PairSet {
  std::size_t count = 0;
  std::size_t channels = 0, n_lat = 0, n_lon = 0;
  /// Fills input and target frames for pair i.
  std::function<void(std::size_t, std::vector<float>&, std::vector<float>&)> fetch;
  /// Input time of pair i in days since 1970-01-01 and the target lead in days.
  std::function<double(std::size_t)> input_time;
  double lead_days = 1.0;

  std::size_t size() const { return count; }
  std::size_t frame_size() const { return channels * n_lat * n_lon; }
};

/// A normalized time series with optional sub-daily views. Pair sets share
/// the underlying frames and stay valid after the dataset is gone.
class Dataset {
 public:
  /// Daily frames only; lag 0 is the sole available view.
  Dataset(GridFile file, NormStats stats)
      : stats_(std::make_shared<const NormStats>(std::move(stats))),
        file_(std::make_shared<const GridFile>(normalized(std::move(file), *stats_))) {}

  /// Synthetic frames [first_day, first_day + n) of `field`, with analytic lag views.
  Dataset(std::shared_ptr<const SyntheticField> field, std::size_t first_day, std::size_t n, NormStats stats)
      : stats_(std::make_shared<const NormStats>(std::move(stats))), field_(std::move(field)), first_day_(first_day) {
    const auto& spec = field_->spec();
    GridFile g;
    g.channels = field_->channels();
    g.n_lat = spec.n_lat;
    g.n_lon = spec.n_lon;
    for (std::size_t k = 0; k < n; ++k) {
      g.dates.push_back(spec.start_date + static_cast<std::int32_t>(first_day + k));
      auto fr = field_->frame(static_cast<double>(first_day + k));
      g.data.insert(g.data.end(), fr.begin(), fr.end());
    }
    file_ = std::make_shared<const GridFile>(normalized(std::move(g), *stats_));
  }

  std::size_t size() const { return file_->n_time(); }
  const GridFile& normalized_file() const { return *file_; }
  const NormStats& stats() const { return *stats_; }
  GridSpec grid() const { return file_->grid(); }
  std::int32_t date(std::size_t k) const { return file_->dates.at(k); }

  bool supports_lag(int hours) const { return hours == 0 || (field_ && hours > 0 && hours < 24); }

  /// All (X(k), X(k + lead)) in date order.
  PairSet pairs(std::size_t lead) const {
    if (lead < 1) throw std::invalid_argument("pairs: lead must be >= 1");
    if (lead >= size())
      throw std::invalid_argument("pairs: lead " + std::to_string(lead) + " needs more than " +
                                  std::to_string(size()) + " frames");
    PairSet ps = shape();
    ps.count = size() - lead;
    ps.lead_days = static_cast<double>(lead);
    ps.fetch = [file = file_, lead](std::size_t i, std::vector<float>& in, std::vector<float>& tgt) {
      in.assign(file->frame(i), file->frame(i) + file->frame_size());
      tgt.assign(file->frame(i + lead), file->frame(i + lead) + file->frame_size());
    };
    ps.input_time = [file = file_](std::size_t i) { return static_cast<double>(file->dates[i]); };
    return ps;
  }

  /// One-day pairs for every lag in `lags` (hours), lag-major: |lags| * (N - 1) pairs.
  PairSet lag_augment(const std::vector<int>& lags) const {
    if (lags.empty()) throw std::invalid_argument("lag_augment: empty lag set");
    std::set<int> seen;
    for (int h : lags) {
      if (h < 0 || h > 23) throw std::invalid_argument("lag_augment: lag " + std::to_string(h) + "h outside [0, 23]");
      if (!seen.insert(h).second) throw std::invalid_argument("lag_augment: duplicate lag " + std::to_string(h) + "h");
      if (!supports_lag(h))
        throw std::invalid_argument("lag_augment: lag " + std::to_string(h) +
                                    "h unavailable (daily-only data supports lag 0)");
    }
    if (size() < 2) throw std::invalid_argument("lag_augment: need at least 2 frames");
    const std::size_t per = size() - 1;
    PairSet ps = shape();
    ps.count = per * lags.size();
    ps.fetch = [file = file_, stats = stats_, field = field_, first = first_day_, lags, per](
                   std::size_t i, std::vector<float>& in, std::vector<float>& tgt) {
      const int h = lags[i / per];
      const std::size_t k = i % per;
      if (h == 0) {
        in.assign(file->frame(k), file->frame(k) + file->frame_size());
        tgt.assign(file->frame(k + 1), file->frame(k + 1) + file->frame_size());
        return;
      }
      const double t = static_cast<double>(first + k) + h / 24.0;
      in = field->frame(t);
      tgt = field->frame(t + 1.0);
      stats->normalize(in.data(), file->plane());
      stats->normalize(tgt.data(), file->plane());
    };
    ps.input_time = [file = file_, lags, per](std::size_t i) {
      return static_cast<double>(file->dates[i % per]) + lags[i / per] / 24.0;
    };
    return ps;
  }

 private:
  PairSet shape() const {
    PairSet ps;
    ps.channels = file_->n_channel();
    ps.n_lat = file_->n_lat;
    ps.n_lon = file_->n_lon;
    return ps;
  }

  std::shared_ptr<const NormStats> stats_;
  std::shared_ptr<const GridFile> file_;
  std::shared_ptr<const SyntheticField> field_;
  std::size_t first_day_ = 0;
};

}  // namespace karina
