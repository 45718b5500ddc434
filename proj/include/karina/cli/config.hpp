#pragma once

// Plain-text key=value run configuration with a closed key set.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace karina::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every accepted key with its default value.
inline const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> d{
      {"seed", "0"},
      {"threads", "1"},
      {"data.source", "synthetic"},
      {"data.train", ""},
      {"data.val", ""},
      {"data.test", ""},
      {"data.climatology", ""},
      {"data.static_channels", "auto"},
      {"data.forced_channels", "auto"},
      {"synthetic.n_lat", "16"},
      {"synthetic.n_lon", "32"},
      {"synthetic.start_date", "2018-01-01"},
      {"synthetic.train_days", "300"},
      {"synthetic.val_days", "0"},
      {"synthetic.test_days", "60"},
      {"synthetic.clim_days", "731"},
      {"synthetic.blob_channels", "2"},
      {"synthetic.blobs_per_channel", "3"},
      {"synthetic.tilt", "90"},
      {"synthetic.speed", "10"},
      {"synthetic.width_min", "15"},
      {"synthetic.width_max", "30"},
      {"synthetic.noise", "0"},
      {"synthetic.seasonal_amplitude", "2"},
      {"model.stage_dims", "96,192,384,768"},
      {"model.depths", "3,3,9,3"},
      {"model.stem_kernel", "3"},
      {"model.padding", "geocyclic"},
      {"model.se", "true"},
      {"model.reduction_ratio", "4"},
      {"model.layer_scale_init", "1e-6"},
      {"model.drop_path_rate", "0"},
      {"train.lr", "0.001"},
      {"train.lr_min", "0"},
      {"train.epochs", "150"},
      {"train.batch_size", "16"},
      {"train.weight_decay", "0.05"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.999"},
      {"train.eps", "1e-8"},
      {"train.lat_weighted_loss", "false"},
      {"train.exclude_static_loss", "false"},
      {"finetune.checkpoint", ""},
      {"finetune.phases", "0,12@0.005;0,6,12,18@0.0025;0-23@0.0001"},
      {"finetune.epochs", "1"},
      {"eval.checkpoint", ""},
      {"eval.norm_stats", ""},
      {"eval.max_lead", "7"},
      {"eval.forecast", "model"},
      {"eval.weighted", "true"},
      {"eval.persistence", "true"},
      {"eval.save_fields", "false"},
      {"rollout.checkpoint", ""},
      {"rollout.norm_stats", ""},
      {"rollout.init_index", "0"},
      {"rollout.horizon", "180"},
      {"rollout.single_file", "true"},
      {"rollout.inject_forced", "false"},
      {"ablate.leads", "1,3,5,7"},
      {"ablate.kernel_sweep", "false"},
      {"ablate.circular", "true"},
      {"ablate.pole_rows", "5"},
      {"report.wall_time", "false"},
  };
  return d;
}

class RunConfig {
 public:
  RunConfig() : values_(config_defaults()) {}

  /// Parses key=value lines; blank lines and lines starting with '#' are skipped.
  static RunConfig from_text(const std::string& text, const std::string& source = "config") {
    RunConfig c;
    std::istringstream is(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      ++n;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(source + ":" + std::to_string(n) + ": expected key=value, got '" + line + "'");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return from_text(ss.str(), path.string());
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// "key=value" override as given on the command line.
  void set_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::int64_t integer(const std::string& key) const {
    const auto& v = str(key);
    try {
      std::size_t pos = 0;
      const long long x = std::stoll(v, &pos);
      if (pos == v.size()) return x;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }

  std::size_t count(const std::string& key) const {
    const auto x = integer(key);
    if (x < 0) throw ConfigError(key + ": must be >= 0, got " + std::to_string(x));
    return static_cast<std::size_t>(x);
  }

  double real(const std::string& key) const {
    const auto& v = str(key);
    try {
      std::size_t pos = 0;
      const double x = std::stod(v, &pos);
      if (pos == v.size()) return x;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }

  bool flag(const std::string& key) const {
    const auto& v = str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }

  std::vector<std::string> list(const std::string& key, char sep = ',') const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, sep))
      if (!trim(item).empty()) out.push_back(trim(item));
    return out;
  }

  std::vector<std::size_t> count_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& s : list(key)) {
      try {
        std::size_t pos = 0;
        const unsigned long long x = std::stoull(s, &pos);
        if (pos == s.size() && s[0] != '-') {
          out.push_back(static_cast<std::size_t>(x));
          continue;
        }
      } catch (const std::exception&) {
      }
      throw ConfigError(key + ": expected a list of non-negative integers, got '" + str(key) + "'");
    }
    return out;
  }

  /// ISO date (YYYY-MM-DD) as days since 1970-01-01.
  std::int32_t date(const std::string& key) const {
    const auto& v = str(key);
    int y = 0;
    unsigned m = 0, d = 0;
    char a = 0, b = 0;
    std::istringstream is(v);
    if (is >> y >> a >> m >> b >> d && a == '-' && b == '-' && is.peek() == std::char_traits<char>::eof()) {
      const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
      if (ymd.ok()) return static_cast<std::int32_t>(std::chrono::sys_days{ymd}.time_since_epoch().count());
    }
    throw ConfigError(key + ": expected a YYYY-MM-DD date, got '" + v + "'");
  }

  /// Sorted key=value lines covering every key.
  std::string resolved_text() const {
    std::string s;
    for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
    return s;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
};

inline std::string format_date(std::int32_t days) {
  const std::chrono::year_month_day ymd{std::chrono::sys_days{std::chrono::days{days}}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

}  // namespace karina::cli
