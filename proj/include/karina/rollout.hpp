#pragma once

// Autoregressive multi-day forecasts and drift diagnostics.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "karina/data.hpp"
#include "karina/model.hpp"

namespace karina {

struct ChannelStats {
  double mean = 0.0, stdev = 0.0, min = 0.0, max = 0.0;
};

/// Latitude-weighted mean and std plus extremes of one plane.
inline ChannelStats channel_stats(const float* plane, const GridSpec& g) {
  double s = 0.0, mn = std::numeric_limits<double>::infinity(), mx = -mn;
  for (std::size_t j = 0; j < g.n_lat; ++j)
    for (std::size_t i = 0; i < g.n_lon; ++i) {
      const double v = plane[j * g.n_lon + i];
      s += g.row_weights[j] * v;
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
  const double n = static_cast<double>(g.points());
  const double mean = s / n;
  double ss = 0.0;
  for (std::size_t j = 0; j < g.n_lat; ++j)
    for (std::size_t i = 0; i < g.n_lon; ++i) {
      const double d = plane[j * g.n_lon + i] - mean;
      ss += g.row_weights[j] * d * d;
    }
  return {mean, std::sqrt(ss / n), mn, mx};
}

struct ForecastSeries {
  std::int32_t init_date = 0;
  std::vector<std::string> channels;
  std::size_t n_lat = 0, n_lon = 0;
  NormStats stats;
  std::string checkpoint_id;
  std::vector<float> init_state;              // normalized
  std::vector<std::vector<float>> states;     // normalized, leads 1..L
  std::vector<std::vector<float>> steps;      // denormalized, leads 1..L
  bool blowup = false;
  std::size_t blowup_step = 0;                // lead at which the tripwire fired
  std::string blowup_reason;

  std::size_t horizon() const { return steps.size(); }
  std::size_t plane() const { return n_lat * n_lon; }
  GridSpec grid() const { return GridSpec::regular(n_lat, n_lon); }

  const std::vector<float>& last_state() const { return states.empty() ? init_state : states.back(); }

  /// Denormalized steps as a grid file, one time entry per lead.
  GridFile to_grid_file() const {
    GridFile g;
    g.channels = channels;
    g.n_lat = n_lat;
    g.n_lon = n_lon;
    for (std::size_t k = 0; k < steps.size(); ++k) {
      g.dates.push_back(init_date + static_cast<std::int32_t>(k + 1));
      g.data.insert(g.data.end(), steps[k].begin(), steps[k].end());
    }
    return g;
  }
};

struct RolloutOptions {
  std::size_t horizon = 1;
  /// Channels reset to their initial (true) values after every step.
  std::vector<std::size_t> static_channels;
  /// Channels overwritten from `forcing` after every step.
  std::vector<std::size_t> forced_channels;
  /// Normalized true frame at an absolute date (days since 1970-01-01).
  std::function<std::vector<float>(std::int32_t)> forcing;
  double blowup_std = 100.0;
  std::string checkpoint_id;
};

/// Iterates the one-step model from a normalized initial state.
template <class T>
ForecastSeries rollout(const KarinaModel<T>& model, const std::vector<float>& init_state, std::int32_t init_date,
                       const NormStats& stats, const std::vector<std::string>& channels, std::size_t n_lat,
                       std::size_t n_lon, const RolloutOptions& opt) {
  if (opt.horizon < 1) throw std::invalid_argument("rollout: horizon must be >= 1");
  const std::size_t C = model.config().in_channels;
  if (model.config().out_channels != C)
    throw std::invalid_argument("rollout: model must map its state onto itself (in == out channels)");
  if (channels.size() != C || init_state.size() != C * n_lat * n_lon)
    throw ShapeError("rollout: initial state does not match the model's " + std::to_string(C) + " channels");
  for (auto c : opt.static_channels)
    if (c >= C) throw std::invalid_argument("rollout: static channel index out of range");
  for (auto c : opt.forced_channels)
    if (c >= C) throw std::invalid_argument("rollout: forced channel index out of range");
  if (!opt.forced_channels.empty() && !opt.forcing)
    throw std::invalid_argument("rollout: forced channels need a forcing source");

  ForecastSeries s;
  s.init_date = init_date;
  s.channels = channels;
  s.n_lat = n_lat;
  s.n_lon = n_lon;
  s.stats = stats;
  s.checkpoint_id = opt.checkpoint_id;
  s.init_state = init_state;
  const GridSpec g = GridSpec::regular(n_lat, n_lon);
  const std::size_t P = n_lat * n_lon;

  auto m = model.replica();
  m.set_mode(Mode::Eval);
  NoRecord guard;
  std::vector<float> state = init_state;
  for (std::size_t step = 1; step <= opt.horizon; ++step) {
    std::vector<float> next;
    try {
      Tensor<T> x(Shape{C, n_lat, n_lon}, std::vector<T>(state.begin(), state.end()));
      const auto y = m.forward(x);
      next.assign(y.data().begin(), y.data().end());
    } catch (const NonFiniteError& e) {
      s.blowup = true;
      s.blowup_step = step;
      s.blowup_reason = "non-finite value in " + e.op();
      break;
    }
    for (auto c : opt.static_channels)
      std::copy(init_state.begin() + static_cast<std::ptrdiff_t>(c * P),
                init_state.begin() + static_cast<std::ptrdiff_t>((c + 1) * P), next.begin() + static_cast<std::ptrdiff_t>(c * P));
    if (!opt.forced_channels.empty()) {
      const auto truth = opt.forcing(init_date + static_cast<std::int32_t>(step));
      if (truth.size() != next.size()) throw ShapeError("rollout: forcing frame has the wrong size");
      for (auto c : opt.forced_channels)
        std::copy(truth.begin() + static_cast<std::ptrdiff_t>(c * P),
                  truth.begin() + static_cast<std::ptrdiff_t>((c + 1) * P), next.begin() + static_cast<std::ptrdiff_t>(c * P));
    }
    std::string reason;
    for (std::size_t c = 0; c < C && reason.empty(); ++c) {
      const auto st = channel_stats(next.data() + c * P, g);
      if (!std::isfinite(st.stdev) || !std::isfinite(st.mean)) reason = "non-finite state in channel " + channels[c];
      else if (st.stdev > opt.blowup_std) reason = "normalized std above " + std::to_string(opt.blowup_std) + " in channel " + channels[c];
    }
    std::vector<float> phys = next;
    stats.denormalize(phys.data(), P);
    s.states.push_back(next);
    s.steps.push_back(std::move(phys));
    if (!reason.empty()) {
      s.blowup = true;
      s.blowup_step = step;
      s.blowup_reason = reason;
      break;
    }
    state = std::move(next);
  }
  return s;
}

struct DriftRow {
  std::size_t step = 0;
  std::string channel;
  ChannelStats normalized;
};

/// Per-lead, per-channel weighted mean/std and extremes of the normalized states.
inline std::vector<DriftRow> drift_report(const ForecastSeries& s) {
  const GridSpec g = s.grid();
  std::vector<DriftRow> rows;
  for (std::size_t k = 0; k < s.states.size(); ++k)
    for (std::size_t c = 0; c < s.channels.size(); ++c)
      rows.push_back({k + 1, s.channels[c], channel_stats(s.states[k].data() + c * s.plane(), g)});
  return rows;
}

inline std::string drift_csv(const std::vector<DriftRow>& rows) {
  std::ostringstream os;
  os << "step,channel,mean,std,min,max\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g,%.9g\n", r.step, r.channel.c_str(), r.normalized.mean,
                  r.normalized.stdev, r.normalized.min, r.normalized.max);
    os << buf;
  }
  return os.str();
}

}  // namespace karina
