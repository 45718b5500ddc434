#pragma once

// The train / finetune / evaluate / rollout / ablate / generate commands.
// Each takes a resolved RunConfig and an output directory and returns after
// writing its artifacts; failures surface as exceptions (ConfigError for
// configuration problems, anything else for runtime failures).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "karina/cli/config.hpp"
#include "karina/data.hpp"
#include "karina/metrics.hpp"
#include "karina/model.hpp"
#include "karina/rollout.hpp"
#include "karina/training.hpp"

namespace karina::cli {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Data assembly

struct DataBundle {
  std::vector<std::string> channels;
  std::size_t n_lat = 0, n_lon = 0;
  GridFile train_raw, val_raw, test_raw;
  NormStats stats;
  std::shared_ptr<const SyntheticField> field;
  std::int32_t start_date = 0;
  std::unique_ptr<Dataset> train, val, test;
  std::vector<std::size_t> static_channels, forced_channels;

  /// Channels that are scored and fed to the loss (everything but static inputs).
  std::vector<std::size_t> scored_channels() const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < channels.size(); ++c)
      if (std::find(static_channels.begin(), static_channels.end(), c) == static_channels.end()) out.push_back(c);
    return out;
  }

  /// Raw (physical) truth frame at an absolute date.
  std::vector<float> raw_truth(std::int32_t date) const {
    if (field) return field->frame(static_cast<double>(date - start_date));
    for (const GridFile* g : {&test_raw, &val_raw, &train_raw})
      for (std::size_t t = 0; t < g->n_time(); ++t)
        if (g->dates[t] == date) return g->frame_copy(t);
    throw std::runtime_error("no truth frame available for " + format_date(date));
  }

  /// Series used to fit the climatology.
  GridFile climatology_source(const RunConfig& cfg) const {
    if (!cfg.str("data.climatology").empty()) return read_grid_key(cfg, "data.climatology");
    if (field) {
      GridFile g;
      g.channels = channels;
      g.n_lat = n_lat;
      g.n_lon = n_lon;
      const auto hist = static_cast<std::int64_t>(cfg.count("synthetic.clim_days"));
      for (std::int64_t k = -hist; k < 0; ++k) {
        g.dates.push_back(start_date + static_cast<std::int32_t>(k));
        const auto fr = field->frame(static_cast<double>(k));
        g.data.insert(g.data.end(), fr.begin(), fr.end());
      }
      g.dates.insert(g.dates.end(), train_raw.dates.begin(), train_raw.dates.end());
      g.data.insert(g.data.end(), train_raw.data.begin(), train_raw.data.end());
      return g;
    }
    return train_raw;
  }

  static GridFile read_grid_key(const RunConfig& cfg, const std::string& key) {
    const auto& path = cfg.str(key);
    if (path.empty()) throw ConfigError(key + ": missing data path");
    try {
      return read_grid(path);
    } catch (const std::exception& e) {
      throw std::runtime_error(key + ": " + e.what());
    }
  }
};

inline SyntheticSpec synthetic_spec(const RunConfig& cfg) {
  SyntheticSpec s;
  s.n_lat = cfg.count("synthetic.n_lat");
  s.n_lon = cfg.count("synthetic.n_lon");
  s.start_date = cfg.date("synthetic.start_date");
  s.n_days = cfg.count("synthetic.train_days") + cfg.count("synthetic.val_days") + cfg.count("synthetic.test_days");
  s.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  s.n_blob_channels = cfg.count("synthetic.blob_channels");
  s.blobs_per_channel = cfg.count("synthetic.blobs_per_channel");
  s.tilt_deg = cfg.real("synthetic.tilt");
  s.speed_deg_per_day = cfg.real("synthetic.speed");
  s.blob_width_min_deg = cfg.real("synthetic.width_min");
  s.blob_width_max_deg = cfg.real("synthetic.width_max");
  s.noise_amplitude = cfg.real("synthetic.noise");
  s.seasonal_amplitude = cfg.real("synthetic.seasonal_amplitude");
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

inline std::vector<std::size_t> resolve_channels(const RunConfig& cfg, const std::string& key,
                                                 const std::vector<std::string>& channels,
                                                 const std::vector<std::string>& auto_names,
                                                 const std::vector<bool>& auto_flags) {
  std::vector<std::size_t> out;
  const auto& v = cfg.str(key);
  if (v == "none" || v.empty()) return out;
  if (v == "auto") {
    for (std::size_t c = 0; c < channels.size(); ++c)
      if (std::find(auto_names.begin(), auto_names.end(), channels[c]) != auto_names.end() ||
          (c < auto_flags.size() && auto_flags[c]))
        out.push_back(c);
    return out;
  }
  for (const auto& name : cfg.list(key)) {
    auto it = std::find(channels.begin(), channels.end(), name);
    if (it == channels.end()) throw ConfigError(key + ": unknown channel '" + name + "'");
    out.push_back(static_cast<std::size_t>(it - channels.begin()));
  }
  return out;
}

/// Loads or generates the splits. `need_test` requires a test split.
inline DataBundle load_data(const RunConfig& cfg, bool need_test, const NormStats* stats_override = nullptr) {
  DataBundle b;
  const auto& source = cfg.str("data.source");
  if (source == "synthetic") {
    const auto spec = synthetic_spec(cfg);
    const std::size_t n_train = cfg.count("synthetic.train_days"), n_val = cfg.count("synthetic.val_days"),
                      n_test = cfg.count("synthetic.test_days");
    if (n_train < 2) throw ConfigError("synthetic.train_days: need at least 2 days");
    if (need_test && n_test < 2) throw ConfigError("synthetic.test_days: need at least 2 days");
    auto field = std::make_shared<const SyntheticField>(spec);
    const GridFile all = generate_synthetic(spec);
    b.field = field;
    b.start_date = spec.start_date;
    b.train_raw = all.slice(0, n_train);
    b.val_raw = all.slice(n_train, n_train + n_val);
    b.test_raw = all.slice(n_train + n_val, n_train + n_val + n_test);
  } else if (source == "file") {
    b.train_raw = DataBundle::read_grid_key(cfg, "data.train");
    if (!cfg.str("data.val").empty()) b.val_raw = DataBundle::read_grid_key(cfg, "data.val");
    if (need_test) b.test_raw = DataBundle::read_grid_key(cfg, "data.test");
    for (const GridFile* g : {&b.val_raw, &b.test_raw})
      if (g->n_time() && (g->channels != b.train_raw.channels || g->n_lat != b.train_raw.n_lat ||
                          g->n_lon != b.train_raw.n_lon))
        throw std::runtime_error("data.val/data.test: channels or grid differ from data.train");
  } else {
    throw ConfigError("data.source: expected synthetic or file, got '" + source + "'");
  }
  b.channels = b.train_raw.channels;
  b.n_lat = b.train_raw.n_lat;
  b.n_lon = b.train_raw.n_lon;
  if (b.n_lon % 2) throw std::runtime_error("data: longitude count must be even, got " + std::to_string(b.n_lon));
  b.stats = stats_override ? *stats_override : compute_norm_stats(b.train_raw);
  if (b.stats.channels != b.channels) throw std::runtime_error("norm stats: channel list differs from the data");
  b.static_channels = resolve_channels(cfg, "data.static_channels", b.channels, {"OROG", "LSM"}, b.stats.constant);
  b.forced_channels = resolve_channels(cfg, "data.forced_channels", b.channels, {"TISR"}, {});
  auto make = [&](const GridFile& raw) -> std::unique_ptr<Dataset> {
    if (raw.n_time() == 0) return nullptr;
    if (b.field) {
      const auto first = static_cast<std::size_t>(raw.dates.front() - b.start_date);
      return std::make_unique<Dataset>(b.field, first, raw.n_time(), b.stats);
    }
    return std::make_unique<Dataset>(raw, b.stats);
  };
  b.train = make(b.train_raw);
  b.val = make(b.val_raw);
  b.test = make(b.test_raw);
  if (need_test && !b.test) throw ConfigError("data.test: a test split is required");
  return b;
}

// ---------------------------------------------------------------------------
// Config translation

inline ModelConfig model_config(const RunConfig& cfg, const DataBundle& d) {
  ModelConfig m;
  try {
    m.in_channels = m.out_channels = d.channels.size();
    m.stage_dims = cfg.count_list("model.stage_dims");
    m.depths = cfg.count_list("model.depths");
    m.stem_kernel = cfg.count("model.stem_kernel");
    m.padding_mode = parse_padding_mode(cfg.str("model.padding"));
    m.se_enabled = cfg.flag("model.se");
    m.reduction_ratio = cfg.count("model.reduction_ratio");
    m.layer_scale_init = cfg.real("model.layer_scale_init");
    m.drop_path_rate = cfg.real("model.drop_path_rate");
    m.n_lat = d.n_lat;
    m.n_lon = d.n_lon;
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return m;
}

inline TrainConfig train_config(const RunConfig& cfg, const DataBundle& d) {
  TrainConfig t;
  t.lr = cfg.real("train.lr");
  t.lr_min = cfg.real("train.lr_min");
  t.epochs = cfg.count("train.epochs");
  t.batch_size = cfg.count("train.batch_size");
  t.adamw.weight_decay = cfg.real("train.weight_decay");
  t.adamw.beta1 = cfg.real("train.beta1");
  t.adamw.beta2 = cfg.real("train.beta2");
  t.adamw.eps = cfg.real("train.eps");
  t.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  t.threads = std::max<std::size_t>(1, cfg.count("threads"));
  t.lat_weighted_loss = cfg.flag("train.lat_weighted_loss");
  if (cfg.flag("train.exclude_static_loss")) t.loss_excluded_channels = d.static_channels;
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return t;
}

/// "0,12@0.005;0,6,12,18@0.0025;0-23@0.0001"
inline std::vector<FinetunePhase> parse_phases(const std::string& text) {
  std::vector<FinetunePhase> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (item.empty()) continue;
    const auto at = item.find('@');
    if (at == std::string::npos) throw ConfigError("finetune.phases: expected lags@lr, got '" + item + "'");
    FinetunePhase p;
    try {
      p.lr = std::stod(item.substr(at + 1));
      std::stringstream ls(item.substr(0, at));
      std::string tok;
      while (std::getline(ls, tok, ',')) {
        const auto dash = tok.find('-');
        if (dash == std::string::npos) {
          p.lags.push_back(std::stoi(tok));
        } else {
          const int a = std::stoi(tok.substr(0, dash)), b = std::stoi(tok.substr(dash + 1));
          for (int h = a; h <= b; ++h) p.lags.push_back(h);
        }
      }
      p.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("finetune.phases: bad phase '" + item + "': " + e.what());
    }
    out.push_back(p);
  }
  if (out.empty()) throw ConfigError("finetune.phases: no phases given");
  return out;
}

inline KarinaModel<float> load_model_key(const RunConfig& cfg, const std::string& key, const DataBundle& d) {
  const auto& path = cfg.str(key);
  if (path.empty()) throw ConfigError(key + ": missing checkpoint path");
  KarinaModel<float> m = [&] {
    try {
      return load_checkpoint<float>(path);
    } catch (const std::exception& e) {
      throw std::runtime_error(key + ": " + e.what());
    }
  }();
  const auto& c = m.config();
  if ((c.n_lat && c.n_lat != d.n_lat) || (c.n_lon && c.n_lon != d.n_lon))
    throw std::runtime_error("grid mismatch: checkpoint trained on " + std::to_string(c.n_lat) + "x" +
                             std::to_string(c.n_lon) + ", data is " + std::to_string(d.n_lat) + "x" +
                             std::to_string(d.n_lon));
  if (c.in_channels != d.channels.size())
    throw std::runtime_error("channel mismatch: checkpoint expects " + std::to_string(c.in_channels) +
                             " channels, data has " + std::to_string(d.channels.size()));
  return m;
}

inline std::optional<NormStats> stats_override(const RunConfig& cfg, const std::string& key) {
  if (cfg.str(key).empty()) return std::nullopt;
  try {
    return NormStats::load(cfg.str(key));
  } catch (const std::exception& e) {
    throw std::runtime_error(key + ": " + e.what());
  }
}

inline RolloutOptions rollout_options(const RunConfig& cfg, const DataBundle& d, std::size_t horizon) {
  RolloutOptions o;
  o.horizon = horizon;
  o.static_channels = d.static_channels;
  if (cfg.flag("rollout.inject_forced") && !d.forced_channels.empty()) {
    o.forced_channels = d.forced_channels;
    o.forcing = [&d](std::int32_t date) {
      auto f = d.raw_truth(date);
      d.stats.normalize(f.data(), d.n_lat * d.n_lon);
      return f;
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// Scoring

enum class ForecastSource { Model, Persistence, Truth };

inline ForecastSource parse_forecast_source(const std::string& s) {
  if (s == "model") return ForecastSource::Model;
  if (s == "persistence") return ForecastSource::Persistence;
  if (s == "truth") return ForecastSource::Truth;
  throw ConfigError("eval.forecast: expected model, persistence or truth, got '" + s + "'");
}

/// Physical-space forecasts at leads 1..L from test init k.
inline std::vector<std::vector<float>> forecast_frames(ForecastSource src, const KarinaModel<float>* model,
                                                       const DataBundle& d, const RunConfig& cfg, std::size_t k,
                                                       std::size_t max_lead) {
  std::vector<std::vector<float>> out;
  if (src == ForecastSource::Truth) {
    for (std::size_t l = 1; l <= max_lead; ++l) out.push_back(d.test_raw.frame_copy(k + l));
  } else if (src == ForecastSource::Persistence) {
    for (std::size_t l = 1; l <= max_lead; ++l) out.push_back(d.test_raw.frame_copy(k));
  } else {
    const auto s = rollout(*model, d.test->normalized_file().frame_copy(k), d.test->date(k), d.stats, d.channels,
                           d.n_lat, d.n_lon, rollout_options(cfg, d, max_lead));
    if (s.blowup)
      throw std::runtime_error("rollout from test index " + std::to_string(k) + " blew up at lead " +
                               std::to_string(s.blowup_step) + ": " + s.blowup_reason);
    out = s.steps;
  }
  return out;
}

struct LeadScores {
  std::vector<std::size_t> leads;
  std::vector<std::size_t> channels;                 // scored channel indices
  std::vector<std::vector<double>> rmse, acc, polar; // [lead][channel]
};

/// Scores forecasts from every test init with room for the longest lead.
inline LeadScores score(ForecastSource src, const KarinaModel<float>* model, const DataBundle& d, const RunConfig& cfg,
                        const std::vector<std::size_t>& leads, const ClimatologyTable* clim, bool weighted,
                        std::size_t pole_rows = 0) {
  LeadScores r;
  r.leads = leads;
  r.channels = d.scored_channels();
  const std::size_t max_lead = *std::max_element(leads.begin(), leads.end());
  if (d.test_raw.n_time() <= max_lead)
    throw std::runtime_error("test split has " + std::to_string(d.test_raw.n_time()) +
                             " frames, too few for lead " + std::to_string(max_lead));
  const std::size_t n_init = d.test_raw.n_time() - max_lead;
  const GridSpec g = GridSpec::regular(d.n_lat, d.n_lon);
  const std::size_t P = g.points(), L = leads.size(), C = r.channels.size();
  std::vector<std::vector<double>> rmse_sum(L, std::vector<double>(C, 0.0)), acc_sum = rmse_sum, polar_sum = rmse_sum;
  std::vector<std::vector<std::size_t>> acc_n(L, std::vector<std::size_t>(C, 0));
  const auto prows = pole_rows ? polar_rows(g, pole_rows) : std::vector<std::size_t>{};
  std::vector<double> f(P), t(P);
  for (std::size_t k = 0; k < n_init; ++k) {
    const auto frames = forecast_frames(src, model, d, cfg, k, max_lead);
    for (std::size_t li = 0; li < L; ++li) {
      const std::size_t lead = leads[li];
      const float* truth = d.test_raw.frame(k + lead);
      const double day = static_cast<double>(d.test_raw.dates[k + lead]);
      for (std::size_t ci = 0; ci < C; ++ci) {
        const std::size_t c = r.channels[ci];
        std::copy(frames[lead - 1].begin() + static_cast<std::ptrdiff_t>(c * P),
                  frames[lead - 1].begin() + static_cast<std::ptrdiff_t>((c + 1) * P), f.begin());
        std::copy(truth + c * P, truth + (c + 1) * P, t.begin());
        rmse_sum[li][ci] += weighted_rmse(f, t, g, weighted);
        if (pole_rows) polar_sum[li][ci] += weighted_rmse_rows(f, t, g, prows, weighted);
        if (clim) {
          try {
            acc_sum[li][ci] += acc(f, t, clim->plane_at(clim->channel_index(d.channels[c]), day), g, weighted);
            ++acc_n[li][ci];
          } catch (const MetricError&) {
          }
        }
      }
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.rmse = r.acc = r.polar = std::vector<std::vector<double>>(L, std::vector<double>(C, nan));
  for (std::size_t li = 0; li < L; ++li)
    for (std::size_t ci = 0; ci < C; ++ci) {
      r.rmse[li][ci] = rmse_sum[li][ci] / static_cast<double>(n_init);
      if (pole_rows) r.polar[li][ci] = polar_sum[li][ci] / static_cast<double>(n_init);
      if (acc_n[li][ci]) r.acc[li][ci] = acc_sum[li][ci] / static_cast<double>(acc_n[li][ci]);
    }
  return r;
}

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// Long form: channel, lead_days, metric, value.
inline std::string metrics_csv(const LeadScores& s, const DataBundle& d) {
  std::string out = "channel,lead_days,metric,value\n";
  for (std::size_t ci = 0; ci < s.channels.size(); ++ci)
    for (std::size_t li = 0; li < s.leads.size(); ++li) {
      const auto& name = d.channels[s.channels[ci]];
      out += name + "," + std::to_string(s.leads[li]) + ",rmse," + fmt(s.rmse[li][ci]) + "\n";
      out += name + "," + std::to_string(s.leads[li]) + ",acc," + fmt(s.acc[li][ci]) + "\n";
    }
  return out;
}

/// Wide form: one row per lead, one RMSE column per channel.
inline std::string rmse_vs_lead_csv(const LeadScores& s, const DataBundle& d) {
  std::string out = "lead_days";
  for (auto c : s.channels) out += "," + d.channels[c];
  out += "\n";
  for (std::size_t li = 0; li < s.leads.size(); ++li) {
    out += std::to_string(s.leads[li]);
    for (std::size_t ci = 0; ci < s.channels.size(); ++ci) out += "," + fmt(s.rmse[li][ci]);
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct CommandContext {
  RunConfig cfg;
  fs::path out;
  std::ostream* log = nullptr;

  void note(const std::string& s) const {
    if (log) *log << s << std::endl;
  }
};

inline ProgressFn epoch_logger(const CommandContext& ctx, const std::string& tag, std::size_t epochs) {
  if (!ctx.log) return {};
  return [&ctx, tag, epochs](const EpochRecord& r) {
    ctx.note(tag + " epoch " + std::to_string(r.epoch % epochs + 1) + "/" + std::to_string(epochs) +
             " lr=" + fmt(r.lr) + " train_loss=" + fmt(r.train_loss) +
             (std::isnan(r.val_loss) ? std::string() : " val_loss=" + fmt(r.val_loss)));
  };
}

inline void cmd_train(const CommandContext& ctx) {
  const auto& cfg = ctx.cfg;
  DataBundle d = load_data(cfg, false);
  const auto mc = model_config(cfg, d);
  const auto tc = train_config(cfg, d);
  auto model = KarinaModel<float>::build(mc, static_cast<std::uint64_t>(cfg.integer("seed")));
  model.set_mode(Mode::Train);
  const auto tp = d.train->pairs(1);
  std::optional<PairSet> vp;
  if (d.val && d.val->size() > 1) vp = d.val->pairs(1);
  ctx.note("train: " + std::to_string(tp.size()) + " pairs, " + std::to_string(model.parameter_count()) +
           " parameters");
  const auto report = train(model, tp, vp ? &*vp : nullptr, tc, epoch_logger(ctx, "train", tc.epochs));
  model.set_mode(Mode::Eval);
  save_checkpoint(model, ctx.out / "checkpoint.bin");
  d.stats.save(ctx.out / "norm_stats.txt");
  write_text(ctx.out / "train_report.csv", report.to_csv(cfg.flag("report.wall_time")));
}

inline void cmd_finetune(const CommandContext& ctx) {
  const auto& cfg = ctx.cfg;
  const auto phases = parse_phases(cfg.str("finetune.phases"));
  DataBundle d = load_data(cfg, false);
  auto model = load_model_key(cfg, "finetune.checkpoint", d);
  auto tc = train_config(cfg, d);
  tc.epochs = cfg.count("finetune.epochs");
  if (tc.epochs < 1) throw ConfigError("finetune.epochs: must be >= 1");
  for (const auto& p : phases)
    for (int h : p.lags)
      if (!d.train->supports_lag(h))
        throw std::runtime_error("finetune: lag " + std::to_string(h) +
                                 "h unavailable in the training data (daily-only files support lag 0)");
  std::optional<PairSet> vp;
  if (d.val && d.val->size() > 1) vp = d.val->pairs(1);
  model.set_mode(Mode::Train);
  const auto report =
      finetune(model, *d.train, vp ? &*vp : nullptr, phases, tc, epoch_logger(ctx, "finetune", tc.epochs));
  model.set_mode(Mode::Eval);
  save_checkpoint(model, ctx.out / "checkpoint.bin");
  d.stats.save(ctx.out / "norm_stats.txt");
  write_text(ctx.out / "finetune_report.csv", report.to_csv(cfg.flag("report.wall_time")));
}

inline void cmd_evaluate(const CommandContext& ctx) {
  const auto& cfg = ctx.cfg;
  const auto src = parse_forecast_source(cfg.str("eval.forecast"));
  const auto so = stats_override(cfg, "eval.norm_stats");
  DataBundle d = load_data(cfg, true, so ? &*so : nullptr);
  std::optional<KarinaModel<float>> model;
  if (src == ForecastSource::Model) model = load_model_key(cfg, "eval.checkpoint", d);
  const std::size_t max_lead = cfg.count("eval.max_lead");
  if (max_lead < 1) throw ConfigError("eval.max_lead: must be >= 1");
  std::vector<std::size_t> leads;
  for (std::size_t l = 1; l <= max_lead; ++l) leads.push_back(l);
  const bool weighted = cfg.flag("eval.weighted");
  const auto clim = fit_climatology(d.climatology_source(cfg));
  const auto s = score(src, model ? &*model : nullptr, d, cfg, leads, &clim, weighted);
  write_text(ctx.out / "metrics.csv", metrics_csv(s, d));
  write_text(ctx.out / "rmse_vs_lead.csv", rmse_vs_lead_csv(s, d));
  if (cfg.flag("eval.persistence")) {
    const auto p = score(ForecastSource::Persistence, nullptr, d, cfg, leads, &clim, weighted);
    write_text(ctx.out / "persistence_metrics.csv", metrics_csv(p, d));
  }
  if (cfg.flag("eval.save_fields")) {
    const auto frames = forecast_frames(src, model ? &*model : nullptr, d, cfg, 0, max_lead);
    GridFile g;
    g.channels = d.channels;
    g.n_lat = d.n_lat;
    g.n_lon = d.n_lon;
    for (std::size_t l = 1; l <= max_lead; ++l) {
      g.dates.push_back(d.test_raw.dates[0] + static_cast<std::int32_t>(l));
      g.data.insert(g.data.end(), frames[l - 1].begin(), frames[l - 1].end());
    }
    write_grid(ctx.out / "forecast_init0.grd", g);
  }
}

/// Returns false when the rollout hit the blow-up tripwire (outputs are still written).
inline bool cmd_rollout(const CommandContext& ctx) {
  const auto& cfg = ctx.cfg;
  const auto so = stats_override(cfg, "rollout.norm_stats");
  DataBundle d = load_data(cfg, true, so ? &*so : nullptr);
  auto model = load_model_key(cfg, "rollout.checkpoint", d);
  const std::size_t k = cfg.count("rollout.init_index");
  if (k >= d.test->size()) throw ConfigError("rollout.init_index: beyond the test split");
  const std::size_t horizon = cfg.count("rollout.horizon");
  if (horizon < 1) throw ConfigError("rollout.horizon: must be >= 1");
  auto opt = rollout_options(cfg, d, horizon);
  opt.checkpoint_id = cfg.str("rollout.checkpoint");
  const auto s = rollout(model, d.test->normalized_file().frame_copy(k), d.test->date(k), d.stats, d.channels,
                         d.n_lat, d.n_lon, opt);
  const GridFile g = s.to_grid_file();
  if (cfg.flag("rollout.single_file")) {
    write_grid(ctx.out / "forecast.grd", g);
  } else {
    for (std::size_t l = 0; l < g.n_time(); ++l) {
      char name[64];
      std::snprintf(name, sizeof name, "forecast_lead_%03zu.grd", l + 1);
      write_grid(ctx.out / name, g.slice(l, l + 1));
    }
  }
  write_text(ctx.out / "drift.csv", drift_csv(drift_report(s)));
  if (s.blowup) {
    ctx.note("rollout: blow-up at lead " + std::to_string(s.blowup_step) + ": " + s.blowup_reason);
    return false;
  }
  return true;
}

struct AblationVariant {
  std::string name;
  PaddingMode padding;
  bool se;
  std::size_t stem_kernel;
};

/// Trains and scores one variant with the shared budget and seed.
inline LeadScores run_variant(const CommandContext& ctx, const DataBundle& d, const AblationVariant& v,
                              const std::vector<std::size_t>& leads, std::size_t pole_rows,
                              const std::string& checkpoint_name) {
  const auto& cfg = ctx.cfg;
  auto mc = model_config(cfg, d);
  mc.padding_mode = v.padding;
  mc.se_enabled = v.se;
  mc.stem_kernel = v.stem_kernel;
  try {
    mc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto tc = train_config(cfg, d);
  auto model = KarinaModel<float>::build(mc, static_cast<std::uint64_t>(cfg.integer("seed")));
  model.set_mode(Mode::Train);
  ctx.note("ablate: training " + v.name);
  const auto report = train(model, d.train->pairs(1), nullptr, tc, epoch_logger(ctx, v.name, tc.epochs));
  model.set_mode(Mode::Eval);
  save_checkpoint(model, ctx.out / checkpoint_name);
  write_text(ctx.out / (fs::path(checkpoint_name).stem().string() + "_report.csv"),
             report.to_csv(cfg.flag("report.wall_time")));
  return score(ForecastSource::Model, &model, d, cfg, leads, nullptr, true, pole_rows);
}

inline std::string ablation_header(const DataBundle& d, const LeadScores& s, const std::string& first) {
  std::string h = first;
  for (auto c : s.channels)
    for (auto l : s.leads) h += "," + d.channels[c] + "_d" + std::to_string(l);
  return h + "\n";
}

inline std::string ablation_row(const std::string& label, const LeadScores& s) {
  std::string r = label;
  for (std::size_t ci = 0; ci < s.channels.size(); ++ci)
    for (std::size_t li = 0; li < s.leads.size(); ++li) r += "," + fmt(s.rmse[li][ci]);
  return r + "\n";
}

inline void cmd_ablate(const CommandContext& ctx) {
  const auto& cfg = ctx.cfg;
  DataBundle d = load_data(cfg, true);
  const auto leads = cfg.count_list("ablate.leads");
  if (leads.empty() || *std::min_element(leads.begin(), leads.end()) < 1)
    throw ConfigError("ablate.leads: need at least one lead >= 1");
  const std::size_t pole_rows = cfg.count("ablate.pole_rows");
  if (pole_rows < 1) throw ConfigError("ablate.pole_rows: must be >= 1");
  const std::size_t k = cfg.count("model.stem_kernel");

  const std::vector<AblationVariant> variants{{"plain", PaddingMode::Zero, false, k},
                                              {"padded", PaddingMode::Geocyclic, false, k},
                                              {"padded_senet", PaddingMode::Geocyclic, true, k}};
  std::vector<LeadScores> scores;
  for (const auto& v : variants) scores.push_back(run_variant(ctx, d, v, leads, pole_rows, "ablate_" + v.name + ".bin"));
  std::string csv = ablation_header(d, scores[0], "variant");
  for (std::size_t i = 0; i < variants.size(); ++i) csv += ablation_row(variants[i].name, scores[i]);
  write_text(ctx.out / "ablation.csv", csv);

  if (cfg.flag("ablate.circular")) {
    const auto circ = run_variant(ctx, d, {"circular", PaddingMode::CircularZeroPole, false, k}, leads, pole_rows,
                                  "ablate_circular.bin");
    std::string pc = "variant,channel,lead_days,global_rmse,polar_rmse\n";
    auto rows = [&](const std::string& name, const LeadScores& s) {
      for (std::size_t ci = 0; ci < s.channels.size(); ++ci)
        for (std::size_t li = 0; li < s.leads.size(); ++li)
          pc += name + "," + d.channels[s.channels[ci]] + "," + std::to_string(s.leads[li]) + "," +
                fmt(s.rmse[li][ci]) + "," + fmt(s.polar[li][ci]) + "\n";
    };
    rows("geocyclic", scores[1]);
    rows("circular", circ);
    write_text(ctx.out / "pole_comparison.csv", pc);
  }

  if (cfg.flag("ablate.kernel_sweep")) {
    std::string ks;
    for (std::size_t kernel : {3, 5, 7}) {
      const auto s = run_variant(ctx, d, {"stem_k" + std::to_string(kernel), PaddingMode::Geocyclic, true, kernel},
                                 leads, pole_rows, "ablate_stem_k" + std::to_string(kernel) + ".bin");
      if (ks.empty()) ks = ablation_header(d, s, "stem_kernel");
      ks += ablation_row(std::to_string(kernel), s);
    }
    write_text(ctx.out / "kernel_sweep.csv", ks);
  }
}

/// Writes the configured synthetic series (all splits) as one grid file.
inline void cmd_generate(const CommandContext& ctx) {
  const auto spec = synthetic_spec(ctx.cfg);
  write_grid(ctx.out / "synthetic.grd", generate_synthetic(spec));
}

}  // namespace karina::cli
