#pragma once

// Optimizer, learning-rate schedule, the training loop and lag fine-tuning.
//
// A batch gradient is the mean of per-sample gradients, each computed on its
// own recording and summed in sample order, so results do not depend on the
// worker count.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "karina/data.hpp"
#include "karina/model.hpp"

namespace karina {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Schedule

/// lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
  if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
  if (step > total_steps) throw std::invalid_argument("cosine_lr: step beyond total_steps");
  return lr_min + 0.5 * (lr_max - lr_min) *
                      (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

/// Per-epoch rate: lr_max at epoch 0, lr_min at the final epoch.
inline double epoch_lr(std::size_t epoch, std::size_t epochs, double lr_max, double lr_min) {
  if (epochs <= 1) return lr_max;
  return cosine_lr(epoch, epochs - 1, lr_max, lr_min);
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWOptions {
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
};

/// Decoupled weight decay (theta -= lr wd theta) followed by the
/// bias-corrected Adam step.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWOptions opt = {}) : opt_(opt) {
    if (!(opt.eps > 0.0)) throw std::invalid_argument("adamw: eps must be > 0");
    if (!(opt.beta1 >= 0.0 && opt.beta1 < 1.0 && opt.beta2 >= 0.0 && opt.beta2 < 1.0))
      throw std::invalid_argument("adamw: betas must lie in [0, 1)");
  }

  const AdamWOptions& options() const { return opt_; }
  std::uint64_t steps() const { return t_; }
  const std::vector<std::vector<T>>& first_moment() const { return m_; }
  const std::vector<std::vector<T>>& second_moment() const { return v_; }

  void step(std::vector<Parameter<T>>& params, double lr) {
    if (!(lr >= 0.0)) throw std::invalid_argument("adamw: lr must be >= 0");
    for (const auto& p : params)
      if (!p.tensor.has_grad()) throw std::invalid_argument("adamw: parameter '" + p.name + "' has no gradient");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.tensor.numel(), T(0));
        v_.emplace_back(p.tensor.numel(), T(0));
      }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("adamw: parameter list changed between steps");
    ++t_;
    const double b1 = opt_.beta1, b2 = opt_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const double decay = 1.0 - lr * opt_.weight_decay;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto theta = params[k].tensor.mutable_data();
      const auto g = params[k].tensor.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double gi = g[i];
        const double mi = b1 * m[i] + (1.0 - b1) * gi;
        const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        double th = static_cast<double>(theta[i]);
        if (opt_.weight_decay != 0.0) th *= decay;
        th -= lr * (mi / c1) / (std::sqrt(vi / c2) + opt_.eps);
        theta[i] = static_cast<T>(th);
      }
    }
  }

 private:
  AdamWOptions opt_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  double lr = 1e-3;
  double lr_min = 0.0;
  std::size_t epochs = 150;
  std::size_t batch_size = 16;
  AdamWOptions adamw;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool shuffle = true;
  bool lat_weighted_loss = false;
  /// Channels left out of the loss (static inputs such as orography).
  std::vector<std::size_t> loss_excluded_channels;

  void validate() const {
    if (!(lr >= 0.0)) throw std::invalid_argument("train: lr must be >= 0");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (!(lr_min >= 0.0 && lr_min <= lr)) throw std::invalid_argument("train: lr_min must lie in [0, lr]");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (threads < 1) throw std::invalid_argument("train: threads must be >= 1");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps completed at the end of the epoch
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;  // mean batch loss per optimizer step

  void append(const TrainReport& o) {
    const std::size_t e0 = epochs.size(), s0 = epochs.empty() ? 0 : epochs.back().step;
    for (auto r : o.epochs) {
      r.epoch += e0;
      r.step += s0;
      epochs.push_back(r);
    }
    step_losses.insert(step_losses.end(), o.step_losses.begin(), o.step_losses.end());
  }

  /// CSV with columns epoch, step, lr, train_loss, val_loss, seconds. The
  /// seconds column is 0 unless `wall_time` is set, which keeps reruns
  /// byte-identical.
  std::string to_csv(bool wall_time = false) const {
    std::ostringstream os;
    os << "epoch,step,lr,train_loss,val_loss,seconds\n";
    char buf[256];
    for (const auto& r : epochs) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.3f\n", r.epoch, r.step, r.lr, r.train_loss,
                    r.val_loss, wall_time ? r.seconds : 0.0);
      os << buf;
    }
    return os.str();
  }
};

using ProgressFn = std::function<void(const EpochRecord&)>;

namespace detail {

template <class T>
Tensor<T> sample_loss(const KarinaModel<T>& model, const std::vector<float>& in, const std::vector<float>& tgt,
                      const PairSet& ps, const TrainConfig& cfg, const std::vector<double>& row_weights,
                      const std::vector<int>& mask, std::mt19937_64* rng) {
  const Shape shape{ps.channels, ps.n_lat, ps.n_lon};
  Tensor<T> x(shape, std::vector<T>(in.begin(), in.end()));
  Tensor<T> y(shape, std::vector<T>(tgt.begin(), tgt.end()));
  Tensor<T> pred = model.forward(x, rng);
  if (pred.shape() != y.shape())
    throw ShapeError("train: model output " + to_string(pred.shape()) + " does not match target " +
                     to_string(y.shape()));
  if (!cfg.lat_weighted_loss && cfg.loss_excluded_channels.empty()) return l2_loss(pred, y);
  std::vector<double> w = cfg.lat_weighted_loss ? row_weights : std::vector<double>(ps.n_lat, 1.0);
  return weighted_l2_loss(pred, y, std::span<const double>(w), std::span<const int>(mask));
}

inline std::mt19937_64 sample_rng(std::uint64_t seed, std::size_t epoch, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index), 0x5eedu};
  return std::mt19937_64(seq);
}

/// Runs fn(worker, i) for i in [0, n) over `workers` threads, static striping.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(0, i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(w, i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Mean per-pair loss of `pairs` in eval mode.
template <class T>
double evaluate_loss(const KarinaModel<T>& model, const PairSet& pairs, const TrainConfig& cfg) {
  if (pairs.size() == 0) throw std::invalid_argument("evaluate_loss: empty pair set");
  auto m = model.replica();
  m.set_mode(Mode::Eval);
  const auto grid = GridSpec::regular(pairs.n_lat, pairs.n_lon);
  std::vector<int> mask(pairs.channels, 1);
  for (auto c : cfg.loss_excluded_channels) mask.at(c) = 0;
  std::vector<double> losses(pairs.size());
  detail::parallel_for(pairs.size(), cfg.threads, [&](std::size_t, std::size_t i) {
    NoRecord guard;
    std::vector<float> in, tgt;
    pairs.fetch(i, in, tgt);
    losses[i] = static_cast<double>(detail::sample_loss(m, in, tgt, pairs, cfg, grid.row_weights, mask, nullptr).item());
  });
  double s = 0.0;
  for (double l : losses) s += l;
  return s / static_cast<double>(losses.size());
}

/// Trains `model` in place on `train_pairs`; `val_pairs` may be empty.
template <class T>
TrainReport train(KarinaModel<T>& model, const PairSet& train_pairs, const PairSet* val_pairs,
                  const TrainConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  if (train_pairs.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (train_pairs.channels != model.config().in_channels)
    throw ShapeError("train: data has " + std::to_string(train_pairs.channels) + " channels, model expects " +
                     std::to_string(model.config().in_channels));
  const auto grid = GridSpec::regular(train_pairs.n_lat, train_pairs.n_lon);
  std::vector<int> mask(model.config().out_channels, 1);
  for (auto c : cfg.loss_excluded_channels) {
    if (c >= mask.size()) throw std::invalid_argument("train: excluded channel index out of range");
    mask[c] = 0;
  }

  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.threads, cfg.batch_size));
  std::vector<KarinaModel<T>> replicas;
  for (std::size_t w = 0; w < workers; ++w) {
    replicas.push_back(model.replica());
    replicas.back().set_mode(Mode::Train);
  }
  auto& params = model.parameters();
  std::vector<std::size_t> offsets{0};
  for (const auto& p : params) offsets.push_back(offsets.back() + p.tensor.numel());
  const std::size_t n_params = offsets.back();

  AdamW<T> opt(cfg.adamw);
  TrainReport report;
  std::vector<std::size_t> order(train_pairs.size());
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = epoch_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (cfg.shuffle) {
      std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + epoch);
      std::shuffle(order.begin(), order.end(), rng);
    }
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t B = std::min(cfg.batch_size, order.size() - b0);
      std::vector<std::vector<T>> grads(B);
      std::vector<double> losses(B);
      detail::parallel_for(B, workers, [&](std::size_t w, std::size_t j) {
        auto& rep = replicas[w];
        const std::size_t idx = order[b0 + j];
        std::vector<float> in, tgt;
        train_pairs.fetch(idx, in, tgt);
        auto rng = detail::sample_rng(cfg.seed, epoch, idx);
        rep.zero_grad();
        Tensor<T> loss;
        try {
          loss = detail::sample_loss(rep, in, tgt, train_pairs, cfg, grid.row_weights, mask, &rng);
        } catch (const NonFiniteError& e) {
          throw TrainingError("non-finite value in " + e.op() + " at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(n_batches));
        }
        losses[j] = static_cast<double>(loss.item());
        loss.backward();
        auto& g = grads[j];
        g.assign(n_params, T(0));
        const auto& rp = rep.parameters();
        for (std::size_t k = 0; k < rp.size(); ++k)
          if (rp[k].tensor.has_grad()) {
            const auto gk = rp[k].tensor.grad();
            std::copy(gk.begin(), gk.end(), g.begin() + static_cast<std::ptrdiff_t>(offsets[k]));
          }
      });
      double batch_loss = 0.0;
      for (double l : losses) batch_loss += l;
      batch_loss /= static_cast<double>(B);
      if (!std::isfinite(batch_loss))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(n_batches));
      const T inv = static_cast<T>(1.0 / static_cast<double>(B));
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto dst = params[k].tensor.mutable_grad();
        std::fill(dst.begin(), dst.end(), T(0));
        for (std::size_t j = 0; j < B; ++j) {
          const T* src = grads[j].data() + offsets[k];
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
        for (auto& d : dst) d *= inv;
      }
      opt.step(params, lr);
      ++step;
      report.step_losses.push_back(batch_loss);
      epoch_loss += batch_loss;
      ++n_batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = step;
    rec.lr = lr;
    rec.train_loss = epoch_loss / static_cast<double>(n_batches);
    if (val_pairs && val_pairs->size() > 0) rec.val_loss = evaluate_loss(model, *val_pairs, cfg);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);
    if (progress) progress(rec);
  }
  model.zero_grad();
  return report;
}

// ---------------------------------------------------------------------------
// Lag fine-tuning

struct FinetunePhase {
  std::vector<int> lags;  // hours, unique, in [0, 23]
  double lr = 1e-4;

  void validate() const {
    if (lags.empty()) throw std::invalid_argument("finetune: phase has no lags");
    std::vector<int> s = lags;
    std::sort(s.begin(), s.end());
    if (std::adjacent_find(s.begin(), s.end()) != s.end()) throw std::invalid_argument("finetune: duplicate lag");
    if (s.front() < 0 || s.back() > 23) throw std::invalid_argument("finetune: lags must lie in [0, 23]");
    if (!(lr > 0.0)) throw std::invalid_argument("finetune: lr must be > 0");
  }
};

/// {0,12} @ 5e-3, then {0,6,12,18} @ 2.5e-3, then every hour @ 1e-4.
inline std::vector<FinetunePhase> default_finetune_phases() {
  std::vector<int> all(24);
  for (int h = 0; h < 24; ++h) all[static_cast<std::size_t>(h)] = h;
  return {{{0, 12}, 5e-3}, {{0, 6, 12, 18}, 2.5e-3}, {all, 1e-4}};
}

/// Sequential phases, each a full training run (own cosine schedule, fresh
/// optimizer state) over the lag-augmented pairs, continuing from the
/// previous weights. `cfg.epochs` applies per phase; lr comes from the phase.
template <class T>
TrainReport finetune(KarinaModel<T>& model, const Dataset& train_data, const PairSet* val_pairs,
                     const std::vector<FinetunePhase>& phases, const TrainConfig& cfg,
                     const ProgressFn& progress = {}) {
  if (phases.empty()) throw std::invalid_argument("finetune: no phases");
  for (const auto& ph : phases) ph.validate();
  TrainReport all;
  for (const auto& ph : phases) {
    const PairSet ps = train_data.lag_augment(ph.lags);
    TrainConfig c = cfg;
    c.lr = ph.lr;
    c.lr_min = std::min(cfg.lr_min, ph.lr);
    all.append(train(model, ps, val_pairs, c, progress));
  }
  return all;
}

}  // namespace karina
