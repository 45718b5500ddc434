#pragma once

// Central-difference gradient oracle for 64-bit recordings.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "karina/engine/tensor.hpp"

namespace karina {

struct GradCheckReport {
  /// Worst per-parameter ||a - n|| / max(||a||, ||n||, 1e-8), Euclidean norms.
  double max_rel_err = 0.0;
  std::size_t param = 0;  // parameter attaining max_rel_err
  /// Worst single-entry |a - n| / max(|a|, |n|, 1e-8).
  double max_entry_rel_err = 0.0;
  std::size_t entry_param = 0;
  std::size_t index = 0;  // flat entry within entry_param
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries_checked = 0;
};

struct GradCheckOptions {
  double h = 1e-5;
  /// Entries probed per parameter; 0 probes every entry. Probed entries are
  /// drawn without replacement from `seed`.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

/// Compares backward() gradients of `loss_fn` against central differences,
/// parameter by parameter, over the probed entries of each.
inline GradCheckReport grad_check_report(const std::function<Tensor<double>()>& loss_fn,
                                         std::vector<Tensor<double>> params,
                                         GradCheckOptions opt = {}) {
  if (!(opt.h >= 1e-7 && opt.h <= 1e-4))
    throw std::invalid_argument("grad_check: h must lie in [1e-7, 1e-4]");
  for (auto& p : params) {
    if (!p.is_leaf() || !p.requires_grad())
      throw std::invalid_argument("grad_check: every parameter must be a trainable leaf");
    p.zero_grad();
  }
  Tensor<double> loss = loss_fn();
  loss.backward();

  GradCheckReport rep;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                     : std::vector<double>(p.numel(), 0.0);
    std::vector<std::size_t> entries(p.numel());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (opt.max_entries_per_param && entries.size() > opt.max_entries_per_param) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(opt.max_entries_per_param);
    }
    auto values = p.mutable_data();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i : entries) {
      const double saved = values[i];
      double fp = 0.0, fm = 0.0;
      {
        NoRecord guard;
        values[i] = saved + opt.h;
        fp = loss_fn().item();
        values[i] = saved - opt.h;
        fm = loss_fn().item();
      }
      values[i] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double a = analytic[i];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++rep.entries_checked;
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      if (rel >= rep.max_entry_rel_err) {
        rep.max_entry_rel_err = rel;
        rep.entry_param = k;
        rep.index = i;
        rep.analytic = a;
        rep.numeric = numeric;
      }
    }
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    if (rel >= rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.param = k;
    }
  }
  return rep;
}

inline double grad_check(const std::function<Tensor<double>()>& loss_fn,
                         std::vector<Tensor<double>> params, double h = 1e-5) {
  return grad_check_report(loss_fn, std::move(params), {h, 0, 0}).max_rel_err;
}

}  // namespace karina
