#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace karina;
using karina::test::normal_values;
using karina::test::perturb;

namespace {

constexpr std::size_t kH = 8, kW = 16, kC = 3, kP = kH * kW;

ModelConfig toy() {
  ModelConfig c;
  c.in_channels = c.out_channels = kC;
  c.stage_dims = {8, 16};
  c.depths = {1, 1};
  c.n_lat = kH;
  c.n_lon = kW;
  return c;
}

/// Toy model with scaled-down random weights so rollouts stay bounded.
KarinaModel<float> trained_like(std::uint64_t seed) {
  auto m = KarinaModel<float>::build(toy(), seed);
  perturb(m.parameters(), seed + 100, 0.1);
  return m;
}

NormStats unit_stats() {
  NormStats s;
  s.channels = {"Z500", "T850", "OROG"};
  s.mean = {10.0, 20.0, 0.5};
  s.stdev = {2.0, 4.0, 0.25};
  s.constant = {false, false, false};
  return s;
}

std::vector<float> init_state(std::uint64_t seed) {
  const auto v = normal_values(kC * kP, seed);
  return {v.begin(), v.end()};
}

ForecastSeries run(const KarinaModel<float>& m, const std::vector<float>& x0, std::size_t horizon,
                   std::vector<std::size_t> statics = {}) {
  RolloutOptions opt;
  opt.horizon = horizon;
  opt.static_channels = std::move(statics);
  const auto s = unit_stats();
  return rollout(m, x0, 17532, s, s.channels, kH, kW, opt);
}

std::vector<float> roll_state(const std::vector<float>& x, std::int64_t shift) {
  std::vector<float> out(x.size());
  for (std::size_t c = 0; c < kC; ++c)
    for (std::size_t j = 0; j < kH; ++j)
      for (std::size_t i = 0; i < kW; ++i)
        out[(c * kH + j) * kW + (i + static_cast<std::size_t>(shift)) % kW] = x[(c * kH + j) * kW + i];
  return out;
}

}  // namespace

TEST(Rollout, HorizonOneIsForwardThenDenormalize) {
  const auto m = trained_like(1);
  const auto x0 = init_state(2);
  const auto s = run(m, x0, 1);
  ASSERT_EQ(s.horizon(), 1u);
  NoRecord guard;
  auto eval = m.replica();
  eval.set_mode(Mode::Eval);
  const auto y = eval.forward(Tensor<float>(Shape{kC, kH, kW}, x0));
  std::vector<float> phys(y.data().begin(), y.data().end());
  unit_stats().denormalize(phys.data(), kP);
  EXPECT_EQ(s.steps[0], phys);
  EXPECT_EQ(s.states[0], to_vector(y));
  EXPECT_EQ(s.init_date, 17532);
  EXPECT_FALSE(s.blowup);
}

TEST(Rollout, StaticChannelIsResetEveryStep) {
  const auto m = trained_like(3);
  const auto x0 = init_state(4);
  const auto s = run(m, x0, 6, {2});
  ASSERT_EQ(s.horizon(), 6u);
  for (const auto& st : s.states)
    for (std::size_t p = 0; p < kP; ++p) ASSERT_EQ(st[2 * kP + p], x0[2 * kP + p]);
}

TEST(Rollout, ForcedChannelsComeFromSource) {
  const auto m = trained_like(5);
  RolloutOptions opt;
  opt.horizon = 3;
  opt.forced_channels = {1};
  opt.forcing = [](std::int32_t date) { return std::vector<float>(kC * kP, static_cast<float>(date - 17532)); };
  const auto s = unit_stats();
  const auto f = rollout(m, init_state(6), 17532, s, s.channels, kH, kW, opt);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(f.states[k][kP + 7], static_cast<float>(k + 1));
  opt.forcing = nullptr;
  EXPECT_THROW(rollout(m, init_state(6), 17532, s, s.channels, kH, kW, opt), std::invalid_argument);
}

TEST(Rollout, GridFileHasOneEntryPerLead) {
  const auto s = run(trained_like(7), init_state(8), 4);
  const auto g = s.to_grid_file();
  EXPECT_EQ(g.n_time(), 4u);
  EXPECT_EQ(g.dates.front(), 17533);
  EXPECT_EQ(g.dates.back(), 17536);
  EXPECT_EQ(g.frame_copy(2), s.steps[2]);
}

TEST(Rollout, Errors) {
  const auto m = trained_like(9);
  EXPECT_THROW(run(m, init_state(10), 0), std::invalid_argument);
  EXPECT_THROW(run(m, std::vector<float>(5, 0.0f), 1), ShapeError);
  EXPECT_THROW(run(m, init_state(10), 1, {3}), std::invalid_argument);
}

TEST(Rollout, BlowupStopsWithPartialSeries) {
  auto m = KarinaModel<float>::build(toy(), 11);
  perturb(m.parameters(), 12, 1.5);
  RolloutOptions opt;
  opt.horizon = 50;
  opt.blowup_std = 5.0;
  const auto s = unit_stats();
  const auto f = rollout(m, init_state(13), 17532, s, s.channels, kH, kW, opt);
  ASSERT_TRUE(f.blowup);
  EXPECT_EQ(f.horizon(), f.blowup_step);
  EXPECT_LT(f.horizon(), 50u);
  EXPECT_FALSE(f.blowup_reason.empty());
}

TEST(RolloutProperty, MarkovCompositionIsBitIdentical) {
  const auto m = trained_like(14);
  const auto x0 = init_state(15);
  const auto full = run(m, x0, 7);
  for (std::size_t h1 = 1; h1 < 7; ++h1) {
    const auto a = run(m, x0, h1);
    const auto b = run(m, a.last_state(), 7 - h1);
    for (std::size_t k = 0; k < 7; ++k) {
      const auto& part = k < h1 ? a.states[k] : b.states[k - h1];
      ASSERT_EQ(part, full.states[k]) << "split " << h1 << " lead " << k + 1;
    }
  }
}

TEST(RolloutProperty, RollEquivariancePropagates) {
  const auto m = trained_like(16);
  const auto x0 = init_state(17);
  const auto base = run(m, x0, 4);
  for (std::int64_t shift : {1, 5, 8}) {
    const auto rolled = run(m, roll_state(x0, shift), 4);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(rolled.states[k], roll_state(base.states[k], shift)) << shift;
  }
}

TEST(Drift, RowCountAndRecomputation) {
  const auto s = run(trained_like(18), init_state(19), 5);
  const auto rows = drift_report(s);
  ASSERT_EQ(rows.size(), 5u * kC);
  const auto g = GridSpec::regular(kH, kW);
  for (const auto& r : rows) {
    const std::size_t c = static_cast<std::size_t>(std::find(s.channels.begin(), s.channels.end(), r.channel) -
                                                    s.channels.begin());
    const float* plane = s.states[r.step - 1].data() + c * kP;
    double cs = 0;
    for (std::size_t j = 0; j < kH; ++j) cs += std::cos(g.lat_centers[j] * std::numbers::pi / 180.0);
    double m = 0, v = 0;
    for (std::size_t p = 0; p < kP; ++p)
      m += std::cos(g.lat_centers[p / kW] * std::numbers::pi / 180.0) / (cs / kH) * plane[p];
    m /= kP;
    for (std::size_t p = 0; p < kP; ++p)
      v += std::cos(g.lat_centers[p / kW] * std::numbers::pi / 180.0) / (cs / kH) * (plane[p] - m) * (plane[p] - m);
    EXPECT_NEAR(r.normalized.mean, m, 1e-12);
    EXPECT_NEAR(r.normalized.stdev, std::sqrt(v / kP), 1e-12);
    EXPECT_EQ(r.normalized.min, *std::min_element(plane, plane + kP));
    EXPECT_EQ(r.normalized.max, *std::max_element(plane, plane + kP));
  }
  const auto csv = drift_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(rows.size() + 1));
}

TEST(Drift, ZeroHeadHasNoMeanDrift) {
  auto m = trained_like(20);
  for (auto name : {"head.conv.weight", "head.conv.bias"})
    for (auto& v : m.find(name)->tensor.mutable_data()) v = 0.0f;
  const auto rows = drift_report(run(m, init_state(21), 4));
  for (const auto& r : rows) EXPECT_EQ(r.normalized.mean, 0.0);
}
