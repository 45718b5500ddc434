#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace karina;
using karina::test::perturb;
using karina::test::probe_loss;
using karina::test::random_param;
using karina::test::random_tensor;
using karina::test::sphere_walk_source;
using karina::test::tensors_of;

namespace {

struct Built {
  std::vector<Parameter<double>> params;
  std::mt19937_64 rng{0};
  ParamFactory<double> factory{params, rng};
};

// Direct cross-correlation with padding resolved cell by cell.
std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                std::size_t groups, PaddingMode mode) {
  const long Cin = static_cast<long>(x.dim(0)), H = static_cast<long>(x.dim(1)), W = static_cast<long>(x.dim(2));
  const long Cout = static_cast<long>(w.dim(0)), cig = static_cast<long>(w.dim(1)), K = static_cast<long>(w.dim(2));
  const long P = (K - 1) / 2, cog = Cout / static_cast<long>(groups);
  std::vector<double> out(static_cast<std::size_t>(Cout * H * W));
  for (long co = 0; co < Cout; ++co)
    for (long r = 0; r < H; ++r)
      for (long c = 0; c < W; ++c) {
        double s = b[static_cast<std::size_t>(co)];
        const long g = co / cog;
        for (long ci = 0; ci < cig; ++ci)
          for (long kh = 0; kh < K; ++kh)
            for (long kw = 0; kw < K; ++kw) {
              const auto [sr, sc] = P ? sphere_walk_source(r + kh, c + kw, P, H, W, mode)
                                      : std::pair<long, long>{r, c};
              if (sr < 0) continue;
              const long cin = g * cig + ci;
              s += w[static_cast<std::size_t>(((co * cig + ci) * K + kh) * K + kw)] *
                   x[static_cast<std::size_t>((cin * H + sr) * W + sc)];
            }
        out[static_cast<std::size_t>((co * H + r) * W + c)] = s;
      }
  return out;
}

}  // namespace

TEST(Layers, IdentityPointwiseConv) {
  const auto x = random_tensor({3, 4, 6}, 1);
  std::vector<double> eye(9, 0.0);
  for (int i = 0; i < 3; ++i) eye[static_cast<std::size_t>(i * 3 + i)] = 1.0;
  const Conv2dSpec spec{3, 3, 1, 1, PaddingMode::Geocyclic};
  const auto y = conv2d(x, spec, Tensor<double>(Shape{3, 3, 1, 1}, eye), Tensor<double>(Shape{3}, 0.0));
  EXPECT_EQ(to_vector(y), to_vector(x));
}

TEST(Layers, ImpulseResponseIsFlippedKernel) {
  std::vector<double> xv(7 * 7, 0.0);
  xv[3 * 7 + 3] = 1.0;
  const auto w = random_tensor({1, 1, 3, 3}, 2);
  const Conv2dSpec spec{1, 1, 3, 1, PaddingMode::Zero};
  const auto y = conv2d(Tensor<double>(Shape{1, 7, 7}, xv), spec, w, Tensor<double>(Shape{1}, 0.0));
  for (std::size_t kh = 0; kh < 3; ++kh)
    for (std::size_t kw = 0; kw < 3; ++kw) EXPECT_EQ(y[(3 - kh + 1) * 7 + (3 - kw + 1)], w[kh * 3 + kw]);
}

TEST(Layers, ConvMatchesDirectOracle) {
  for (auto mode : {PaddingMode::Geocyclic, PaddingMode::CircularZeroPole, PaddingMode::Zero}) {
    const auto x = random_tensor({3, 6, 8}, 3);
    const auto w = random_tensor({5, 3, 3, 3}, 4);
    const auto b = random_tensor({5}, 5);
    const auto y = conv2d(x, Conv2dSpec{3, 5, 3, 1, mode}, w, b);
    const auto o = conv_oracle(x, w, b, 1, mode);
    for (std::size_t i = 0; i < o.size(); ++i) EXPECT_NEAR(y[i], o[i], 1e-12) << to_string(mode);
  }
  const auto x = random_tensor({4, 6, 8}, 6);
  const auto w = random_tensor({4, 1, 7, 7}, 7);
  const auto b = random_tensor({4}, 8);
  const auto y = conv2d(x, Conv2dSpec{4, 4, 7, 4, PaddingMode::Geocyclic}, w, b);
  const auto o = conv_oracle(x, w, b, 4, PaddingMode::Geocyclic);
  for (std::size_t i = 0; i < o.size(); ++i) EXPECT_NEAR(y[i], o[i], 1e-12);
}

TEST(Layers, ConvSpecValidation) {
  EXPECT_THROW((Conv2dSpec{3, 3, 4, 1, PaddingMode::Zero}.validate()), std::invalid_argument);
  EXPECT_THROW((Conv2dSpec{3, 4, 3, 3, PaddingMode::Zero}.validate()), std::invalid_argument);
  const auto x = random_tensor({2, 4, 4}, 9);
  EXPECT_THROW(conv2d(x, Conv2dSpec{3, 3, 3, 1, PaddingMode::Zero}, random_tensor({3, 3, 3, 3}, 1),
                      random_tensor({3}, 2)),
               ShapeError);
}

TEST(Layers, SEZeroWeightsHalveInput) {
  Built b;
  auto se = SEParams<double>::build({4, 2}, b.factory, "se");
  for (auto& p : b.params)
    for (auto& v : p.tensor.mutable_data()) v = 0.0;
  const auto x = random_tensor({4, 3, 3}, 10);
  const auto y = se_block(x, se);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], 0.5 * x[i]);
}

TEST(Layers, SESaturatedGatePassesInput) {
  Built b;
  auto se = SEParams<double>::build({4, 2}, b.factory, "se");
  for (auto& p : b.params)
    for (auto& v : p.tensor.mutable_data()) v = 0.0;
  for (auto& v : se.fc2_bias.mutable_data()) v = 20.0;
  const auto x = random_tensor({4, 3, 3}, 11);
  const auto y = se_block(x, se);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i], 1e-8 * std::abs(x[i]) + 1e-15);
}

TEST(Layers, SEMatchesOracle) {
  Built b;
  auto se = SEParams<double>::build({4, 1}, b.factory, "se");
  perturb(b.params, 12, 0.5);
  const auto x = random_tensor({4, 3, 3}, 13);
  const auto y = se_block(x, se);
  std::vector<double> m(4, 0.0);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t p = 0; p < 9; ++p) m[c] += x[c * 9 + p];
    m[c] /= 9.0;
  }
  const std::size_t r = 4;
  std::vector<double> h(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = se.fc1_bias[i];
    for (std::size_t c = 0; c < 4; ++c) s += se.fc1_weight[i * 4 + c] * m[c];
    h[i] = std::max(s, 0.0);
  }
  for (std::size_t c = 0; c < 4; ++c) {
    double s = se.fc2_bias[c];
    for (std::size_t i = 0; i < r; ++i) s += se.fc2_weight[c * r + i] * h[i];
    const double gate = 1.0 / (1.0 + std::exp(-s));
    for (std::size_t p = 0; p < 9; ++p) EXPECT_NEAR(y[c * 9 + p], gate * x[c * 9 + p], 1e-14);
  }
}

TEST(Layers, DropPathDegenerateCases) {
  const auto x = random_tensor({2, 3, 3}, 14), r = random_tensor({2, 3, 3}, 15);
  const auto ref = to_vector(add(x, r));
  std::mt19937_64 rng(1);
  EXPECT_EQ(to_vector(drop_path(x, r, 0.0, Mode::Train, &rng)), ref);
  EXPECT_EQ(to_vector(drop_path(x, r, 0.7, Mode::Eval, nullptr)), ref);
  EXPECT_THROW(drop_path(x, r, 0.5, Mode::Train, nullptr), std::invalid_argument);
  EXPECT_THROW(drop_path(x, r, 1.0, Mode::Train, &rng), std::invalid_argument);
}

TEST(Layers, DropPathIsUnbiased) {
  const Tensor<double> x(Shape{1}, {0.5}), r(Shape{1}, {2.0});
  std::mt19937_64 rng(2);
  double s = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) s += drop_path(x, r, 0.3, Mode::Train, &rng).item();
  EXPECT_NEAR(s / n, 2.5, 0.01 * 2.5);
}

TEST(Layers, LayerScale) {
  const auto x = random_tensor({3, 2, 2}, 16);
  EXPECT_EQ(to_vector(layer_scale(x, Tensor<double>(Shape{3}, 1.0))), to_vector(x));
  for (double v : to_vector(layer_scale(x, Tensor<double>(Shape{3}, 0.0)))) EXPECT_EQ(v, 0.0);
  auto g = random_param({3}, 17);
  const auto up = random_tensor({3, 2, 2}, 18);
  sum(mul(layer_scale(x, g), up)).backward();
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t p = 0; p < 4; ++p) s += up[c * 4 + p] * x[c * 4 + p];
    EXPECT_NEAR(g.grad()[c], s, 1e-14);
  }
  EXPECT_LT(grad_check([&] { return sum(mul(layer_scale(x, g), up)); }, {g}), 1e-8);
}

TEST(Layers, ZeroBranchBlockIsResidual) {
  Built b;
  BlockSpec s;
  s.dim = 8;
  auto blk = ConvNextBlock<double>::build(s, b.factory, "blk");
  for (auto& p : b.params)
    if (p.name.find("conv") != std::string::npos || p.name.find("norm.bias") != std::string::npos)
      for (auto& v : p.tensor.mutable_data()) v = 0.0;
  const auto x = random_tensor({8, 6, 8}, 19);
  EXPECT_EQ(to_vector(blk(x, Mode::Eval)), to_vector(x));
}

TEST(Layers, BlockPreservesShape) {
  for (std::size_t dim : {8, 96}) {
    Built b;
    BlockSpec s;
    s.dim = dim;
    auto blk = ConvNextBlock<double>::build(s, b.factory, "blk");
    NoRecord guard;
    EXPECT_EQ(blk(random_tensor({dim, 6, 8}, 20), Mode::Eval).shape(), (Shape{dim, 6, 8}));
  }
}

TEST(Layers, DepthScale) {
  {
    std::vector<Parameter<float>> params;
    std::mt19937_64 rng(0);
    ParamFactory<float> f(params, rng);
    auto ds = DepthScale<float>::build(96, 192, PaddingMode::Geocyclic, f, "ds");
    NoRecord guard;
    EXPECT_EQ(ds(Tensor<float>(Shape{96, 72, 144}, 0.5f)).shape(), (Shape{192, 72, 144}));
  }
  Built b;
  auto ds = DepthScale<double>::build(4, 8, PaddingMode::Geocyclic, b.factory, "ds");
  perturb(b.params, 21, 0.5);
  const auto x = random_tensor({4, 5, 6}, 22);
  const auto y = ds(x);
  const auto n = layer_norm_channels(x, ds.norm.gamma, ds.norm.beta, 1e-6);
  const auto o = conv_oracle(n, ds.conv.weight, ds.conv.bias, 1, PaddingMode::Geocyclic);
  for (std::size_t i = 0; i < o.size(); ++i) EXPECT_NEAR(y[i], o[i], 1e-12);
  for (auto& v : ds.conv.weight.mutable_data()) v = 0.0;
  for (auto& v : ds.conv.bias.mutable_data()) v = 0.0;
  for (double v : to_vector(ds(x))) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(DepthScale<double>::build(8, 8, PaddingMode::Geocyclic, b.factory, "bad"), std::invalid_argument);
}

TEST(Layers, ParameterNamesMustBeUnique) {
  Built b;
  LayerNorm<double>::build(4, b.factory, "n");
  EXPECT_ANY_THROW(LayerNorm<double>::build(4, b.factory, "n"));
}

TEST(LayersProperty, ShiftEquivarianceOfBlock) {
  for (auto mode : {PaddingMode::Geocyclic, PaddingMode::CircularZeroPole}) {
    Built b;
    BlockSpec s;
    s.dim = 8;
    s.padding_mode = mode;
    auto blk = ConvNextBlock<double>::build(s, b.factory, "blk");
    perturb(b.params, 23, 0.3);
    const auto x = random_tensor({8, 6, 12}, 24);
    const auto y = blk(x, Mode::Eval);
    for (std::int64_t sh = 0; sh < 12; ++sh)
      EXPECT_EQ(to_vector(blk(roll_lon(x, sh), Mode::Eval)), to_vector(roll_lon(y, sh))) << to_string(mode) << sh;
  }
}

TEST(LayersProperty, ZeroPaddingBreaksShiftEquivariance) {
  Built b;
  BlockSpec s;
  s.dim = 8;
  s.padding_mode = PaddingMode::Zero;
  auto blk = ConvNextBlock<double>::build(s, b.factory, "blk");
  perturb(b.params, 25, 0.3);
  const auto x = random_tensor({8, 6, 12}, 26);
  EXPECT_NE(to_vector(blk(roll_lon(x, 3), Mode::Eval)), to_vector(roll_lon(blk(x, Mode::Eval), 3)));
}

TEST(LayersProperty, SEPreservesSign) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Built b;
    auto se = SEParams<double>::build({6, 2}, b.factory, "se");
    perturb(b.params, seed, 3.0);
    const auto x = random_tensor({6, 3, 4}, 100 + seed);
    const auto y = se_block(x, se);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      if (x[i] > 0) EXPECT_GE(y[i], 0.0);
      if (x[i] < 0) EXPECT_LE(y[i], 0.0);
    }
  }
}

TEST(LayersProperty, EvalBlockIsDeterministic) {
  Built b;
  BlockSpec s;
  s.dim = 8;
  s.drop_path_rate = 0.5;
  auto blk = ConvNextBlock<double>::build(s, b.factory, "blk");
  perturb(b.params, 27, 0.3);
  const auto x = random_tensor({8, 4, 8}, 28);
  EXPECT_EQ(to_vector(blk(x, Mode::Eval)), to_vector(blk(x, Mode::Eval)));
}

TEST(LayersProperty, LayersPassGradCheck) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto x = random_param({4, 4, 8}, 300 + seed);
    for (auto mode : {PaddingMode::Geocyclic, PaddingMode::CircularZeroPole, PaddingMode::Zero}) {
      Built b;
      auto conv = Conv2d<double>::build({4, 6, 3, 1, mode}, b.factory, "c");
      auto dw = Conv2d<double>::build({4, 4, 7, 4, mode}, b.factory, "dw");
      perturb(b.params, seed, 0.5);
      auto ps = tensors_of(b.params);
      ps.push_back(x);
      EXPECT_LT(grad_check([&] { return probe_loss(dw(x), seed); }, ps), 1e-4) << to_string(mode);
      EXPECT_LT(grad_check([&] { return probe_loss(conv(x), seed); }, ps), 1e-4) << to_string(mode);
    }
    {
      Built b;
      auto se = SEParams<double>::build({4, 2}, b.factory, "se");
      perturb(b.params, seed, 0.5);
      auto ps = tensors_of(b.params);
      ps.push_back(x);
      EXPECT_LT(grad_check([&] { return probe_loss(se_block(x, se), seed); }, ps), 1e-4);
    }
    {
      Built b;
      BlockSpec s;
      s.dim = 4;
      s.reduction_ratio = 2;
      auto blk = ConvNextBlock<double>::build(s, b.factory, "blk");
      perturb(b.params, seed, 0.3);
      auto ps = tensors_of(b.params);
      ps.push_back(x);
      EXPECT_LT(grad_check([&] { return probe_loss(blk(x, Mode::Eval), seed); }, ps), 1e-4);
    }
    {
      Built b;
      auto ds = DepthScale<double>::build(4, 6, PaddingMode::Geocyclic, b.factory, "ds");
      perturb(b.params, seed, 0.5);
      auto ps = tensors_of(b.params);
      ps.push_back(x);
      EXPECT_LT(grad_check([&] { return probe_loss(ds(x), seed); }, ps), 1e-4);
    }
    {
      auto g = random_param({4}, 400 + seed);
      EXPECT_LT(grad_check([&] { return probe_loss(layer_scale(x, g), seed); }, {g, x}), 1e-4);
      auto r = random_param({4, 4, 8}, 500 + seed);
      auto fn = [&] {
        std::mt19937_64 rng(seed);
        return probe_loss(drop_path(x, r, 0.4, Mode::Train, &rng), seed);
      };
      EXPECT_LT(grad_check(fn, {x, r}), 1e-4);
    }
  }
}
