#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"

using namespace karina;
using karina::test::perturb;
using karina::test::random_tensor;
using karina::test::read_file;
using karina::test::scratch_dir;

namespace {

ModelConfig toy(std::size_t channels = 3) {
  ModelConfig c;
  c.in_channels = c.out_channels = channels;
  c.stage_dims = {8, 16};
  c.depths = {1, 1};
  return c;
}

// Parameter count assembled term by term from the layer shapes.
std::size_t audit_count(const ModelConfig& c) {
  auto conv = [](std::size_t cin, std::size_t cout, std::size_t k, std::size_t groups) {
    return cout * (cin / groups) * k * k + cout;
  };
  auto norm = [](std::size_t ch) { return 2 * ch; };
  std::size_t n = conv(c.in_channels, c.stage_dims[0], c.stem_kernel, 1) + norm(c.stage_dims[0]);
  for (std::size_t s = 0; s < c.stage_dims.size(); ++s) {
    const std::size_t d = c.stage_dims[s];
    if (s > 0) n += norm(c.stage_dims[s - 1]) + conv(c.stage_dims[s - 1], d, 3, 1);
    for (std::size_t b = 0; b < c.depths[s]; ++b) {
      n += conv(d, d, 7, d) + norm(d) + conv(d, 4 * d, 1, 1) + conv(4 * d, d, 1, 1) + d;
      if (c.se_enabled) {
        const std::size_t r = std::max<std::size_t>(d / c.reduction_ratio, 1);
        n += r * d + r + d * r + d;
      }
    }
  }
  const std::size_t dl = c.stage_dims.back();
  return n + conv(dl, dl, 3, 1) + conv(dl, c.out_channels, 1, 1);
}

}  // namespace

TEST(Model, ToyForwardOfZerosIsFinite) {
  const auto m = KarinaModel<double>::build(toy(), 1);
  NoRecord guard;
  const auto y = m.forward(Tensor<double>(Shape{3, 8, 16}, 0.0));
  EXPECT_EQ(y.shape(), (Shape{3, 8, 16}));
  for (double v : to_vector(y)) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, ZeroHeadGivesZeroOutput) {
  auto m = KarinaModel<double>::build(toy(), 2);
  for (auto name : {"head.conv.weight", "head.conv.bias"})
    for (auto& v : m.find(name)->tensor.mutable_data()) v = 0.0;
  NoRecord guard;
  for (double v : to_vector(m.forward(random_tensor({3, 8, 16}, 3)))) EXPECT_EQ(v, 0.0);
}

TEST(Model, ParameterCountMatchesAudit) {
  const auto c = toy();
  const auto m = KarinaModel<float>::build(c, 4);
  EXPECT_EQ(m.parameter_count(), audit_count(c));
  EXPECT_EQ(expected_parameter_count(c), audit_count(c));
  EXPECT_EQ(m.parameter_count(), 7937u);
  ModelConfig full;
  EXPECT_EQ(expected_parameter_count(full), audit_count(full));
  auto noseg = c;
  noseg.se_enabled = false;
  noseg.stem_kernel = 7;
  EXPECT_EQ(KarinaModel<float>::build(noseg, 0).parameter_count(), audit_count(noseg));
}

TEST(Model, FullShapeContract) {
  ModelConfig c;
  const auto m = KarinaModel<float>::build(c, 5);
  EXPECT_EQ(m.parameter_count(), expected_parameter_count(c));
  NoRecord guard;
  const auto y = m.forward(Tensor<float>(Shape{67, 72, 144}, 0.1f));
  EXPECT_EQ(y.shape(), (Shape{67, 72, 144}));
}

TEST(Model, EvalForwardIsDeterministic) {
  auto c = toy();
  c.drop_path_rate = 0.3;
  auto m = KarinaModel<double>::build(c, 6);
  perturb(m.parameters(), 7, 0.2);
  const auto x = random_tensor({3, 8, 16}, 8);
  NoRecord guard;
  EXPECT_EQ(to_vector(m.forward(x)), to_vector(m.forward(x)));
}

TEST(Model, InputValidation) {
  auto c = toy();
  c.n_lat = 8;
  c.n_lon = 16;
  const auto m = KarinaModel<double>::build(c, 9);
  EXPECT_THROW(m.forward(Tensor<double>(Shape{4, 8, 16}, 0.0)), ShapeError);
  EXPECT_THROW(m.forward(Tensor<double>(Shape{3, 10, 16}, 0.0)), ShapeError);
  auto bad = toy();
  bad.depths = {1};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = toy();
  bad.stage_dims = {16, 8};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Model, ConfigTextRoundTrip) {
  auto c = toy();
  c.padding_mode = PaddingMode::CircularZeroPole;
  c.layer_scale_init = 0.123456789012345;
  c.n_lat = 8;
  c.n_lon = 16;
  const auto back = ModelConfig::from_text(c.to_text());
  EXPECT_TRUE(back == c);
  auto d = c;
  d.depths = {1, 2};
  EXPECT_EQ(c.first_difference(d), "depths");
}

TEST(Model, CheckpointRoundTripIsBitExact) {
  const auto dir = scratch_dir("model_ckpt");
  auto m = KarinaModel<float>::build(toy(), 10);
  perturb(m.parameters(), 11, 0.1);
  save_checkpoint(m, dir / "a.bin");
  const auto back = load_checkpoint<float>(dir / "a.bin");
  EXPECT_TRUE(back.config() == m.config());
  const auto x = Tensor<float>(Shape{3, 8, 16}, std::vector<float>(384, 0.25f));
  NoRecord guard;
  EXPECT_EQ(to_vector(back.forward(x)), to_vector(m.forward(x)));
  save_checkpoint(back, dir / "b.bin");
  EXPECT_EQ(read_file(dir / "a.bin"), read_file(dir / "b.bin"));
  EXPECT_EQ(std::filesystem::file_size(dir / "a.bin"), checkpoint_size(m));
}

TEST(Model, CheckpointSizeFromFormat) {
  const auto dir = scratch_dir("model_size");
  const auto m = KarinaModel<float>::build(toy(), 12);
  save_checkpoint(m, dir / "m.bin");
  // magic, version, config length, config text, then per parameter:
  // name length, name, rank, dims, values.
  std::size_t n = 4 + 4 + 4 + m.config().to_text().size();
  for (const auto& p : m.parameters()) n += 4 + p.name.size() + 4 + 4 * p.tensor.rank() + 4 * p.tensor.numel();
  EXPECT_EQ(std::filesystem::file_size(dir / "m.bin"), n);
}

TEST(Model, CheckpointConfigMismatchNamesField) {
  const auto dir = scratch_dir("model_mismatch");
  const auto m = KarinaModel<float>::build(toy(), 13);
  save_checkpoint(m, dir / "m.bin");
  auto other = toy();
  other.stem_kernel = 5;
  try {
    load_checkpoint<float>(dir / "m.bin", other);
    FAIL() << "expected a mismatch error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("stem_kernel"), std::string::npos) << e.what();
  }
}

TEST(Model, CorruptCheckpointIsRejected) {
  const auto dir = scratch_dir("model_corrupt");
  const auto m = KarinaModel<float>::build(toy(), 14);
  save_checkpoint(m, dir / "m.bin");
  const auto bytes = read_file(dir / "m.bin");
  {
    std::ofstream os(dir / "t.bin", std::ios::binary);
    os << bytes.substr(0, bytes.size() - 3);
  }
  EXPECT_ANY_THROW(load_checkpoint<float>(dir / "t.bin"));
  {
    std::ofstream os(dir / "x.bin", std::ios::binary);
    os << "XXXX" << bytes.substr(4);
  }
  EXPECT_THROW(load_checkpoint<float>(dir / "x.bin"), FormatError);
}

TEST(Model, ParameterNamesAreStructured) {
  const auto m = KarinaModel<float>::build(toy(), 15);
  for (auto name : {"stem.conv.weight", "stem.norm.weight", "stages.0.blocks.0.dwconv.weight",
                    "stages.0.blocks.0.se.fc1.weight", "stages.1.scale.conv.weight", "stages.1.blocks.0.gamma",
                    "final.conv.weight", "head.conv.bias"})
    EXPECT_NE(m.find(name), nullptr) << name;
}

TEST(Model, ReplicaAndCast) {
  auto m = KarinaModel<float>::build(toy(), 16);
  auto r = m.replica();
  r.parameters()[0].tensor.mutable_data()[0] = 7.0f;
  EXPECT_EQ(m.parameters()[0].tensor[0], 7.0f);
  auto d = m.cast<double>();
  d.parameters()[0].tensor.mutable_data()[0] = 1.0;
  EXPECT_EQ(m.parameters()[0].tensor[0], 7.0f);
  EXPECT_EQ(d.parameter_count(), m.parameter_count());
}

TEST(ModelProperty, CountInvariantToSeedAndPadding) {
  const auto base = KarinaModel<float>::build(toy(), 0).parameter_count();
  for (auto mode : {PaddingMode::Zero, PaddingMode::CircularZeroPole, PaddingMode::Geocyclic})
    for (std::uint64_t seed : {1, 2, 3}) {
      auto c = toy();
      c.padding_mode = mode;
      EXPECT_EQ(KarinaModel<float>::build(c, seed).parameter_count(), base);
    }
}

TEST(ModelProperty, AblationTogglesCompose) {
  auto plain = toy();
  plain.padding_mode = PaddingMode::Zero;
  plain.se_enabled = false;
  auto padded = plain;
  padded.padding_mode = PaddingMode::Geocyclic;
  auto full = padded;
  full.se_enabled = true;
  const auto mp = KarinaModel<float>::build(plain, 0), mg = KarinaModel<float>::build(padded, 0),
             mf = KarinaModel<float>::build(full, 0);
  EXPECT_EQ(mp.parameter_count(), mg.parameter_count());
  EXPECT_GT(mf.parameter_count(), mg.parameter_count());
  EXPECT_EQ(mp.find("stages.0.blocks.0.se.fc1.weight"), nullptr);
  EXPECT_NE(mf.find("stages.0.blocks.0.se.fc1.weight"), nullptr);
}

TEST(ModelProperty, ForwardPreservesGrid) {
  const auto m = KarinaModel<float>::build(toy(), 17);
  NoRecord guard;
  for (auto [h, w] : {std::pair{4, 8}, std::pair{6, 12}, std::pair{9, 20}})
    EXPECT_EQ(m.forward(Tensor<float>(Shape{3, std::size_t(h), std::size_t(w)}, 0.5f)).shape(),
              (Shape{3, std::size_t(h), std::size_t(w)}));
}

TEST(ModelProperty, RollEquivariance) {
  auto m = KarinaModel<double>::build(toy(), 18);
  perturb(m.parameters(), 19, 0.2);
  const auto x = random_tensor({3, 8, 16}, 20);
  NoRecord guard;
  const auto y = m.forward(x);
  for (std::int64_t s = 0; s < 16; ++s) EXPECT_EQ(to_vector(m.forward(roll_lon(x, s))), to_vector(roll_lon(y, s))) << s;
}

TEST(ModelProperty, FullModelGradCheck) {
  auto c = toy();
  c.layer_scale_init = 0.5;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto m = KarinaModel<double>::build(c, seed);
    perturb(m.parameters(), 1000 + seed, 0.3);
    const auto x = random_tensor({3, 8, 16}, 2000 + seed);
    const auto target = random_tensor({3, 8, 16}, 3000 + seed);
    const auto report = grad_check_report([&] { return l2_loss(m.forward(x), target); },
                                          karina::test::tensors_of(m.parameters()));
    EXPECT_LT(report.max_rel_err, 1e-4) << "seed " << seed << " param " << m.parameters()[report.param].name;
  }
}
