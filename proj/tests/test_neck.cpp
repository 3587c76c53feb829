#include <gtest/gtest.h>

#include "mmseg/mmseg.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace mmseg;
using mmseg::check::random_tensor;

namespace {

EncoderConfig encoder_config(std::size_t d = 16) {
  EncoderConfig cfg;
  cfg.embed_dim = d;
  cfg.num_stages = 3;
  cfg.heads = {1, 1, 1};
  cfg.lora_rank = 2;
  return cfg;
}

void fill(ParameterStore<double>& store, const std::string& name, double value) {
  auto t = store.get(name).value;
  std::fill(t.mutable_data().begin(), t.mutable_data().end(), value);
}

}  // namespace

TEST(Lateral, IdentityWeightsPassThrough) {
  ParameterStore<double> store;
  Rng rng(1);
  Neck<double> neck(encoder_config(16), {0, 1}, store, rng, "neck", false);
  auto w = store.get("neck.lateral0.weight").value;
  std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
  for (std::size_t i = 0; i < 16; ++i) w.mutable_data()[i * 16 + i] = 1.0;
  const auto x = random_tensor<double>({16, 4, 4}, rng);
  EXPECT_EQ(neck.lateral(x, 0).values(), x.values());
}

TEST(Lateral, ChannelsAndPixelOracle) {
  ParameterStore<double> store;
  Rng rng(2);
  Neck<double> neck(encoder_config(16), {0, 1}, store, rng, "neck", false);
  fill(store, "neck.lateral2.bias", 0.0);
  auto bias = store.get("neck.lateral2.bias").value;
  bias.mutable_data()[3] = 0.7;
  for (std::size_t stage = 0; stage < 3; ++stage) {
    const std::size_t c = 16u << stage;
    const auto x = random_tensor<double>({c, 3, 2}, rng);
    const auto z = neck.lateral(x, stage);
    ASSERT_EQ(z.shape(), (Shape{16, 3, 2}));
    const auto& w = store.get("neck.lateral" + std::to_string(stage) + ".weight").value;
    const auto& b = store.get("neck.lateral" + std::to_string(stage) + ".bias").value;
    for (std::size_t o = 0; o < 16; ++o) {
      for (std::size_t p = 0; p < 6; ++p) {
        double v = b.data()[o];
        for (std::size_t i = 0; i < c; ++i) v += w.data()[o * c + i] * x.data()[i * 6 + p];
        EXPECT_NEAR(z.data()[o * 6 + p], v, 1e-6);
      }
    }
  }
  EXPECT_THROW(neck.lateral(random_tensor<double>({16, 2, 2}, rng), 3), ArgumentError);
}

TEST(TopDown, ConstantArithmetic) {
  const std::vector<Tensor<double>> z{Tensor<double>({2, 4, 4}, 2.0), Tensor<double>({2, 2, 2}, 4.0)};
  const auto y = topdown_fuse(z, {0});
  for (double v : y[0].data()) EXPECT_EQ(v, 3.0);
  for (double v : y[1].data()) EXPECT_EQ(v, 4.0);
}

TEST(TopDown, EmptyLevelSetIsIdentity) {
  Rng rng(3);
  const std::vector<Tensor<double>> z{random_tensor<double>({2, 8, 8}, rng), random_tensor<double>({2, 4, 4}, rng),
                                      random_tensor<double>({2, 2, 2}, rng)};
  const auto y = topdown_fuse(z, {});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i].values(), z[i].values());
}

TEST(TopDown, UnfusedLevelsAreBitExact) {
  Rng rng(4);
  const std::vector<Tensor<double>> z{random_tensor<double>({2, 8, 8}, rng), random_tensor<double>({2, 4, 4}, rng),
                                      random_tensor<double>({2, 2, 2}, rng), random_tensor<double>({2, 1, 1}, rng)};
  const auto y = topdown_fuse(z, {0, 2});
  EXPECT_EQ(y[1].values(), z[1].values());
  EXPECT_EQ(y[3].values(), z[3].values());
  EXPECT_NE(y[0].values(), z[0].values());
}

TEST(TopDown, UnrolledTwoStepOracle) {
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    Rng rng(50 + trial);
    const std::vector<Tensor<double>> z{random_tensor<double>({3, 8, 6}, rng), random_tensor<double>({3, 4, 3}, rng),
                                        random_tensor<double>({3, 2, 2}, rng)};
    const auto y = topdown_fuse(z, {0, 1});
    // Y1 = (Z1 + up(Z2))/2, Y0 = (Z0 + up(Y1))/2
    const auto up2 = oracle::upsample_tensor(z[2], 4, 3);
    Tensor<double> y1({3, 4, 3});
    for (std::size_t i = 0; i < y1.numel(); ++i) y1.mutable_data()[i] = (z[1].data()[i] + up2.data()[i]) / 2;
    const auto up1 = oracle::upsample_tensor(y1, 8, 6);
    EXPECT_EQ(y[2].values(), z[2].values());
    for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_NEAR(y[1].data()[i], y1.data()[i], 1e-6);
    for (std::size_t i = 0; i < z[0].numel(); ++i) {
      EXPECT_NEAR(y[0].data()[i], (z[0].data()[i] + up1.data()[i]) / 2, 1e-6);
    }
  }
}

TEST(TopDown, Linearity) {
  Rng rng(5);
  std::vector<Tensor<double>> z{random_tensor<double>({2, 8, 8}, rng), random_tensor<double>({2, 4, 4}, rng),
                                random_tensor<double>({2, 2, 2}, rng)};
  const double alpha = -2.75;
  std::vector<Tensor<double>> scaled;
  for (const auto& t : z) scaled.push_back(scale(t, alpha));
  const auto y = topdown_fuse(z, {0, 1});
  const auto ys = topdown_fuse(scaled, {0, 1});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < y[i].numel(); ++j) EXPECT_NEAR(ys[i].data()[j], alpha * y[i].data()[j], 1e-6);
  }
}

TEST(TopDown, RejectsDeepestOrOutOfRangeLevels) {
  const std::vector<Tensor<double>> z{Tensor<double>({1, 4, 4}), Tensor<double>({1, 2, 2}),
                                      Tensor<double>({1, 1, 1})};
  EXPECT_THROW(topdown_fuse(z, {2}), ArgumentError);
  EXPECT_THROW(topdown_fuse(z, {0, 7}), ArgumentError);
  EXPECT_THROW(topdown_fuse(std::vector<Tensor<double>>{}, {}), ArgumentError);
  ParameterStore<double> store;
  Rng rng(6);
  EXPECT_THROW(Neck<double>(encoder_config(), {2}, store, rng, "neck", false), ArgumentError);
}

TEST(ProjectTriple, ChannelAndSpatialContract) {
  ParameterStore<float> store;
  Rng rng(7);
  auto cfg = encoder_config(32);
  cfg.heads = {1, 2, 4};
  Encoder<float> enc(cfg, store, rng);
  Neck<float> neck(cfg, Neck<float>::default_levels(3), store, rng, "neck", false);
  const auto triple = neck.forward(enc.encode_base(random_tensor<float>({3, 64, 64}, rng)), "rgb");
  EXPECT_EQ(triple.sfm.shape(), (Shape{32, 4, 4}));
  EXPECT_EQ(triple.ifp.shape(), (Shape{8, 8, 8}));
  EXPECT_EQ(triple.ffp.shape(), (Shape{4, 16, 16}));
  EXPECT_EQ(triple.tag, "rgb");
}

TEST(ProjectTriple, ZeroWeightsGiveBias) {
  ParameterStore<double> store;
  Rng rng(8);
  Neck<double> neck(encoder_config(16), {0, 1}, store, rng, "neck", false);
  fill(store, "neck.ffp.weight", 0.0);
  fill(store, "neck.ffp.bias", 1.25);
  const std::vector<Tensor<double>> y{random_tensor<double>({16, 8, 8}, rng), random_tensor<double>({16, 4, 4}, rng),
                                      random_tensor<double>({16, 2, 2}, rng)};
  const auto triple = neck.project_triple(y, "x");
  EXPECT_EQ(triple.ffp.shape(), (Shape{2, 8, 8}));
  for (double v : triple.ffp.data()) EXPECT_EQ(v, 1.25);
  EXPECT_EQ(triple.sfm.values(), y[2].values());
  EXPECT_EQ(triple.ifp.shape(), (Shape{4, 4, 4}));
}

TEST(ProjectTriple, RejectsIndivisibleWidth) {
  ParameterStore<double> store;
  Rng rng(9);
  auto cfg = encoder_config(12);
  EXPECT_THROW(Neck<double>(cfg, {0, 1}, store, rng, "neck", false), DimensionError);
}

TEST(Neck, FreezeFlag) {
  ParameterStore<double> store;
  Rng rng(10);
  Neck<double> trainable(encoder_config(), {0, 1}, store, rng, "a", false);
  Neck<double> frozen(encoder_config(), {0, 1}, store, rng, "b", true);
  for (const auto& p : store.all()) EXPECT_EQ(p.frozen, p.name[0] == 'b') << p.name;
}
