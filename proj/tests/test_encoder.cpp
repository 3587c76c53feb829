#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "mmseg/mmseg.hpp"
#include "test_support.hpp"

using namespace mmseg;
using mmseg::check::random_tensor;

namespace {

EncoderConfig small_config() {
  EncoderConfig cfg;
  cfg.embed_dim = 32;
  cfg.num_stages = 3;
  cfg.heads = {1, 2, 4};
  cfg.window = 4;
  cfg.lora_rank = 4;
  return cfg;
}

void randomize(Tensor<double> t, Rng& rng, double stddev) {
  for (auto& v : t.mutable_data()) v = rng.normal(0.0, stddev);
}

void randomize(Tensor<float> t, Rng& rng, double stddev) {
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.normal(0.0, stddev));
}

// Row-major dense matrix helpers for the attention oracle.
using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor<double>& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.data()[i * t.dim(1) + j];
  }
  return m;
}

Mat mat_mul(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < b.size(); ++k) {
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    }
  }
  return out;
}

Mat mat_add(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[0].size(); ++j) out[i][j] += b[i][j];
  }
  return out;
}

}  // namespace

TEST(PatchEmbed, ScalarAffine) {
  PatchEmbedding<double> pe{Tensor<double>({1, 1}, std::vector<double>{2.0}),
                            Tensor<double>({1}, std::vector<double>{0.5}), 1, 1};
  const auto out = patch_embed(Tensor<double>({1, 1, 1}, std::vector<double>{3.0}), pe);
  EXPECT_EQ(out.tokens.item(), 6.5);
}

TEST(PatchEmbed, GridExtent) {
  ParameterStore<float> store;
  Rng rng(1);
  Encoder<float> enc(small_config(), store, rng);
  const auto grid = patch_embed(Tensor<float>({3, 64, 64}, 0.25f), enc.patch_embedding());
  EXPECT_EQ(grid.h, 16u);
  EXPECT_EQ(grid.w, 16u);
  EXPECT_EQ(grid.tokens.shape(), (Shape{256, 32}));
}

TEST(PatchEmbed, ZeroWeightsGiveBias) {
  PatchEmbedding<double> pe{Tensor<double>({2 * 4 * 4, 3}, 0.0), Tensor<double>({3}, std::vector<double>{1.5, -2, 0.25}),
                            4, 2};
  Rng rng(2);
  const auto grid = patch_embed(random_tensor<double>({2, 8, 12}, rng), pe);
  ASSERT_EQ(grid.tokens.shape(), (Shape{6, 3}));
  for (std::size_t t = 0; t < 6; ++t) {
    EXPECT_EQ(grid.tokens.data()[t * 3 + 0], 1.5);
    EXPECT_EQ(grid.tokens.data()[t * 3 + 1], -2.0);
    EXPECT_EQ(grid.tokens.data()[t * 3 + 2], 0.25);
  }
}

TEST(PatchEmbed, RejectsChannelMismatch) {
  PatchEmbedding<double> pe{Tensor<double>({3 * 16, 4}, 0.0), Tensor<double>({4}, 0.0), 4, 3};
  EXPECT_THROW(patch_embed(Tensor<double>({1, 8, 8}, 0.0), pe), DimensionError);
}

TEST(WindowAttention, SingleTokenIsValuePlusResidual) {
  Rng rng(3);
  const std::size_t c = 3;
  AttentionWeights<double> w{random_tensor<double>({c, c}, rng), random_tensor<double>({c, c}, rng),
                             random_tensor<double>({c, c}, rng), Tensor<double>({c, c}, 0.0)};
  for (std::size_t i = 0; i < c; ++i) w.wo.mutable_data()[i * c + i] = 1.0;
  const auto x = random_tensor<double>({1, c}, rng);
  const auto out = window_attention(TokenGrid<double>{x, 1, 1}, w, nullptr, 1, 1);
  const auto v = to_mat(w.wv);
  for (std::size_t j = 0; j < c; ++j) {
    double value = 0;
    for (std::size_t k = 0; k < c; ++k) value += x.data()[k] * v[k][j];
    EXPECT_NEAR(out.tokens.data()[j], value + x.data()[j], 1e-12);
  }
}

TEST(WindowAttention, MatchesDenseOracleWithAdapter) {
  const std::size_t c = 4, heads = 2, dk = c / heads, r = 2;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    Rng rng(100 + trial);
    AttentionWeights<double> w{random_tensor<double>({c, c}, rng, 0.5), random_tensor<double>({c, c}, rng, 0.5),
                               random_tensor<double>({c, c}, rng, 0.5), random_tensor<double>({c, c}, rng, 0.5)};
    LoraAdapter<double> ad;
    ad.rank = r;
    ad.q_a = random_tensor<double>({c, r}, rng);
    ad.q_b = random_tensor<double>({r, c}, rng, 0.3);
    ad.v_a = random_tensor<double>({c, r}, rng);
    ad.v_b = random_tensor<double>({r, c}, rng, 0.3);
    const auto x = random_tensor<double>({4, c}, rng);
    const auto out = window_attention(TokenGrid<double>{x, 2, 2}, w, &ad, 2, heads);

    const Mat xm = to_mat(x);
    const Mat q = mat_mul(xm, mat_add(to_mat(w.wq), mat_mul(to_mat(ad.q_a), to_mat(ad.q_b))));
    const Mat k = mat_mul(xm, to_mat(w.wk));
    const Mat v = mat_mul(xm, mat_add(to_mat(w.wv), mat_mul(to_mat(ad.v_a), to_mat(ad.v_b))));
    Mat attended(4, std::vector<double>(c, 0.0));
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < 4; ++t) {
        double scores[4], total = 0;
        for (std::size_t u = 0; u < 4; ++u) {
          double s = 0;
          for (std::size_t j = 0; j < dk; ++j) s += q[t][h * dk + j] * k[u][h * dk + j];
          scores[u] = std::exp(s / std::sqrt(double(dk)));
          total += scores[u];
        }
        for (std::size_t u = 0; u < 4; ++u) {
          for (std::size_t j = 0; j < dk; ++j) attended[t][h * dk + j] += scores[u] / total * v[u][h * dk + j];
        }
      }
    }
    const Mat expected = mat_add(xm, mat_mul(attended, to_mat(w.wo)));
    for (std::size_t t = 0; t < 4; ++t) {
      for (std::size_t j = 0; j < c; ++j) EXPECT_NEAR(out.tokens.data()[t * c + j], expected[t][j], 1e-5);
    }
  }
}

TEST(WindowAttention, ZeroAdapterIsBitIdenticalToBase) {
  ParameterStore<float> store;
  Rng rng(4);
  Encoder<float> enc(small_config(), store, rng);
  enc.add_modality("rgb", store, rng);
  Rng data(5);
  const auto x = random_tensor<float>({64, 32}, data);
  const TokenGrid<float> grid{x, 8, 8};
  const auto with = window_attention(grid, enc.stages()[0].attention, &enc.adapters("rgb")[0], 4, 1);
  const auto without = window_attention(grid, enc.stages()[0].attention, nullptr, 4, 1);
  EXPECT_EQ(with.tokens.values(), without.tokens.values());
}

TEST(WindowAttention, RejectsIndivisibleHeads) {
  Rng rng(6);
  AttentionWeights<double> w{random_tensor<double>({6, 6}, rng), random_tensor<double>({6, 6}, rng),
                             random_tensor<double>({6, 6}, rng), random_tensor<double>({6, 6}, rng)};
  EXPECT_THROW(window_attention(TokenGrid<double>{random_tensor<double>({4, 6}, rng), 2, 2}, w, nullptr, 2, 4),
               DimensionError);
}

TEST(WindowAttention, PerturbationStaysInsideWindow) {
  Rng rng(7);
  const std::size_t c = 8;
  AttentionWeights<double> w{random_tensor<double>({c, c}, rng), random_tensor<double>({c, c}, rng),
                             random_tensor<double>({c, c}, rng), random_tensor<double>({c, c}, rng)};
  const std::size_t h = 6, wd = 8, window = 2;  // 3x4 windows
  const auto x = random_tensor<double>({h * wd, c}, rng);
  const auto base = window_attention(TokenGrid<double>{x, h, wd}, w, nullptr, window, 2);
  auto bumped = x.detach();
  const std::size_t ty = 3, tx = 4;  // inside window (1, 2)
  bumped.mutable_data()[(ty * wd + tx) * c + 5] += 10.0;
  const auto moved = window_attention(TokenGrid<double>{bumped, h, wd}, w, nullptr, window, 2);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < wd; ++xx) {
      const bool same_window = y / window == ty / window && xx / window == tx / window;
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = (y * wd + xx) * c + j;
        if (same_window) continue;
        EXPECT_EQ(base.tokens.data()[i], moved.tokens.data()[i]) << "token " << y << "," << xx;
      }
    }
  }
  EXPECT_NE(base.tokens.data()[(ty * wd + tx + 1) * c], moved.tokens.data()[(ty * wd + tx + 1) * c]);
}

TEST(Encoder, StageShapes) {
  ParameterStore<float> store;
  Rng rng(8);
  Encoder<float> enc(small_config(), store, rng);
  enc.add_modality("rgb", store, rng);
  Rng data(9);
  const auto features = enc.encode(random_tensor<float>({3, 64, 64}, data), "rgb");
  ASSERT_EQ(features.size(), 3u);
  EXPECT_EQ(features[0].shape(), (Shape{32, 16, 16}));
  EXPECT_EQ(features[1].shape(), (Shape{64, 8, 8}));
  EXPECT_EQ(features[2].shape(), (Shape{128, 4, 4}));
}

TEST(Encoder, NonDivisibleInputIsPadded) {
  ParameterStore<float> store;
  Rng rng(10);
  Encoder<float> enc(small_config(), store, rng);
  Rng data(11);
  const auto features = enc.encode_base(random_tensor<float>({3, 30, 45}, data));
  EXPECT_EQ(features[0].shape(), (Shape{32, 8, 12}));
  EXPECT_EQ(features[1].shape(), (Shape{64, 4, 6}));
  EXPECT_EQ(features[2].shape(), (Shape{128, 2, 3}));
}

TEST(Encoder, FreshAdaptersMatchFrozenBaseBitwise) {
  ParameterStore<float> store;
  Rng rng(12);
  Encoder<float> enc(small_config(), store, rng);
  enc.add_modality("rgb", store, rng);
  enc.add_modality("depth", store, rng);
  Rng data(13);
  const auto x = random_tensor<float>({3, 64, 64}, data);
  const auto base = enc.encode_base(x);
  for (const std::string m : {"rgb", "depth"}) {
    const auto adapted = enc.encode(x, m);
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(adapted[i].values(), base[i].values());
  }
}

TEST(Encoder, IdenticalAdaptersGiveIdenticalFeatures) {
  ParameterStore<float> store;
  Rng rng(14);
  Encoder<float> enc(small_config(), store, rng);
  enc.add_modality("a", store, rng);
  enc.add_modality("b", store, rng);
  Rng fill(15);
  for (std::size_t s = 0; s < 3; ++s) {
    const auto& a = enc.adapters("a")[s];
    const auto& b = enc.adapters("b")[s];
    for (auto [src, dst] : {std::pair{a.q_a, b.q_a}, {a.q_b, b.q_b}, {a.v_a, b.v_a}, {a.v_b, b.v_b}}) {
      randomize(src, fill, 0.2);
      std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
    }
  }
  Rng data(16);
  const auto x = random_tensor<float>({3, 32, 32}, data);
  const auto fa = enc.encode(x, "a");
  const auto fb = enc.encode(x, "b");
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_EQ(fa[i].values(), fb[i].values());
}

TEST(Encoder, AdapterSetsAreIndependent) {
  ParameterStore<float> store;
  Rng rng(17);
  Encoder<float> enc(small_config(), store, rng);
  enc.add_modality("a", store, rng);
  enc.add_modality("b", store, rng);
  Rng fill(18);
  for (const std::string m : {"a", "b"}) {
    for (const auto& ad : enc.adapters(m)) {
      randomize(ad.q_b, fill, 0.2);
      randomize(ad.v_b, fill, 0.2);
    }
  }
  Rng data(19);
  const auto x = random_tensor<float>({3, 32, 32}, data);
  const auto a_before = enc.encode(x, "a");
  const auto b_before = enc.encode(x, "b");
  for (const auto& ad : enc.adapters("a")) {
    auto qb = ad.q_b;
    auto vb = ad.v_b;
    std::fill(qb.mutable_data().begin(), qb.mutable_data().end(), 0.0f);
    std::fill(vb.mutable_data().begin(), vb.mutable_data().end(), 0.0f);
  }
  const auto a_after = enc.encode(x, "a");
  const auto b_after = enc.encode(x, "b");
  EXPECT_NE(a_after.back().values(), a_before.back().values());
  for (std::size_t i = 0; i < b_before.size(); ++i) EXPECT_EQ(b_after[i].values(), b_before[i].values());
}

TEST(Encoder, UnknownModalityAndDuplicates) {
  ParameterStore<float> store;
  Rng rng(20);
  Encoder<float> enc(small_config(), store, rng);
  enc.add_modality("rgb", store, rng);
  EXPECT_THROW(enc.encode(Tensor<float>({3, 16, 16}, 0.0f), "lidar"), ArgumentError);
  EXPECT_THROW(enc.add_modality("rgb", store, rng), ArgumentError);
}

TEST(Encoder, ConfigValidation) {
  auto cfg = small_config();
  cfg.heads = {1, 3, 4};
  EXPECT_THROW(cfg.validate(), DimensionError);
  cfg = small_config();
  cfg.heads = {1, 2};
  EXPECT_THROW(cfg.validate(), ArgumentError);
  cfg = small_config();
  cfg.lora_rank = 0;
  EXPECT_THROW(cfg.validate(), ArgumentError);
}

TEST(Encoder, BaseFrozenAdaptersTrainable) {
  ParameterStore<float> store;
  Rng rng(21);
  Encoder<float> enc(small_config(), store, rng);
  enc.add_modality("rgb", store, rng);
  for (const auto& p : store.all()) {
    const bool is_adapter = p.name.find(".lora.") != std::string::npos;
    EXPECT_EQ(p.frozen, !is_adapter) << p.name;
  }
  for (const auto& s : enc.stages()) {
    EXPECT_FALSE(s.attention.wq.requires_grad());
    EXPECT_FALSE(s.attention.wv.requires_grad());
  }
}

TEST(Encoder, AdapterUpdateRankBound) {
  ParameterStore<double> store;
  Rng rng(22);
  auto cfg = small_config();
  cfg.lora_rank = 3;
  Encoder<double> enc(cfg, store, rng);
  enc.add_modality("rgb", store, rng);
  Rng fill(23);
  for (const auto& ad : enc.adapters("rgb")) {
    randomize(ad.q_b, fill, 1.0);
    randomize(ad.v_b, fill, 1.0);
    for (const auto& delta : {ad.delta_q(), ad.delta_v()}) {
      const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
          delta.data().data(), delta.dim(0), delta.dim(1));
      const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
      const auto sv = svd.singularValues();
      std::size_t rank = 0;
      for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv[i] > 1e-4 * sv[0];
      EXPECT_EQ(rank, 3u);
    }
  }
}
