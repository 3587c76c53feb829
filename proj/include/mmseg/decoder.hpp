#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mmseg/neck.hpp"
#include "mmseg/numerics.hpp"

namespace mmseg {

struct DecoderConfig {
  std::size_t embed_dim = 32;
  std::size_t num_classes = 5;
  std::size_t rounds = 2;    // cross-attention + feed-forward rounds
  std::size_t ffn_mult = 2;  // feed-forward width = ffn_mult · d
  double dropout = 0.1;
};

/// Logits of the two prediction pathways.
template <typename T>
struct DualLogits {
  Tensor<T> s0;  // [classes × H_0 × W_0], token decoder + hierarchical refinement
  Tensor<T> s1;  // [classes × H_t × W_t], auxiliary MLP head
};

/// Fixed 2-D sine/cosine code of shape [d × h × w], flattened.
///
/// Channels [0, d/2) hold sines and [d/2, d) cosines. Inside each half the
/// first ceil(d/4) slots encode the row index and the rest the column index,
/// with frequencies 10000^(-t/G) for slot t of a group of size G.
template <typename T>
std::vector<T> sine_position_encoding(std::size_t d, std::size_t h, std::size_t w) {
  if (d == 0 || d % 2 != 0) throw ArgumentError("sine encoding: channel count " + std::to_string(d) + " must be even");
  const std::size_t half = d / 2;
  const std::size_t row_slots = half - half / 2;
  const std::size_t col_slots = half / 2;
  std::vector<T> pe(d * h * w);
  for (std::size_t j = 0; j < half; ++j) {
    const bool is_row = j < row_slots;
    const std::size_t t = is_row ? j : j - row_slots;
    const std::size_t group = is_row ? row_slots : col_slots;
    const double freq = std::pow(10000.0, -static_cast<double>(t) / static_cast<double>(group));
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double angle = static_cast<double>(is_row ? y : x) * freq;
        pe[(j * h + y) * w + x] = static_cast<T>(std::sin(angle));
        pe[((half + j) * h + y) * w + x] = static_cast<T>(std::cos(angle));
      }
    }
  }
  return pe;
}

template <typename T>
Tensor<T> add_sine_pe(const Tensor<T>& sfm) {
  if (sfm.rank() != 3) throw DimensionError("add_sine_pe: expected [d×H×W], got " + shape_str(sfm.shape()));
  const auto pe = sine_position_encoding<T>(sfm.dim(0), sfm.dim(1), sfm.dim(2));
  return add_constant(sfm, std::span<const T>(pe));
}

/// Upsamples both pathways to H×W and averages them.
template <typename T>
Tensor<T> combine_predictions(const Tensor<T>& s0, const Tensor<T>& s1, std::size_t height, std::size_t width) {
  if (s0.rank() != 3 || s1.rank() != 3 || s0.dim(0) != s1.dim(0)) {
    throw DimensionError("combine_predictions: class mismatch " + shape_str(s0.shape()) + " vs " +
                         shape_str(s1.shape()));
  }
  return scale(add(upsample_bilinear(s0, height, width), upsample_bilinear(s1, height, width)), T(0.5));
}

/// Pathway 1: learnable class tokens cross-attend to the semantic map, a
/// hypernetwork turns each token into a per-pixel classifier, and the low
/// resolution logits are refined with the intermediate and fine maps.
template <typename T>
class MaskDecoder {
 public:
  struct Round {
    Tensor<T> wq, wk, wv, wo;  // [d × d]
    Tensor<T> ffn_w1, ffn_b1;  // [d × f], [f]
    Tensor<T> ffn_w2, ffn_b2;  // [f × d], [d]
  };

  MaskDecoder(const DecoderConfig& config, ParameterStore<T>& store, Rng& rng, const std::string& prefix)
      : config_(config) {
    const std::size_t d = config.embed_dim, c = config.num_classes, f = config.ffn_mult * d;
    const double std_d = 1.0 / std::sqrt(double(d));
    tokens_ = store.add_normal(prefix + ".tokens", {c, d}, 1.0, rng, false);
    for (std::size_t r = 0; r < config.rounds; ++r) {
      const std::string p = prefix + ".round" + std::to_string(r);
      Round round;
      round.wq = store.add_normal(p + ".wq", {d, d}, std_d, rng, false);
      round.wk = store.add_normal(p + ".wk", {d, d}, std_d, rng, false);
      round.wv = store.add_normal(p + ".wv", {d, d}, std_d, rng, false);
      round.wo = store.add_normal(p + ".wo", {d, d}, std_d, rng, false);
      round.ffn_w1 = store.add_normal(p + ".ffn.w1", {d, f}, std_d, rng, false);
      round.ffn_b1 = store.add_constant(p + ".ffn.b1", {f}, T(0), false);
      round.ffn_w2 = store.add_normal(p + ".ffn.w2", {f, d}, 1.0 / std::sqrt(double(f)), rng, false);
      round.ffn_b2 = store.add_constant(p + ".ffn.b2", {d}, T(0), false);
      rounds_.push_back(std::move(round));
    }
    hyper_w1_ = store.add_normal(prefix + ".hyper.w1", {d, d}, std_d, rng, false);
    hyper_b1_ = store.add_constant(prefix + ".hyper.b1", {d}, T(0), false);
    hyper_w2_ = store.add_normal(prefix + ".hyper.w2", {d, d}, std_d, rng, false);
    hyper_b2_ = store.add_constant(prefix + ".hyper.b2", {d}, T(0), false);
    ifp_w_ = store.add_normal(prefix + ".refine.ifp.weight", {c, d / 4}, 1.0 / std::sqrt(double(d / 4)), rng, false);
    ifp_b_ = store.add_constant(prefix + ".refine.ifp.bias", {c}, T(0), false);
    ffp_w_ = store.add_normal(prefix + ".refine.ffp.weight", {c, d / 8}, 1.0 / std::sqrt(double(d / 8)), rng, false);
    ffp_b_ = store.add_constant(prefix + ".refine.ffp.bias", {c}, T(0), false);
  }

  /// Low-resolution logits [classes × H_n × W_n] from the encoded semantic map.
  Tensor<T> mask_decode(const Tensor<T>& sfm_pe) const {
    const std::size_t d = config_.embed_dim;
    if (sfm_pe.rank() != 3 || sfm_pe.dim(0) != d) {
      throw DimensionError("mask_decode: expected [" + std::to_string(d) + "×H×W], got " + shape_str(sfm_pe.shape()));
    }
    const std::size_t h = sfm_pe.dim(1), w = sfm_pe.dim(2);
    const auto keys_t = reshape(sfm_pe, Shape{d, h * w});  // [d × HW]
    const auto keys = transpose(keys_t);                   // [HW × d]
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(d));
    Tensor<T> tok = tokens_;
    for (const auto& r : rounds_) {
      const auto q = matmul(tok, r.wq);
      const auto k = matmul(keys, r.wk);
      const auto v = matmul(keys, r.wv);
      const auto attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt), 1);
      tok = add(tok, matmul(matmul(attn, v), r.wo));
      const auto hidden = gelu(linear(tok, r.ffn_w1, r.ffn_b1));
      tok = add(tok, linear(hidden, r.ffn_w2, r.ffn_b2));
    }
    const auto hyper = linear(gelu(linear(tok, hyper_w1_, hyper_b1_)), hyper_w2_, hyper_b2_);  // [C × d]
    return reshape(matmul(hyper, keys_t), Shape{config_.num_classes, h, w});
  }

  /// Two upsample-and-add steps through the intermediate and fine maps.
  Tensor<T> refine(const Tensor<T>& s_low, const Tensor<T>& ifp, const Tensor<T>& ffp) const {
    if (ifp.rank() != 3 || ffp.rank() != 3) throw DimensionError("refine: ifp/ffp must be [C×H×W]");
    const auto inter = add(upsample_bilinear(s_low, ifp.dim(1), ifp.dim(2)), conv1x1(ifp, ifp_w_, ifp_b_));
    return add(upsample_bilinear(inter, ffp.dim(1), ffp.dim(2)), conv1x1(ffp, ffp_w_, ffp_b_));
  }

  Tensor<T> forward(const FeatureTriple<T>& triple) const {
    return refine(mask_decode(add_sine_pe(triple.sfm)), triple.ifp, triple.ffp);
  }

  const Tensor<T>& tokens() const { return tokens_; }

 private:
  DecoderConfig config_;
  Tensor<T> tokens_;
  std::vector<Round> rounds_;
  Tensor<T> hyper_w1_, hyper_b1_, hyper_w2_, hyper_b2_;
  Tensor<T> ifp_w_, ifp_b_, ffp_w_, ffp_b_;
};

/// Pathway 2: per-scale pointwise projections to d/8 channels, bilinear
/// upsampling to the fine resolution, concatenation, dropout, a fusing
/// projection and a class predictor.
template <typename T>
class AuxHead {
 public:
  AuxHead(const DecoderConfig& config, ParameterStore<T>& store, Rng& rng, const std::string& prefix)
      : config_(config) {
    const std::size_t d = config.embed_dim, e = d / 8, c = config.num_classes;
    auto proj = [&](const std::string& name, std::size_t out, std::size_t in, Tensor<T>& w, Tensor<T>& b) {
      w = store.add_normal(prefix + "." + name + ".weight", {out, in}, 1.0 / std::sqrt(double(in)), rng, false);
      b = store.add_constant(prefix + "." + name + ".bias", {out}, T(0), false);
    };
    proj("mlp_sfm", e, d, sfm_w_, sfm_b_);
    proj("mlp_ifp", e, d / 4, ifp_w_, ifp_b_);
    proj("mlp_ffp", e, e, ffp_w_, ffp_b_);
    proj("fuse", e, 3 * e, fuse_w_, fuse_b_);
    proj("predict", c, e, pred_w_, pred_b_);
  }

  /// Logits at the fine-map resolution. Dropout is active only when `train`
  /// is set and `rng` is provided.
  Tensor<T> forward(const FeatureTriple<T>& triple, bool train, Rng* rng) const {
    const std::size_t ht = triple.ffp.dim(1), wt = triple.ffp.dim(2);
    const auto a = upsample_bilinear(conv1x1(triple.sfm, sfm_w_, sfm_b_), ht, wt);
    const auto b = upsample_bilinear(conv1x1(triple.ifp, ifp_w_, ifp_b_), ht, wt);
    const auto c = upsample_bilinear(conv1x1(triple.ffp, ffp_w_, ffp_b_), ht, wt);
    auto stacked = concat_channels<T>({a, b, c});
    if (train && rng && config_.dropout > 0.0) stacked = dropout(stacked, config_.dropout, *rng);
    return conv1x1(gelu(conv1x1(stacked, fuse_w_, fuse_b_)), pred_w_, pred_b_);
  }

 private:
  DecoderConfig config_;
  Tensor<T> sfm_w_, sfm_b_, ifp_w_, ifp_b_, ffp_w_, ffp_b_;
  Tensor<T> fuse_w_, fuse_b_, pred_w_, pred_b_;
};

template <typename T>
class Decoder {
 public:
  Decoder(const DecoderConfig& config, ParameterStore<T>& store, Rng& rng, const std::string& prefix)
      : config_(validated(config)),
        mask_(config, store, rng, prefix + ".mask"),
        aux_(config, store, rng, prefix + ".aux") {}

  DualLogits<T> forward(const FeatureTriple<T>& triple, bool train, Rng* rng) const {
    return {mask_.forward(triple), aux_.forward(triple, train, rng)};
  }

  const MaskDecoder<T>& mask_decoder() const { return mask_; }
  const AuxHead<T>& aux_head() const { return aux_; }
  const DecoderConfig& config() const { return config_; }

 private:
  static const DecoderConfig& validated(const DecoderConfig& config) {
    if (config.embed_dim == 0 || config.embed_dim % 8 != 0) {
      throw DimensionError("decoder: embed_dim must be a positive multiple of 8");
    }
    if (config.num_classes == 0) throw ArgumentError("decoder: need at least one class");
    return config;
  }

  DecoderConfig config_;
  MaskDecoder<T> mask_;
  AuxHead<T> aux_;
};

}  // namespace mmseg
