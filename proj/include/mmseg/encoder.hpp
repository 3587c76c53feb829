#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "mmseg/numerics.hpp"

namespace mmseg {

/// Hierarchical backbone geometry. Stage i has stride patch_stride·2^i and
/// embed_dim·2^i channels.
struct EncoderConfig {
  std::size_t in_channels = 3;
  std::size_t embed_dim = 32;
  std::size_t num_stages = 3;
  std::size_t window = 4;
  std::vector<std::size_t> heads{1, 2, 4};
  std::size_t patch_stride = 4;
  std::size_t lora_rank = 32;

  std::size_t stage_channels(std::size_t stage) const { return embed_dim << stage; }
  std::size_t stage_stride(std::size_t stage) const { return patch_stride << stage; }
  std::size_t last_stage() const { return num_stages - 1; }

  void validate() const {
    if (in_channels == 0 || embed_dim == 0 || window == 0 || patch_stride == 0) {
      throw ArgumentError("encoder: in_channels, embed_dim, window and patch_stride must be positive");
    }
    if (num_stages < 2) throw ArgumentError("encoder: at least 2 stages are required");
    if (heads.size() != num_stages) {
      throw ArgumentError("encoder: " + std::to_string(heads.size()) + " head counts for " +
                          std::to_string(num_stages) + " stages");
    }
    for (std::size_t i = 0; i < num_stages; ++i) {
      if (heads[i] == 0 || stage_channels(i) % heads[i] != 0) {
        throw DimensionError("encoder: " + std::to_string(heads[i]) + " heads do not divide " +
                             std::to_string(stage_channels(i)) + " channels at stage " + std::to_string(i));
      }
    }
    if (lora_rank == 0 || lora_rank > embed_dim) {
      throw ArgumentError("encoder: LoRA rank must be in [1, embed_dim]");
    }
  }
};

/// Tokens [h·w × C] laid out row-major over an h×w grid.
template <typename T>
struct TokenGrid {
  Tensor<T> tokens;
  std::size_t h = 0;
  std::size_t w = 0;
};

template <typename T>
struct PatchEmbedding {
  Tensor<T> weight;  // [s·s·C × d]
  Tensor<T> bias;    // [d]
  std::size_t stride = 4;
  std::size_t in_channels = 3;
};

/// Projection matrices in row-vector convention (tokens · W).
template <typename T>
struct AttentionWeights {
  Tensor<T> wq, wk, wv, wo;  // each [C × C]
};

template <typename T>
struct StageWeights {
  AttentionWeights<T> attention;
  Tensor<T> downsample;  // [C_i × C_{i+1}]; undefined on the last stage
};

/// Low-rank query/value update for one stage of one modality.
template <typename T>
struct LoraAdapter {
  Tensor<T> q_a, q_b;  // [C × r], [r × C]
  Tensor<T> v_a, v_b;
  std::size_t rank = 0;
  std::string modality;
  std::size_t stage = 0;

  Tensor<T> delta_q() const {
    NoGradGuard guard;
    return matmul(q_a, q_b);
  }
  Tensor<T> delta_v() const {
    NoGradGuard guard;
    return matmul(v_a, v_b);
  }
};

/// Affine map of every non-overlapping stride×stride patch of a [C×H×W]
/// raster to d dimensions. Extents are zero-padded to a multiple of stride.
template <typename T>
TokenGrid<T> patch_embed(const Tensor<T>& x, const PatchEmbedding<T>& pe) {
  if (x.rank() != 3 || x.dim(0) != pe.in_channels) {
    throw DimensionError("patch_embed: expected " + std::to_string(pe.in_channels) + " input channels, got " +
                         shape_str(x.shape()));
  }
  const std::size_t h = (x.dim(1) + pe.stride - 1) / pe.stride;
  const std::size_t w = (x.dim(2) + pe.stride - 1) / pe.stride;
  return {linear(extract_patches(x, pe.stride), pe.weight, pe.bias), h, w};
}

/// One residual windowed-attention block. With an adapter, Q and V use the
/// augmented projections x·W + (x·A)·B; K always uses the frozen weight.
template <typename T>
TokenGrid<T> window_attention(const TokenGrid<T>& x, const AttentionWeights<T>& weights,
                              const std::type_identity_t<LoraAdapter<T>>* adapter, std::size_t window,
                              std::size_t heads) {
  const std::size_t c = x.tokens.dim(1);
  if (heads == 0 || c % heads != 0) {
    throw DimensionError("window_attention: " + std::to_string(heads) + " heads do not divide " +
                         std::to_string(c) + " channels");
  }
  const std::size_t ph = (x.h + window - 1) / window * window;
  const std::size_t pw = (x.w + window - 1) / window * window;
  const auto padded = pad_grid(x.tokens, x.h, x.w, ph, pw);

  auto q = matmul(padded, weights.wq);
  const auto k = matmul(padded, weights.wk);
  auto v = matmul(padded, weights.wv);
  if (adapter) {
    q = add(q, matmul(matmul(padded, adapter->q_a), adapter->q_b));
    v = add(v, matmul(matmul(padded, adapter->v_a), adapter->v_b));
  }
  const auto attended = windowed_attention(q, k, v, ph, pw, window, heads);
  const auto projected = crop_grid(matmul(attended, weights.wo), ph, pw, x.h, x.w);
  return {add(x.tokens, projected), x.h, x.w};
}

/// Frozen hierarchical backbone shared by all modalities, plus one set of
/// trainable LoRA adapters per registered modality.
template <typename T>
class Encoder {
 public:
  Encoder(EncoderConfig config, ParameterStore<T>& store, Rng& rng, std::string prefix = "encoder")
      : config_(std::move(config)), prefix_(std::move(prefix)) {
    config_.validate();
    const std::size_t s = config_.patch_stride;
    const std::size_t patch_len = s * s * config_.in_channels;
    patch_.stride = s;
    patch_.in_channels = config_.in_channels;
    patch_.weight = store.add_normal(prefix_ + ".patch.weight", {patch_len, config_.embed_dim},
                                     1.0 / std::sqrt(static_cast<double>(patch_len)), rng, true);
    patch_.bias = store.add_constant(prefix_ + ".patch.bias", {config_.embed_dim}, T(0), true);
    for (std::size_t i = 0; i < config_.num_stages; ++i) {
      const std::size_t c = config_.stage_channels(i);
      const double std_c = 1.0 / std::sqrt(static_cast<double>(c));
      const std::string p = prefix_ + ".stage" + std::to_string(i);
      StageWeights<T> sw;
      sw.attention.wq = store.add_normal(p + ".attn.wq", {c, c}, std_c, rng, true);
      sw.attention.wk = store.add_normal(p + ".attn.wk", {c, c}, std_c, rng, true);
      sw.attention.wv = store.add_normal(p + ".attn.wv", {c, c}, std_c, rng, true);
      sw.attention.wo = store.add_normal(p + ".attn.wo", {c, c}, std_c, rng, true);
      if (i + 1 < config_.num_stages) {
        sw.downsample = store.add_normal(p + ".downsample", {c, config_.stage_channels(i + 1)}, std_c, rng, true);
      }
      stages_.push_back(std::move(sw));
    }
  }

  /// Registers a modality with fresh adapters: A ~ N(0, 1/r), B = 0.
  void add_modality(const std::string& modality, ParameterStore<T>& store, Rng& rng) {
    if (adapters_.count(modality)) throw ArgumentError("encoder: modality '" + modality + "' already registered");
    const std::size_t r = config_.lora_rank;
    const double std_a = 1.0 / std::sqrt(static_cast<double>(r));
    std::vector<LoraAdapter<T>> set;
    for (std::size_t i = 0; i < config_.num_stages; ++i) {
      const std::size_t c = config_.stage_channels(i);
      const std::string p = prefix_ + ".lora." + modality + ".stage" + std::to_string(i);
      LoraAdapter<T> a;
      a.rank = r;
      a.modality = modality;
      a.stage = i;
      a.q_a = store.add_normal(p + ".q_a", {c, r}, std_a, rng, false);
      a.q_b = store.add_constant(p + ".q_b", {r, c}, T(0), false);
      a.v_a = store.add_normal(p + ".v_a", {c, r}, std_a, rng, false);
      a.v_b = store.add_constant(p + ".v_b", {r, c}, T(0), false);
      set.push_back(std::move(a));
    }
    adapters_.emplace(modality, std::move(set));
  }

  bool has_modality(const std::string& modality) const { return adapters_.count(modality) != 0; }

  const std::vector<LoraAdapter<T>>& adapters(const std::string& modality) const {
    auto it = adapters_.find(modality);
    if (it == adapters_.end()) throw ArgumentError("encoder: unregistered modality '" + modality + "'");
    return it->second;
  }

  /// Multi-scale features X_0..X_n, each [C_i × H_i × W_i].
  std::vector<Tensor<T>> encode(const Tensor<T>& x, const std::string& modality) const {
    return run(x, &adapters(modality));
  }

  /// Same pipeline with the frozen weights only.
  std::vector<Tensor<T>> encode_base(const Tensor<T>& x) const { return run(x, nullptr); }

  const EncoderConfig& config() const { return config_; }
  const PatchEmbedding<T>& patch_embedding() const { return patch_; }
  const std::vector<StageWeights<T>>& stages() const { return stages_; }

 private:
  std::vector<Tensor<T>> run(const Tensor<T>& x, const std::vector<LoraAdapter<T>>* adapters) const {
    TokenGrid<T> grid = patch_embed(x, patch_);
    std::vector<Tensor<T>> features;
    for (std::size_t i = 0; i < config_.num_stages; ++i) {
      const LoraAdapter<T>* adapter = adapters ? &(*adapters)[i] : nullptr;
      grid = window_attention(grid, stages_[i].attention, adapter, config_.window, config_.heads[i]);
      features.push_back(tokens_to_map(grid.tokens, grid.h, grid.w));
      if (i + 1 < config_.num_stages) {
        const auto pooled = avg_pool2x2(grid.tokens, grid.h, grid.w);
        grid = {matmul(pooled, stages_[i].downsample), (grid.h + 1) / 2, (grid.w + 1) / 2};
      }
    }
    return features;
  }

  EncoderConfig config_;
  std::string prefix_;
  PatchEmbedding<T> patch_;
  std::vector<StageWeights<T>> stages_;
  std::map<std::string, std::vector<LoraAdapter<T>>> adapters_;
};

}  // namespace mmseg
