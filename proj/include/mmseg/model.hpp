#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mmseg/data.hpp"
#include "mmseg/decoder.hpp"
#include "mmseg/encoder.hpp"
#include "mmseg/fusion.hpp"
#include "mmseg/neck.hpp"
#include "mmseg/numerics.hpp"

namespace mmseg {

enum class InferenceHead { combined, s0, s1 };

inline std::string inference_head_name(InferenceHead head) {
  switch (head) {
    case InferenceHead::combined: return "combined";
    case InferenceHead::s0: return "s0";
    case InferenceHead::s1: return "s1";
  }
  return "?";
}

inline InferenceHead parse_inference_head(const std::string& text) {
  if (text == "combined") return InferenceHead::combined;
  if (text == "s0") return InferenceHead::s0;
  if (text == "s1") return InferenceHead::s1;
  throw ArgumentError("unknown inference head '" + text + "' (expected combined, s0 or s1)");
}

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t num_classes = 5;
  std::size_t top_k = 0;  // 0 selects ceil(M/2) for M present modalities
  bool renormalize_topk = false;
  double dropout = 0.1;
  InferenceHead inference_head = InferenceHead::combined;
  bool per_modality_neck = false;
  bool freeze_neck = false;
  std::vector<std::string> modalities{"rgb", "depth"};
  std::uint64_t seed = 0;

  void validate() const {
    encoder.validate();
    if (encoder.embed_dim % 8 != 0) throw DimensionError("model: embed_dim must be divisible by 8");
    if (num_classes == 0 || num_classes > 255) throw ArgumentError("model: classes must be in [1, 255]");
    if (modalities.empty()) throw ArgumentError("model: no modalities configured");
    if (std::set<std::string>(modalities.begin(), modalities.end()).size() != modalities.size()) {
      throw ArgumentError("model: duplicate modality");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ArgumentError("model: dropout must be in [0, 1)");
  }
};

template <typename T>
struct ModelOutput {
  DualLogits<T> logits;
  FusionResult<T> fusion;
  std::vector<std::string> present;  // modalities that took part, in model order
};

/// Rescales a [0, 255] raster to roughly [-2, 2] and repeats its channels
/// cyclically to the backbone's input width.
template <typename T>
Tensor<T> prepare_input(const Tensor<float>& raster, std::size_t in_channels) {
  if (raster.rank() != 3) throw DimensionError("prepare_input: expected [C×H×W], got " + shape_str(raster.shape()));
  const std::size_t c = raster.dim(0), hw = raster.dim(1) * raster.dim(2);
  std::vector<T> values(in_channels * hw);
  const auto src = raster.data();
  for (std::size_t k = 0; k < in_channels; ++k) {
    const std::size_t from = k % c;
    for (std::size_t i = 0; i < hw; ++i) {
      values[k * hw + i] = (static_cast<T>(src[from * hw + i]) / T(255) - T(0.5)) / T(0.25);
    }
  }
  return Tensor<T>({in_channels, raster.dim(1), raster.dim(2)}, std::move(values));
}

/// Frozen backbone with per-modality adapters, FPN neck, three-level routed
/// fusion and the dual-pathway decoder.
template <typename T>
class Model {
 public:
  explicit Model(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    Rng rng(config_.seed);
    encoder_ = std::make_unique<Encoder<T>>(config_.encoder, store_, rng);
    for (const auto& m : config_.modalities) encoder_->add_modality(m, store_, rng);
    const auto levels = Neck<T>::default_levels(config_.encoder.num_stages);
    if (config_.per_modality_neck) {
      for (const auto& m : config_.modalities) {
        necks_.emplace(m, std::make_unique<Neck<T>>(config_.encoder, levels, store_, rng, "neck." + m,
                                                    config_.freeze_neck));
      }
    } else {
      necks_.emplace("", std::make_unique<Neck<T>>(config_.encoder, levels, store_, rng, "neck", config_.freeze_neck));
    }
    fusion_ = std::make_unique<Fusion<T>>(config_.encoder.embed_dim, store_, rng, "fusion");
    DecoderConfig dc;
    dc.embed_dim = config_.encoder.embed_dim;
    dc.num_classes = config_.num_classes;
    dc.dropout = config_.dropout;
    decoder_ = std::make_unique<Decoder<T>>(dc, store_, rng, "decoder");
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  std::size_t effective_k(std::size_t present) const {
    return config_.top_k ? std::min(config_.top_k, present) : (present + 1) / 2;
  }

  /// Per-modality stream: encoder features through the neck.
  FeatureTriple<T> stream(const Tensor<T>& input, const std::string& modality) const {
    return neck_for(modality).forward(encoder_->encode(input, modality), modality);
  }

  /// Runs every modality of `sample` (which must be a subset of the trained
  /// set) and decodes the fused triple.
  ModelOutput<T> forward(const ModalitySample& sample, bool train = false, Rng* rng = nullptr) const {
    ModelOutput<T> out;
    std::vector<FeatureTriple<T>> triples;
    for (const auto& [name, _] : sample.rasters) {
      if (!encoder_->has_modality(name)) {
        throw ArgumentError("modality '" + name + "' was not part of the trained set {" +
                            join(config_.modalities, ",") + "}");
      }
    }
    for (const auto& m : config_.modalities) {
      auto it = sample.rasters.find(m);
      if (it == sample.rasters.end()) continue;
      triples.push_back(stream(prepare_input<T>(it->second, config_.encoder.in_channels), m));
      out.present.push_back(m);
    }
    if (triples.empty()) throw ArgumentError("sample " + sample.id + " has no modalities");
    out.fusion = fusion_->fuse_streams(triples, effective_k(triples.size()), config_.renormalize_topk);
    out.logits = decoder_->forward(out.fusion.fused, train, rng);
    return out;
  }

  /// Full-resolution logits [classes × H × W] from the chosen head.
  Tensor<T> head_logits(const DualLogits<T>& dual, std::size_t h, std::size_t w,
                        std::optional<InferenceHead> head = std::nullopt) const {
    switch (head.value_or(config_.inference_head)) {
      case InferenceHead::s0: return upsample_bilinear(dual.s0, h, w);
      case InferenceHead::s1: return upsample_bilinear(dual.s1, h, w);
      case InferenceHead::combined: break;
    }
    return combine_predictions(dual.s0, dual.s1, h, w);
  }

  Tensor<T> logits(const ModalitySample& sample, std::optional<InferenceHead> head = std::nullopt) const {
    NoGradGuard guard;
    return head_logits(forward(sample).logits, sample.height(), sample.width(), head);
  }

  /// Arg-max class per pixel, ties resolved to the lower class id.
  LabelMap predict(const ModalitySample& sample, std::optional<InferenceHead> head = std::nullopt) const {
    return {sample.height(), sample.width(), argmax_channels(logits(sample, head))};
  }

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  const Encoder<T>& encoder() const { return *encoder_; }
  const Fusion<T>& fusion() const { return *fusion_; }
  const Decoder<T>& decoder() const { return *decoder_; }

  const Neck<T>& neck_for(const std::string& modality) const {
    auto it = necks_.find(config_.per_modality_neck ? modality : "");
    if (it == necks_.end()) throw ArgumentError("no neck for modality '" + modality + "'");
    return *it->second;
  }

 private:
  ModelConfig config_;
  ParameterStore<T> store_;
  std::unique_ptr<Encoder<T>> encoder_;
  std::map<std::string, std::unique_ptr<Neck<T>>> necks_;
  std::unique_ptr<Fusion<T>> fusion_;
  std::unique_ptr<Decoder<T>> decoder_;
};

}  // namespace mmseg
