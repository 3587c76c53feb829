#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "mmseg/neck.hpp"
#include "mmseg/numerics.hpp"

namespace mmseg {

/// Pyramid levels that take part in cross-modal fusion.
enum class FusionLevel : std::size_t { fine = 0, intermediate = 1, semantic = 2 };

inline const char* level_name(FusionLevel level) {
  switch (level) {
    case FusionLevel::fine: return "ffp";
    case FusionLevel::intermediate: return "ifp";
    case FusionLevel::semantic: return "sfm";
  }
  return "?";
}

/// Scalar gate for one level: logit = weight · f + bias.
template <typename T>
struct Router {
  Tensor<T> weight;  // [C_level]
  Tensor<T> bias;    // [1]
};

template <typename T>
struct RoutingDecision {
  FusionLevel level = FusionLevel::fine;
  Tensor<T> weights;                  // [M] softmax over present modalities
  std::vector<std::size_t> selected;  // positions into the present-modality list, best first
  std::size_t k = 0;

  T weight(std::size_t m) const { return weights.data()[m]; }
};

/// Positions of the k largest values; ties go to the lower index.
template <typename T>
std::vector<std::size_t> topk_indices(std::span<const T> values, std::size_t k) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  order.resize(std::min(k, order.size()));
  return order;
}

/// Element-wise mean over the present modalities.
template <typename T>
Tensor<T> average_modalities(const std::vector<Tensor<T>>& maps) {
  if (maps.empty()) throw ArgumentError("average_modalities: no modalities present");
  Tensor<T> acc = maps[0];
  for (std::size_t m = 1; m < maps.size(); ++m) acc = add(acc, maps[m]);
  return maps.size() == 1 ? acc : scale(acc, T(1) / static_cast<T>(maps.size()));
}

/// Gate weights from precomputed spatial-mean embeddings f^m.
template <typename T>
RoutingDecision<T> route_embeddings(const std::vector<Tensor<T>>& embeddings, const Router<T>& router,
                                    FusionLevel level, std::size_t k) {
  if (embeddings.empty()) throw ArgumentError("route: no modalities present");
  if (k == 0) throw ArgumentError("route: k must be positive");
  const std::size_t c = router.weight.numel();
  const auto row = reshape(router.weight, Shape{1, c});
  std::vector<Tensor<T>> logits;
  for (const auto& f : embeddings) {
    if (f.numel() != c) {
      throw DimensionError("route: embedding " + shape_str(f.shape()) + " does not match router width " +
                           std::to_string(c));
    }
    logits.push_back(add(reshape(matmul(row, reshape(f, Shape{c, 1})), Shape{1}), router.bias));
  }
  RoutingDecision<T> decision;
  decision.level = level;
  decision.weights = softmax(concat(logits), 0);
  decision.k = std::min(k, embeddings.size());
  decision.selected = topk_indices(decision.weights.data(), decision.k);
  return decision;
}

/// Spatial-mean embeddings followed by the softmax gate.
template <typename T>
RoutingDecision<T> route(const std::vector<Tensor<T>>& maps, const Router<T>& router, FusionLevel level,
                         std::size_t k) {
  std::vector<Tensor<T>> embeddings;
  for (const auto& y : maps) embeddings.push_back(mean_spatial(y));
  return route_embeddings(embeddings, router, level, k);
}

/// Σ over selected modalities of w^m · Y^m. Weights are used as-is unless
/// `renormalize` rescales the survivors to sum to one.
template <typename T>
Tensor<T> topk_fuse(const std::vector<Tensor<T>>& maps, const RoutingDecision<T>& decision, bool renormalize) {
  if (maps.size() != decision.weights.numel()) {
    throw ArgumentError("topk_fuse: decision covers " + std::to_string(decision.weights.numel()) +
                        " modalities, got " + std::to_string(maps.size()) + " feature maps");
  }
  if (decision.selected.empty()) throw ArgumentError("topk_fuse: empty selection");
  Tensor<T> norm;
  if (renormalize) {
    norm = slice(decision.weights, decision.selected[0], decision.selected[0] + 1);
    for (std::size_t j = 1; j < decision.selected.size(); ++j) {
      norm = add(norm, slice(decision.weights, decision.selected[j], decision.selected[j] + 1));
    }
  }
  Tensor<T> out;
  for (std::size_t m : decision.selected) {
    auto w = slice(decision.weights, m, m + 1);
    if (renormalize) w = div(w, norm);
    auto term = scale_by(maps[m], w);
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

/// Unified map: arithmetic mean of the uniform and routed aggregates.
template <typename T>
Tensor<T> unify(const Tensor<T>& averaged, const Tensor<T>& routed) {
  if (averaged.shape() != routed.shape()) {
    throw DimensionError("unify: shape mismatch " + shape_str(averaged.shape()) + " vs " +
                         shape_str(routed.shape()));
  }
  return scale(add(averaged, routed), T(0.5));
}

template <typename T>
struct FusionResult {
  FeatureTriple<T> fused;
  std::array<RoutingDecision<T>, 3> decisions;  // indexed by FusionLevel
  std::array<Tensor<T>, 3> averaged;
  std::array<Tensor<T>, 3> routed;
};

/// Independent routers for the fine, intermediate and semantic levels.
template <typename T>
class Fusion {
 public:
  Fusion(std::size_t embed_dim, ParameterStore<T>& store, Rng& rng, const std::string& prefix) {
    const std::array<std::size_t, 3> widths{embed_dim / 8, embed_dim / 4, embed_dim};
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string p = prefix + ".router." + level_name(static_cast<FusionLevel>(i));
      routers_[i].weight = store.add_normal(p + ".weight", {widths[i]}, 1.0 / std::sqrt(double(widths[i])), rng, false);
      routers_[i].bias = store.add_constant(p + ".bias", {1}, T(0), false);
    }
  }

  const Router<T>& router(FusionLevel level) const { return routers_[static_cast<std::size_t>(level)]; }

  /// Fuses per-modality triples (present modalities only) level by level.
  FusionResult<T> fuse_streams(const std::vector<FeatureTriple<T>>& triples, std::size_t k, bool renormalize) const {
    if (triples.empty()) throw ArgumentError("fuse_streams: no modalities present");
    FusionResult<T> result;
    std::array<Tensor<T>, 3> fused;
    for (std::size_t i = 0; i < 3; ++i) {
      const auto level = static_cast<FusionLevel>(i);
      std::vector<Tensor<T>> maps;
      for (const auto& t : triples) maps.push_back(i == 0 ? t.ffp : i == 1 ? t.ifp : t.sfm);
      result.averaged[i] = average_modalities(maps);
      result.decisions[i] = route(maps, routers_[i], level, k);
      result.routed[i] = topk_fuse(maps, result.decisions[i], renormalize);
      fused[i] = unify(result.averaged[i], result.routed[i]);
    }
    result.fused = {fused[2], fused[1], fused[0], "fused"};
    return result;
  }

 private:
  std::array<Router<T>, 3> routers_;
};

}  // namespace mmseg
