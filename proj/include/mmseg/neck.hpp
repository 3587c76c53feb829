#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "mmseg/encoder.hpp"
#include "mmseg/numerics.hpp"

namespace mmseg {

/// Per-stream pyramid outputs: semantic map at the deepest level, reduced
/// intermediate map at level 1 and reduced fine map at level 0.
template <typename T>
struct FeatureTriple {
  Tensor<T> sfm;  // [d × H_n × W_n]
  Tensor<T> ifp;  // [d/4 × H_1 × W_1]
  Tensor<T> ffp;  // [d/8 × H_0 × W_0]
  std::string tag;
};

/// Top-down pass: Y_n = Z_n, Y_i = (Z_i + up(Y_{i+1}))/2 for i in `levels`,
/// Y_i = Z_i otherwise.
template <typename T>
std::vector<Tensor<T>> topdown_fuse(const std::vector<Tensor<T>>& z, const std::set<std::size_t>& levels) {
  if (z.empty()) throw ArgumentError("topdown_fuse: no levels");
  const std::size_t deepest = z.size() - 1;
  for (std::size_t level : levels) {
    if (level >= deepest) {
      throw ArgumentError("topdown_fuse: fusion level " + std::to_string(level) +
                          " invalid; deepest level is " + std::to_string(deepest));
    }
  }
  std::vector<Tensor<T>> y(z.size());
  y[deepest] = z[deepest];
  for (std::size_t i = deepest; i-- > 0;) {
    if (levels.count(i)) {
      const auto up = upsample_bilinear(y[i + 1], z[i].dim(1), z[i].dim(2));
      y[i] = scale(add(z[i], up), T(0.5));
    } else {
      y[i] = z[i];
    }
  }
  return y;
}

/// FPN neck: lateral 1×1 projections to d channels, top-down fusion and the
/// channel reductions that produce a FeatureTriple.
template <typename T>
class Neck {
 public:
  Neck(const EncoderConfig& encoder, std::set<std::size_t> fuse_levels, ParameterStore<T>& store, Rng& rng,
       const std::string& prefix, bool frozen)
      : dim_(encoder.embed_dim), levels_(std::move(fuse_levels)) {
    if (dim_ % 8 != 0) throw DimensionError("neck: embed_dim " + std::to_string(dim_) + " not divisible by 8");
    for (std::size_t level : levels_) {
      if (level >= encoder.last_stage()) {
        throw ArgumentError("neck: fusion level " + std::to_string(level) + " has no deeper source");
      }
    }
    for (std::size_t i = 0; i < encoder.num_stages; ++i) {
      const std::size_t c = encoder.stage_channels(i);
      const std::string p = prefix + ".lateral" + std::to_string(i);
      lateral_w_.push_back(store.add_normal(p + ".weight", {dim_, c}, 1.0 / std::sqrt(double(c)), rng, frozen));
      lateral_b_.push_back(store.add_constant(p + ".bias", {dim_}, T(0), frozen));
    }
    const double std_d = 1.0 / std::sqrt(double(dim_));
    ifp_w_ = store.add_normal(prefix + ".ifp.weight", {dim_ / 4, dim_}, std_d, rng, frozen);
    ifp_b_ = store.add_constant(prefix + ".ifp.bias", {dim_ / 4}, T(0), frozen);
    ffp_w_ = store.add_normal(prefix + ".ffp.weight", {dim_ / 8, dim_}, std_d, rng, frozen);
    ffp_b_ = store.add_constant(prefix + ".ffp.bias", {dim_ / 8}, T(0), frozen);
  }

  /// Default fusion set: every level except the deepest.
  static std::set<std::size_t> default_levels(std::size_t num_stages) {
    std::set<std::size_t> out;
    for (std::size_t i = 0; i + 1 < num_stages; ++i) out.insert(i);
    return out;
  }

  Tensor<T> lateral(const Tensor<T>& x, std::size_t stage) const {
    if (stage >= lateral_w_.size()) {
      throw ArgumentError("neck: stage " + std::to_string(stage) + " out of range");
    }
    return conv1x1(x, lateral_w_[stage], lateral_b_[stage]);
  }

  std::vector<Tensor<T>> topdown(const std::vector<Tensor<T>>& z) const { return topdown_fuse(z, levels_); }

  FeatureTriple<T> project_triple(const std::vector<Tensor<T>>& y, std::string tag) const {
    if (y.size() < 2) throw ArgumentError("project_triple: need levels 0, 1 and n");
    return {y.back(), conv1x1(y[1], ifp_w_, ifp_b_), conv1x1(y[0], ffp_w_, ffp_b_), std::move(tag)};
  }

  FeatureTriple<T> forward(const std::vector<Tensor<T>>& features, std::string tag) const {
    if (features.size() != lateral_w_.size()) {
      throw ArgumentError("neck: expected " + std::to_string(lateral_w_.size()) + " feature levels, got " +
                          std::to_string(features.size()));
    }
    std::vector<Tensor<T>> z;
    for (std::size_t i = 0; i < features.size(); ++i) z.push_back(lateral(features[i], i));
    return project_triple(topdown(z), std::move(tag));
  }

  std::size_t dim() const { return dim_; }
  const std::set<std::size_t>& levels() const { return levels_; }

 private:
  std::size_t dim_;
  std::set<std::size_t> levels_;
  std::vector<Tensor<T>> lateral_w_, lateral_b_;
  Tensor<T> ifp_w_, ifp_b_, ffp_w_, ffp_b_;
};

}  // namespace mmseg
