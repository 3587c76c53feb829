#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "mmseg/error.hpp"
#include "mmseg/numerics/random.hpp"
#include "mmseg/numerics/tensor.hpp"

namespace mmseg {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool frozen = false;
};

/// Registry of named model parameters, in creation order.
///
/// Modules hold the returned Tensor handles; the store holds the same nodes,
/// so optimizer updates through the store are visible to the modules.
template <typename T>
class ParameterStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> init, bool frozen) {
    if (index_.count(name)) throw ArgumentError("parameter name '" + name + "' registered twice");
    init.set_requires_grad(!frozen);
    index_.emplace(name, params_.size());
    params_.push_back({name, init, frozen});
    return init;
  }

  /// N(0, stddev²) initialised parameter.
  Tensor<T> add_normal(const std::string& name, Shape shape, double stddev, Rng& rng, bool frozen) {
    std::vector<T> values(shape_numel(shape));
    for (auto& v : values) v = static_cast<T>(rng.normal(0.0, stddev));
    return add(name, Tensor<T>(std::move(shape), std::move(values)), frozen);
  }

  Tensor<T> add_constant(const std::string& name, Shape shape, T value, bool frozen) {
    return add(name, Tensor<T>(std::move(shape), value), frozen);
  }

  const std::vector<Parameter<T>>& all() const { return params_; }
  std::vector<Parameter<T>>& all() { return params_; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Parameter<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter '" + name + "'");
    return params_[it->second];
  }

  /// Changes the frozen flag after construction (used for ablation switches).
  void set_frozen(const std::string& name, bool frozen) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter '" + name + "'");
    auto& p = params_[it->second];
    p.frozen = frozen;
    p.value.set_requires_grad(!frozen);
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (!p.frozen) n += p.value.numel();
    }
    return n;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace mmseg
