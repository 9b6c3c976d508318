#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "voxattention/tensor.hpp"

namespace vox {

// A named trainable tensor with its Adam moment buffers. Buffers (running
// statistics and similar state) live in the same store but are never
// touched by the optimizer and carry no moments.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> adam_m;
  Tensor<T> adam_v;
  bool frozen = false;
  bool buffer = false;
};

template <typename T>
class ParameterStore {
 public:
  Tensor<T> create(const std::string& name, Tensor<T> init, bool buffer = false) {
    require(!params_.count(name), ErrorKind::invariant, "duplicate parameter name: " + name);
    Parameter<T> p;
    p.name = name;
    p.value = std::move(init);
    if (!buffer) {
      p.value.set_requires_grad(true);
      p.adam_m = Tensor<T>::zeros(p.value.shape());
      p.adam_v = Tensor<T>::zeros(p.value.shape());
    }
    p.buffer = buffer;
    params_.emplace(name, std::move(p));
    return params_.at(name).value;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter<T>& get(const std::string& name) {
    auto it = params_.find(name);
    require(it != params_.end(), ErrorKind::invariant, "unknown parameter: " + name);
    return it->second;
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), ErrorKind::invariant, "unknown parameter: " + name);
    return it->second;
  }

  // sorted by name, deterministic iteration order
  std::map<std::string, Parameter<T>>& all() { return params_; }
  const std::map<std::string, Parameter<T>>& all() const { return params_; }

  void set_frozen_by_prefix(const std::string& prefix, bool frozen) {
    for (auto& [name, p] : params_)
      if (name.rfind(prefix, 0) == 0) p.frozen = frozen;
  }

  void set_all_frozen(bool frozen) {
    for (auto& [name, p] : params_) p.frozen = frozen;
  }

  void zero_grads() {
    for (auto& [name, p] : params_) p.value.zero_grad();
  }

  size_t size() const { return params_.size(); }

  int64_t trainable_scalar_count() const {
    int64_t n = 0;
    for (const auto& [name, p] : params_)
      if (!p.buffer) n += p.value.numel();
    return n;
  }

 private:
  std::map<std::string, Parameter<T>> params_;
};

template <typename T>
struct AdamState {
  int64_t step_count = 0;
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T decay_ratio = T(1);
  int decay_every = 1;

  T effective_lr(int epoch) const {
    require(decay_every >= 1, ErrorKind::config, "adam: decay_every must be positive");
    return lr * static_cast<T>(std::pow(static_cast<double>(decay_ratio), epoch / decay_every));
  }
};

// Bias-corrected Adam over every unfrozen non-buffer parameter. Frozen
// parameters may carry gradients but are not updated; an unfrozen parameter
// without a gradient is a wiring bug and raises. All gradients (frozen
// included) are cleared afterwards.
template <typename T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state, int epoch);

}  // namespace vox
