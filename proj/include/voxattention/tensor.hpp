#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "voxattention/error.hpp"
#include "voxattention/rng.hpp"

namespace vox {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;     // persistent accumulator, filled for leaves by backward
  std::vector<T> adjoint;  // scratch for the backward pass in flight
  uint64_t adjoint_pass = 0;
  bool requires_grad = false;
  bool leaf = true;
};

}  // namespace detail

// Dense row-major tensor handle with reverse-mode autodiff. Copies are
// shallow (shared storage); ops produce fresh tensors. dtype is the
// template parameter: float for training, double for gradient checking.
template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(static_cast<size_t>(shape_numel(t.node_->shape)), T(0));
    return t;
  }

  static Tensor full(Shape shape, T fill) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.node_->value) v = fill;
    return t;
  }

  static Tensor scalar(T v) { return full({}, v); }

  static Tensor from(Shape shape, std::vector<T> data) {
    require(static_cast<int64_t>(data.size()) == shape_numel(shape), ErrorKind::dimension,
            "tensor data length does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.node_->value) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape shape, Rng& rng, T mean, T stddev) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.node_->value) v = mean + stddev * static_cast<T>(rng.normal());
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }

  bool has_grad() const { return defined() && !node_->grad.empty(); }
  std::span<T> grad() {
    require(has_grad(), ErrorKind::state, "tensor has no gradient");
    return node_->grad;
  }
  std::span<const T> grad() const {
    require(has_grad(), ErrorKind::state, "tensor has no gradient");
    return node_->grad;
  }
  void zero_grad() {
    if (node_) node_->grad.clear();
  }

  bool requires_grad() const { return defined() && node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }
  bool is_leaf() const { return node_->leaf; }

  T item() const {
    require(numel() == 1, ErrorKind::dimension, "item() requires a single-element tensor");
    return node_->value[0];
  }

  int64_t offset_of(std::initializer_list<int64_t> idx) const {
    require(idx.size() == node_->shape.size(), ErrorKind::dimension,
            "index rank mismatch for shape " + shape_str(node_->shape));
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) off = off * node_->shape[k++] + i;
    return off;
  }

  T& at(std::initializer_list<int64_t> idx) { return node_->value[static_cast<size_t>(offset_of(idx))]; }
  T at(std::initializer_list<int64_t> idx) const { return node_->value[static_cast<size_t>(offset_of(idx))]; }

  // Deep copy of values only (no autodiff history).
  Tensor clone_detached() const {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Records backward closures in execution order; backward() walks them in
// reverse. Gradients of leaves accumulate additively across backward calls
// until explicitly cleared, so two passes over the same graph double them.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void backward(const Tensor<T>& loss);

  static Tape* active();

 private:
  std::vector<std::function<void()>> nodes_;
};

// Installs a tape as the recording target for this thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Suspends recording (evaluation / finite-difference passes).
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* prev_;
};

namespace detail {

// Backward-pass gradient routing shared by all op implementations.
template <typename T>
uint64_t& pass_counter();

template <typename T>
std::span<const T> pass_adjoint(const std::shared_ptr<TensorNode<T>>& node, bool& live);

template <typename T>
std::span<T> pass_adjoint_accum(const std::shared_ptr<TensorNode<T>>& node);

template <typename T>
bool wants_grad(const std::shared_ptr<TensorNode<T>>& node);

}  // namespace detail

}  // namespace vox
