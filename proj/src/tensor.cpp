#include "voxattention/tensor.hpp"

#include <sstream>

namespace vox {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

template <typename T>
Tape<T>*& active_tape_slot() {
  static thread_local Tape<T>* slot = nullptr;
  return slot;
}

}  // namespace

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : prev_(active_tape_slot<T>()) {
  active_tape_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  active_tape_slot<T>() = prev_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : prev_(active_tape_slot<T>()) {
  active_tape_slot<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  active_tape_slot<T>() = prev_;
}

namespace detail {

template <typename T>
uint64_t& pass_counter() {
  static thread_local uint64_t counter = 0;
  return counter;
}

template <typename T>
bool wants_grad(const std::shared_ptr<TensorNode<T>>& node) {
  return node->requires_grad;
}

// Read side: the adjoint this node accumulated during the pass in flight.
// live=false means nothing downstream fed it, so its producers can skip.
template <typename T>
std::span<const T> pass_adjoint(const std::shared_ptr<TensorNode<T>>& node, bool& live) {
  if (node->leaf) {
    // leaves are endpoints; their grads are never read back during a pass
    live = false;
    return {};
  }
  live = node->adjoint_pass == pass_counter<T>();
  if (!live) return {};
  return node->adjoint;
}

// Write side: leaves accumulate into the persistent grad buffer, interior
// nodes into a pass-local adjoint that is zeroed on first touch per pass.
template <typename T>
std::span<T> pass_adjoint_accum(const std::shared_ptr<TensorNode<T>>& node) {
  if (node->leaf) {
    if (node->grad.empty()) node->grad.assign(node->value.size(), T(0));
    return node->grad;
  }
  if (node->adjoint_pass != pass_counter<T>()) {
    node->adjoint.assign(node->value.size(), T(0));
    node->adjoint_pass = pass_counter<T>();
  }
  return node->adjoint;
}

}  // namespace detail

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  require(loss.defined() && loss.numel() == 1, ErrorKind::dimension,
          "backward requires a scalar loss");
  ++detail::pass_counter<T>();
  auto node = loss.node();
  if (node->leaf) {
    if (node->requires_grad) {
      if (node->grad.empty()) node->grad.assign(1, T(0));
      node->grad[0] += T(1);
    }
    return;
  }
  node->adjoint.assign(1, T(1));
  node->adjoint_pass = detail::pass_counter<T>();
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;

namespace detail {
template uint64_t& pass_counter<float>();
template uint64_t& pass_counter<double>();
template bool wants_grad<float>(const std::shared_ptr<TensorNode<float>>&);
template bool wants_grad<double>(const std::shared_ptr<TensorNode<double>>&);
template std::span<const float> pass_adjoint<float>(const std::shared_ptr<TensorNode<float>>&, bool&);
template std::span<const double> pass_adjoint<double>(const std::shared_ptr<TensorNode<double>>&, bool&);
template std::span<float> pass_adjoint_accum<float>(const std::shared_ptr<TensorNode<float>>&);
template std::span<double> pass_adjoint_accum<double>(const std::shared_ptr<TensorNode<double>>&);
}  // namespace detail

}  // namespace vox
