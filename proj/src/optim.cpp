#include "voxattention/optim.hpp"

#include <cmath>

namespace vox {

template <typename T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state, int epoch) {
  const T lr = state.effective_lr(epoch);
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const T bc1 = static_cast<T>(1.0 - std::pow(static_cast<double>(state.beta1), t));
  const T bc2 = static_cast<T>(1.0 - std::pow(static_cast<double>(state.beta2), t));
  for (auto& [name, p] : params.all()) {
    if (p.buffer) continue;
    if (p.frozen) {
      p.value.zero_grad();
      continue;
    }
    require(p.value.has_grad(), ErrorKind::invariant,
            "adam_step: unfrozen parameter without gradient: " + name);
    auto g = p.value.grad();
    auto v = p.value.data();
    auto m1 = p.adam_m.data();
    auto m2 = p.adam_v.data();
    const T b1 = state.beta1, b2 = state.beta2;
    for (size_t i = 0; i < v.size(); ++i) {
      m1[i] = b1 * m1[i] + (T(1) - b1) * g[i];
      m2[i] = b2 * m2[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m1[i] / bc1;
      const T vhat = m2[i] / bc2;
      v[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    p.value.zero_grad();
  }
}

template void adam_step<float>(ParameterStore<float>&, AdamState<float>&, int);
template void adam_step<double>(ParameterStore<double>&, AdamState<double>&, int);

}  // namespace vox
