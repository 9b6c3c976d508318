#pragma once

#include <functional>
#include <string>
#include <vector>

#include "voxattention/tensor.hpp"

namespace vox {

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool all_finite = true;
  std::string worst_location;  // "input[k][i]" of the worst coordinate

  bool ok(double tol) const { return all_finite && max_rel_error < tol; }
};

// Compares reverse-mode gradients of the scalar computation f (built from
// the given inputs) against central differences (f(x+h)-f(x-h))/2h. The
// forward passes for differencing run with recording suspended. When
// max_coords > 0 only that many deterministically-spread coordinates are
// probed per input; otherwise every element is checked.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs,
                           T h, int64_t max_coords = -1);

}  // namespace vox
