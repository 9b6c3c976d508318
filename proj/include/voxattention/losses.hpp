#pragma once

#include <vector>

#include "voxattention/ops.hpp"

namespace vox {

// Term weights and the cross-entropy asymmetry. Stage 1 reads (w_pi, w_part),
// stage 2 (w_trans, w_ac), stage 3 all five.
template <typename T>
struct LossWeights {
  T w_pi = T(1);
  T w_part = T(1);
  T w_trans = T(10);
  T w_ac = T(1);
  T w_shape = T(10);
  T gamma = T(0.6);
};

struct StageLossReport {
  int stage = 0;
  int epoch = 0;
  double loss_pi = 0.0;
  double loss_part = 0.0;
  double loss_trans = 0.0;
  double loss_ac = 0.0;
  double loss_shape = 0.0;
  double total = 0.0;
};

// Deviation of the bank from a partition of the identity: the projection
// residual, the ordered cross terms, and the sum-to-identity residual, all
// squared Frobenius norms.
template <typename T>
Tensor<T> loss_pi(const std::vector<Tensor<T>>& bank);

// Asymmetric binary cross entropy averaged over the voxels of present
// parts; output (B,N_p,...), target binary, mask (B,N_p).
template <typename T>
Tensor<T> loss_part(const Tensor<T>& output, const Tensor<T>& target, const Tensor<T>& present,
                    T gamma);

// Squared L2 over the six parameters, summed over present parts, averaged
// over the batch. pred/gt: (B,N_p,6), present: (B,N_p).
template <typename T>
Tensor<T> loss_trans(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& present);

// Mean squared difference between per-layer post-attention vectors, summed
// over unordered layer pairs. A single layer yields 0 with a warning.
template <typename T>
Tensor<T> loss_ac(const std::vector<Tensor<T>>& ac_vectors);

// Same cross entropy over the assembled full shape (no part mask).
template <typename T>
Tensor<T> loss_shape(const Tensor<T>& assembled, const Tensor<T>& target, T gamma);

template <typename T>
struct StageLossInputs {
  const std::vector<Tensor<T>>* bank = nullptr;
  Tensor<T> part_output, part_target, part_mask;
  Tensor<T> trans_pred, trans_gt, trans_mask;
  std::vector<Tensor<T>> ac_vectors;
  bool ac_active = false;  // whether the consistency term participates
  Tensor<T> assembled, shape_target;
};

// Weighted stage composite; fills the report with raw term values and the
// weighted total.
template <typename T>
Tensor<T> stage_loss(int stage, const StageLossInputs<T>& inputs, const LossWeights<T>& weights,
                     StageLossReport& report);

}  // namespace vox
