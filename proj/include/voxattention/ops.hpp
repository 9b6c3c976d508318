#pragma once

#include <vector>

#include "voxattention/tensor.hpp"

namespace vox {

// ---- elementwise -----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <typename T>
Tensor<T> exp(const Tensor<T>& a);
template <typename T>
Tensor<T> log(const Tensor<T>& a);
template <typename T>
Tensor<T> square(const Tensor<T>& a);

// ---- structure -------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t length);

// ---- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis);
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis);

// ---- linear algebra --------------------------------------------------------

// (M,K) x (K,N) -> (M,N)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// (B,M,K) x (B,K,N) -> (B,M,N); transpose_b treats b as (B,N,K)
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);
// x: (..., F_in), weight: (F_out, F_in), bias: (F_out) -> (..., F_out)
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// ---- activations / normalization -------------------------------------------

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis);
// gamma, beta over the last axis; eps inside the square root
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));
// x: (B,C,H,W,D); training mode normalizes by batch statistics and updates
// running_mean/running_var in place (momentum on the old value)
template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                      T momentum = T(0.9), T eps = T(1e-5));

// ---- convolution -----------------------------------------------------------

// x: (B,C_in,H,W,D), weight: (C_out,C_in,k,k,k), bias: (C_out)
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding);
// x: (B,C_in,H,W,D), weight: (C_in,C_out,k,k,k), bias: (C_out);
// output extent (H-1)*stride - 2*padding + k
template <typename T>
Tensor<T> deconv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                   int stride, int padding);

// ---- task-specific kernels --------------------------------------------------

// Modified binary cross entropy, -2(g*t*log(o) + (1-g)*(1-t)*log(1-o)),
// averaged over the voxels selected by mask (empty mask = all voxels).
// mask must broadcast over trailing axes of o: numel(o) % numel(mask) == 0,
// with each mask element covering a contiguous block. Outputs are clamped
// 1e-7 away from {0,1}; the clamp does not cut the gradient.
template <typename T>
Tensor<T> bce_weighted(const Tensor<T>& output, const Tensor<T>& target, const Tensor<T>& mask, T gamma);

// occupancy: (1,R,R,R) canonical part, params: (6,) = (sx,sy,sz,tx,ty,tz).
// Every output voxel center w in [0,1]^3 samples the canonical grid
// trilinearly at (w - 0.5 - t)/s + 0.5, zero outside. Differentiable in
// both the occupancy and the six parameters.
template <typename T>
Tensor<T> grid_sample_transform(const Tensor<T>& occupancy, const Tensor<T>& params);

// parts: (N_p,R,R,R) -> (R,R,R) voxelwise maximum; on ties the gradient
// goes to the lowest part index.
template <typename T>
Tensor<T> voxel_max_union(const Tensor<T>& parts);

// raw: (...,6) -> (...,6) with exp applied to the first three slots of the
// last axis (positive scales), identity on the rest.
template <typename T>
Tensor<T> transform_activation(const Tensor<T>& raw);

}  // namespace vox
