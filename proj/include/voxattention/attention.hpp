#pragma once

#include "voxattention/ops.hpp"

namespace vox {

// Weights of one attention block: the four projections of the 8-head
// attention, the post-norm layer norms, and the feed-forward pair
// (d -> 4d -> d).
template <typename T>
struct AttentionBlockParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Tensor<T> ff1_weight, ff1_bias, ff2_weight, ff2_bias;
};

// Scaled dot-product attention over the middle axis of x.
// x: (S, d) or batched (N, S, d). Each softmax row sums to one.
// attn_maps (optional out): (heads, S, S) resp. (N, heads, S, S).
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const AttentionBlockParams<T>& params,
                               int heads, Tensor<T>* attn_maps = nullptr);

// Post-norm residual block: y = LN(x + MHA(x)), out = LN(y + FF(y)).
template <typename T>
Tensor<T> attention_block(const Tensor<T>& x, const AttentionBlockParams<T>& params, int heads,
                          Tensor<T>* attn_maps = nullptr, T ff_slope = T(0.2));

}  // namespace vox
