#include "voxattention/attention.hpp"

#include <cmath>

namespace vox {

namespace {

// (N,S,d) -> (N*heads, S, d/heads)
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int64_t n, int64_t s, int64_t d, int64_t heads) {
  const int64_t dh = d / heads;
  Tensor<T> y = reshape(x, {n, s, heads, dh});
  y = transpose(y, 1, 2);
  return reshape(y, {n * heads, s, dh});
}

}  // namespace

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const AttentionBlockParams<T>& params,
                               int heads, Tensor<T>* attn_maps) {
  const bool batched = x.ndim() == 3;
  require(batched || x.ndim() == 2, ErrorKind::dimension,
          "multi_head_attention: x must be (S,d) or (N,S,d)");
  const int64_t n = batched ? x.dim(0) : 1;
  const int64_t s = batched ? x.dim(1) : x.dim(0);
  const int64_t d = batched ? x.dim(2) : x.dim(1);
  require(s >= 1, ErrorKind::dimension, "multi_head_attention: empty sequence");
  require(heads >= 1 && d % heads == 0, ErrorKind::dimension,
          "multi_head_attention: embedding width not divisible by head count");
  const int64_t dh = d / heads;

  Tensor<T> xb = batched ? x : reshape(x, {n, s, d});
  Tensor<T> q = split_heads(dense(xb, params.wq, params.bq), n, s, d, heads);
  Tensor<T> k = split_heads(dense(xb, params.wk, params.bk), n, s, d, heads);
  Tensor<T> v = split_heads(dense(xb, params.wv, params.bv), n, s, d, heads);

  Tensor<T> scores = scale(bmm(q, k, /*transpose_b=*/true),
                           static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor<T> attn = softmax(scores, 2);  // (n*heads, s, s)
  if (attn_maps) {
    *attn_maps = batched ? reshape(attn, {n, static_cast<int64_t>(heads), s, s})
                         : reshape(attn, {static_cast<int64_t>(heads), s, s});
  }
  Tensor<T> ctx = bmm(attn, v);  // (n*heads, s, dh)
  ctx = reshape(ctx, {n, static_cast<int64_t>(heads), s, dh});
  ctx = transpose(ctx, 1, 2);
  ctx = reshape(ctx, {n, s, d});
  Tensor<T> out = dense(ctx, params.wo, params.bo);
  return batched ? out : reshape(out, {s, d});
}

template <typename T>
Tensor<T> attention_block(const Tensor<T>& x, const AttentionBlockParams<T>& params, int heads,
                          Tensor<T>* attn_maps, T ff_slope) {
  Tensor<T> mha = multi_head_attention(x, params, heads, attn_maps);
  Tensor<T> y = layernorm(add(x, mha), params.ln1_gamma, params.ln1_beta);
  Tensor<T> ff = dense(leaky_relu(dense(y, params.ff1_weight, params.ff1_bias), ff_slope),
                       params.ff2_weight, params.ff2_bias);
  return layernorm(add(y, ff), params.ln2_gamma, params.ln2_beta);
}

template Tensor<float> multi_head_attention<float>(const Tensor<float>&,
                                                   const AttentionBlockParams<float>&, int,
                                                   Tensor<float>*);
template Tensor<double> multi_head_attention<double>(const Tensor<double>&,
                                                     const AttentionBlockParams<double>&, int,
                                                     Tensor<double>*);
template Tensor<float> attention_block<float>(const Tensor<float>&,
                                              const AttentionBlockParams<float>&, int,
                                              Tensor<float>*, float);
template Tensor<double> attention_block<double>(const Tensor<double>&,
                                                const AttentionBlockParams<double>&, int,
                                                Tensor<double>*, double);

}  // namespace vox
