#pragma once

#include <cmath>
#include <vector>

#include "voxattention/rng.hpp"
#include "voxattention/tensor.hpp"

namespace testutil {

inline double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

template <typename T>
vox::Tensor<T> random_tensor(vox::Shape shape, uint64_t seed, T lo = T(-1), T hi = T(1)) {
  vox::Rng rng(seed);
  return vox::Tensor<T>::uniform(std::move(shape), rng, lo, hi);
}

// plain nested-loop cross-correlation, the independent conv3d oracle
template <typename T>
std::vector<T> conv3d_oracle(const std::vector<T>& x, int64_t B, int64_t Ci, int64_t H, int64_t W,
                             int64_t D, const std::vector<T>& w, int64_t Co, int k,
                             const std::vector<T>& bias, int stride, int pad, int64_t& Ho,
                             int64_t& Wo, int64_t& Do) {
  Ho = (H + 2 * pad - k) / stride + 1;
  Wo = (W + 2 * pad - k) / stride + 1;
  Do = (D + 2 * pad - k) / stride + 1;
  std::vector<T> out(static_cast<size_t>(B * Co * Ho * Wo * Do), T(0));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo)
          for (int64_t dd = 0; dd < Do; ++dd) {
            T acc = bias.empty() ? T(0) : bias[static_cast<size_t>(co)];
            for (int64_t ci = 0; ci < Ci; ++ci)
              for (int a = 0; a < k; ++a)
                for (int bb = 0; bb < k; ++bb)
                  for (int c = 0; c < k; ++c) {
                    const int64_t h = ho * stride - pad + a;
                    const int64_t ww = wo * stride - pad + bb;
                    const int64_t d = dd * stride - pad + c;
                    if (h < 0 || ww < 0 || d < 0 || h >= H || ww >= W || d >= D) continue;
                    acc += x[static_cast<size_t>((((b * Ci + ci) * H + h) * W + ww) * D + d)] *
                           w[static_cast<size_t>((((co * Ci + ci) * k + a) * k + bb) * k + c)];
                  }
            out[static_cast<size_t>((((b * Co + co) * Ho + ho) * Wo + wo) * Do + dd)] = acc;
          }
  return out;
}

}  // namespace testutil
